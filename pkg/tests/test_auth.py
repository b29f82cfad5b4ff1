"""Hub tokens, state nonces, and the OAuth login flow."""

from __future__ import annotations

import asyncio
import time
from urllib.parse import parse_qs, quote, urlsplit

import httpx
import pytest
from hypothesis import given, strategies as st

from everhub.auth import (
    AuthService,
    BadState,
    ExchangeFailed,
    HttpOAuthProvider,
    LoginNotAllowed,
    StaticProvider,
    TokenExpired,
    TokenInvalid,
    TokenSigner,
    normalize_login,
)

KEY = b"k" * 32
CALLBACK = "http://hub.local/hub/oauth_callback"


def service(allow_list=(), codes=None) -> AuthService:
    provider = StaticProvider(codes or {"ok-alice": "alice", "ok-bob": "bob"})
    return AuthService(provider, TokenSigner(KEY), CALLBACK, allow_list=allow_list)


# Tokens ---------------------------------------------------------------------


def test_token_round_trip():
    signer = TokenSigner(KEY)
    token = signer.mint("alice", now=1000.0)
    assert signer.verify(token, now=1001.0) == "alice"


def test_token_flipped_signature_byte_is_invalid():
    signer = TokenSigner(KEY)
    token = signer.mint("alice")
    head, sig = token.rsplit(".", 1)
    flipped = head + "." + ("A" if sig[0] != "A" else "B") + sig[1:]
    with pytest.raises(TokenInvalid):
        signer.verify(flipped)


def test_token_expiry_is_strict():
    signer = TokenSigner(KEY)
    token = signer.mint("alice", now=1000.0, lifetime=60)
    assert signer.verify(token, now=1059.9) == "alice"
    with pytest.raises(TokenExpired):
        signer.verify(token, now=1060.0)  # now == expires_at is already expired
    with pytest.raises(TokenExpired):
        signer.verify(token, now=2000.0)


def test_token_garbage_is_invalid():
    signer = TokenSigner(KEY)
    for raw in ("", "x", "a.b", "a.b.c", "!!!.???"):
        with pytest.raises(TokenInvalid):
            signer.verify(raw)


def test_short_secret_rejected():
    with pytest.raises(ValueError):
        TokenSigner(b"short")


@given(login=st.from_regex(r"[a-z0-9][a-z0-9-]{0,30}", fullmatch=True))
def test_token_round_trip_for_arbitrary_logins(login):
    signer = TokenSigner(KEY)
    assert signer.verify(signer.mint(login)) == login


@given(other_key=st.binary(min_size=32, max_size=64))
def test_foreign_key_tokens_never_verify(other_key):
    signer = TokenSigner(KEY)
    if other_key == KEY:
        return
    foreign = TokenSigner(other_key)
    token = foreign.mint("alice")
    with pytest.raises(TokenInvalid):
        signer.verify(token)


# Login flow -------------------------------------------------------------------


def test_begin_login_nonces_are_distinct():
    svc = service()
    _, first = svc.begin_login()
    _, second = svc.begin_login()
    assert first != second


def test_authorize_url_carries_encoded_callback_and_state():
    svc = service()
    url, nonce = svc.begin_login("/after")
    assert quote(CALLBACK, safe="") in url
    query = parse_qs(urlsplit(url).query)
    assert query["redirect_uri"] == [CALLBACK]
    assert query["state"] == [nonce]


@pytest.mark.anyio
async def test_complete_login_happy_path():
    svc = service()
    _, nonce = svc.begin_login("/next-page")
    identity, token, redirect_after = await svc.complete_login("ok-alice", nonce)
    assert identity.login == "alice"
    assert redirect_after == "/next-page"
    assert svc.verify_token(token).login == "alice"


@pytest.mark.anyio
async def test_nonce_is_single_use():
    svc = service()
    _, nonce = svc.begin_login()
    await svc.complete_login("ok-alice", nonce)
    with pytest.raises(BadState):
        await svc.complete_login("ok-alice", nonce)


@pytest.mark.anyio
async def test_concurrent_nonce_reuse_single_winner():
    svc = service()
    _, nonce = svc.begin_login()
    results = await asyncio.gather(
        *(svc.complete_login("ok-alice", nonce) for _ in range(5)), return_exceptions=True
    )
    winners = [r for r in results if not isinstance(r, Exception)]
    losers = [r for r in results if isinstance(r, BadState)]
    assert len(winners) == 1
    assert len(losers) == 4


@pytest.mark.anyio
async def test_expired_nonce_rejected(monkeypatch):
    svc = service()
    _, nonce = svc.begin_login()
    svc._nonces[nonce].expires_at = time.time() - 1  # 11 minutes later, in effect
    with pytest.raises(BadState):
        await svc.complete_login("ok-alice", nonce)


@pytest.mark.anyio
async def test_unknown_code_is_exchange_failure():
    svc = service()
    _, nonce = svc.begin_login()
    with pytest.raises(ExchangeFailed):
        await svc.complete_login("who-dis", nonce)


@pytest.mark.anyio
async def test_allow_list_blocks_unlisted_logins():
    svc = service(allow_list=("bob",))
    _, nonce = svc.begin_login()
    with pytest.raises(LoginNotAllowed):
        await svc.complete_login("ok-alice", nonce)
    _, nonce = svc.begin_login()
    identity, _, _ = await svc.complete_login("ok-bob", nonce)
    assert identity.login == "bob"


def test_normalize_login():
    assert normalize_login("Alice") == "alice"
    assert normalize_login("A_B.C") == "a-b-c"
    assert normalize_login("-x-") == "x-"
    with pytest.raises(Exception):
        normalize_login("---")


# HTTP provider wire shapes ------------------------------------------------------


@pytest.mark.anyio
async def test_http_provider_exchange_and_identity():
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        if request.url.path == "/token":
            body = parse_qs(request.content.decode())
            assert body["grant_type"] == ["authorization_code"]
            assert body["code"] == ["abc"]
            assert body["client_id"] == ["cid"]
            assert body["redirect_uri"] == [CALLBACK]
            return httpx.Response(200, json={"access_token": "tok-1"})
        if request.url.path == "/user":
            assert request.headers["authorization"] == "Bearer tok-1"
            return httpx.Response(200, json={"login": "Alice", "name": "Alice W"})
        return httpx.Response(404)

    provider = HttpOAuthProvider(
        name="github",
        client_id="cid",
        client_secret="sec",
        authorize_endpoint="https://prov/authorize",
        token_endpoint="https://prov/token",
        user_endpoint="https://prov/user",
        scope="read:user",
        client=httpx.AsyncClient(transport=httpx.MockTransport(handler)),
    )
    token = await provider.exchange_code("abc", CALLBACK)
    identity = await provider.fetch_identity(token)
    assert identity.login == "alice"
    assert identity.display_name == "Alice W"

    url = provider.authorize_url(CALLBACK, "nonce-1")
    query = parse_qs(urlsplit(url).query)
    assert query["client_id"] == ["cid"]
    assert query["state"] == ["nonce-1"]
    assert query["scope"] == ["read:user"]


@pytest.mark.anyio
async def test_http_provider_error_statuses():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(400, json={"error": "bad_verification_code"})

    provider = HttpOAuthProvider(
        name="github",
        client_id="cid",
        client_secret="sec",
        authorize_endpoint="https://prov/authorize",
        token_endpoint="https://prov/token",
        user_endpoint="https://prov/user",
        client=httpx.AsyncClient(transport=httpx.MockTransport(handler)),
    )
    with pytest.raises(ExchangeFailed):
        await provider.exchange_code("bad", CALLBACK)
