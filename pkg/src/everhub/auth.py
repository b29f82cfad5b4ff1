"""Login via the git host's OAuth2 authorization-code flow, hub tokens.

Hub tokens are stateless HMAC-signed values so authentication survives hub
restarts without journaling anything; the OAuth provider is fully
configurable (endpoints, client credentials) and a static in-memory
provider stands in for it in tests and demos.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import re
import secrets
import time
from dataclasses import dataclass
from typing import Protocol
from urllib.parse import urlencode

import httpx

__all__ = [
    "Identity",
    "AuthError",
    "BadState",
    "ExchangeFailed",
    "TokenInvalid",
    "TokenExpired",
    "LoginNotAllowed",
    "OAuthProvider",
    "HttpOAuthProvider",
    "StaticProvider",
    "TokenSigner",
    "AuthService",
    "normalize_login",
    "TOKEN_LIFETIME_SECONDS",
]

TOKEN_LIFETIME_SECONDS = 12 * 3600
NONCE_LIFETIME_SECONDS = 600

_LOGIN_RE = re.compile(r"^[a-z0-9][a-z0-9-]*$")


class AuthError(Exception):
    pass


class BadState(AuthError):
    """Unknown, expired, or reused login state nonce."""


class ExchangeFailed(AuthError):
    """The provider rejected the authorization code."""


class TokenInvalid(AuthError):
    pass


class TokenExpired(AuthError):
    pass


class LoginNotAllowed(AuthError):
    """Authenticated fine, but the login is not on the allow-list."""


@dataclass(frozen=True)
class Identity:
    login: str
    provider: str = "hub"
    display_name: str = ""


def normalize_login(raw: str) -> str:
    login = re.sub(r"[^a-z0-9-]", "-", raw.strip().lower()).lstrip("-")
    if not login or not _LOGIN_RE.match(login):
        raise AuthError(f"cannot normalize login {raw!r}")
    return login


class OAuthProvider(Protocol):
    name: str

    def authorize_url(self, redirect_uri: str, state: str) -> str: ...

    async def exchange_code(self, code: str, redirect_uri: str) -> str: ...

    async def fetch_identity(self, access_token: str) -> Identity: ...


class HttpOAuthProvider:
    """Authorization-code flow against configurable provider endpoints."""

    def __init__(
        self,
        name: str,
        client_id: str,
        client_secret: str,
        authorize_endpoint: str,
        token_endpoint: str,
        user_endpoint: str,
        scope: str = "",
        client: httpx.AsyncClient | None = None,
    ):
        self.name = name
        self.client_id = client_id
        self.client_secret = client_secret
        self.authorize_endpoint = authorize_endpoint
        self.token_endpoint = token_endpoint
        self.user_endpoint = user_endpoint
        self.scope = scope
        self._client = client or httpx.AsyncClient(timeout=20.0)

    def authorize_url(self, redirect_uri: str, state: str) -> str:
        params = {"client_id": self.client_id, "redirect_uri": redirect_uri, "state": state}
        if self.scope:
            params["scope"] = self.scope
        return f"{self.authorize_endpoint}?{urlencode(params)}"

    async def exchange_code(self, code: str, redirect_uri: str) -> str:
        try:
            resp = await self._client.post(
                self.token_endpoint,
                data={
                    "grant_type": "authorization_code",
                    "client_id": self.client_id,
                    "client_secret": self.client_secret,
                    "code": code,
                    "redirect_uri": redirect_uri,
                },
                headers={"Accept": "application/json"},
            )
        except httpx.TransportError as exc:
            raise ExchangeFailed(f"token endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ExchangeFailed(f"token endpoint returned {resp.status_code}")
        token = resp.json().get("access_token")
        if not token:
            raise ExchangeFailed("token endpoint response had no access_token")
        return token

    async def fetch_identity(self, access_token: str) -> Identity:
        try:
            resp = await self._client.get(
                self.user_endpoint, headers={"Authorization": f"Bearer {access_token}"}
            )
        except httpx.TransportError as exc:
            raise ExchangeFailed(f"user endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ExchangeFailed(f"user endpoint returned {resp.status_code}")
        data = resp.json()
        raw_login = data.get("login") or data.get("username") or ""
        if not raw_login:
            raise ExchangeFailed("user endpoint response had no login")
        display = data.get("name") or raw_login
        return Identity(login=normalize_login(raw_login), provider=self.name, display_name=display)

    async def close(self) -> None:
        await self._client.aclose()


class StaticProvider:
    """Maps preconfigured codes straight to identities; no network."""

    name = "static"

    def __init__(self, codes: dict[str, str], authorize_endpoint: str = "https://auth.invalid/authorize"):
        self.codes = dict(codes)
        self.authorize_endpoint = authorize_endpoint

    def authorize_url(self, redirect_uri: str, state: str) -> str:
        params = {"client_id": "static", "redirect_uri": redirect_uri, "state": state}
        return f"{self.authorize_endpoint}?{urlencode(params)}"

    async def exchange_code(self, code: str, redirect_uri: str) -> str:
        if code not in self.codes:
            raise ExchangeFailed(f"unknown code {code!r}")
        return f"static-token-{code}"

    async def fetch_identity(self, access_token: str) -> Identity:
        code = access_token.removeprefix("static-token-")
        try:
            login = self.codes[code]
        except KeyError:
            raise ExchangeFailed("unknown access token") from None
        return Identity(login=normalize_login(login), provider=self.name, display_name=login)

    async def close(self) -> None:
        return None


class TokenSigner:
    """Mint and verify hub tokens: base64(payload).base64(hmac-sha256)."""

    def __init__(self, secret_key: bytes):
        if len(secret_key) < 32:
            raise ValueError("secret_key too short")
        self._key = secret_key

    def mint(self, login: str, now: float | None = None, lifetime: int = TOKEN_LIFETIME_SECONDS) -> str:
        issued_at = int(time.time() if now is None else now)
        payload = json.dumps(
            {"login": login, "issued_at": issued_at, "expires_at": issued_at + lifetime},
            separators=(",", ":"),
            sort_keys=True,
        ).encode()
        sig = hmac.new(self._key, payload, hashlib.sha256).digest()
        return f"{_b64(payload)}.{_b64(sig)}"

    def verify(self, raw_token: str, now: float | None = None) -> str:
        """Return the token's login; validity is strict: now < expires_at."""
        now = time.time() if now is None else now
        try:
            payload_b64, sig_b64 = raw_token.split(".")
            payload = _unb64(payload_b64)
            sig = _unb64(sig_b64)
        except (ValueError, TypeError):
            raise TokenInvalid("malformed token") from None
        expected = hmac.new(self._key, payload, hashlib.sha256).digest()
        if not hmac.compare_digest(sig, expected):
            raise TokenInvalid("bad signature")
        try:
            claims = json.loads(payload)
            login = claims["login"]
            issued_at = int(claims["issued_at"])
            expires_at = int(claims["expires_at"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise TokenInvalid("bad payload") from None
        if expires_at <= issued_at:
            raise TokenInvalid("bad validity window")
        if now >= expires_at:
            raise TokenExpired(f"token expired at {expires_at}")
        return login


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode().rstrip("=")


def _unb64(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


@dataclass
class _Nonce:
    expires_at: float
    redirect_after: str


class AuthService:
    """Login flow driver: state nonces, code exchange, token minting."""

    def __init__(
        self,
        provider: OAuthProvider,
        signer: TokenSigner,
        callback_url: str,
        allow_list: tuple[str, ...] = (),
    ):
        self.provider = provider
        self.signer = signer
        self.callback_url = callback_url
        self.allow_list = tuple(allow_list)
        self._nonces: dict[str, _Nonce] = {}

    def begin_login(self, redirect_after: str = "/") -> tuple[str, str]:
        """Returns (authorize_url, state_nonce); the nonce is single-use."""
        self._expire_nonces()
        nonce = secrets.token_urlsafe(24)
        self._nonces[nonce] = _Nonce(
            expires_at=time.time() + NONCE_LIFETIME_SECONDS,
            redirect_after=redirect_after,
        )
        return self.provider.authorize_url(self.callback_url, nonce), nonce

    async def complete_login(self, code: str, state_nonce: str) -> tuple[Identity, str, str]:
        """Consume the nonce, exchange the code, mint a hub token.

        Returns (identity, token, redirect_after). The nonce is consumed
        before any network call, so a concurrent reuse loses immediately.
        """
        entry = self._nonces.pop(state_nonce, None)
        if entry is None or entry.expires_at < time.time():
            raise BadState("unknown, reused, or expired state nonce")
        access_token = await self.provider.exchange_code(code, self.callback_url)
        identity = await self.provider.fetch_identity(access_token)
        if self.allow_list and identity.login not in self.allow_list:
            raise LoginNotAllowed(f"login {identity.login!r} is not on the allow-list")
        return identity, self.signer.mint(identity.login), entry.redirect_after

    def verify_token(self, raw_token: str, now: float | None = None) -> Identity:
        login = self.signer.verify(raw_token, now)
        return Identity(login=login, provider=self.provider.name, display_name=login)

    def _expire_nonces(self) -> None:
        now = time.time()
        for nonce in [n for n, e in self._nonces.items() if e.expires_at < now]:
            del self._nonces[nonce]
