"""Hub configuration: TOML file, EVERHUB_* environment overrides, CLI flags.

Precedence is flags > environment > file > defaults. The secret key may be
given as a plain string or hex-encoded with a ``hex:`` prefix; it must be
at least 32 bytes.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .runtime import RuntimeEndpoint
from .sessions import QuotaPolicy

__all__ = ["HubConfig", "ConfigError", "load_config"]


class ConfigError(Exception):
    pass


@dataclass
class HubConfig:
    listen_address: str = "127.0.0.1:8000"
    public_base_url: str = "http://127.0.0.1:8000"
    secret_key: bytes = b""
    journal_path: str = "everhub-journal.jsonl"
    workdir: str = "everhub-work"
    byor_enabled: bool = False
    admins: tuple[str, ...] = ()
    allow_list: tuple[str, ...] = ()
    ui_dir: str = ""

    # [quota]
    max_sessions_per_user: int = 2
    max_total_sessions: int = 50
    idle_timeout_seconds: int = 3600

    # [runtime]
    runtime_driver: str = "docker"  # docker | simulated
    runtime_address: str = "/var/run/docker.sock"
    runtime_tls: bool = False
    container_port: int = 8888

    # [auth]
    auth_provider: str = "github"  # github-style oauth2 | static
    client_id: str = ""
    client_secret: str = ""
    authorize_endpoint: str = "https://github.com/login/oauth/authorize"
    token_endpoint: str = "https://github.com/login/oauth/access_token"
    user_endpoint: str = "https://api.github.com/user"
    oauth_scope: str = "read:user"
    static_users: dict[str, str] = field(default_factory=dict)

    # [timeouts]
    fetch_timeout_seconds: float = 120.0
    build_timeout_seconds: float = 900.0
    cull_interval_seconds: float = 30.0

    def __post_init__(self) -> None:
        self.public_base_url = self.public_base_url.rstrip("/")

    def validate(self) -> None:
        if len(self.secret_key) < 32:
            raise ConfigError("secret_key too short (need at least 32 bytes)")
        if ":" not in self.listen_address:
            raise ConfigError(f"listen_address must be host:port, got {self.listen_address!r}")
        journal = Path(self.journal_path)
        try:
            journal.parent.mkdir(parents=True, exist_ok=True)
            with open(journal, "a", encoding="utf-8"):
                pass
        except OSError as exc:
            raise ConfigError(f"journal_path not writable: {exc}") from exc

    @property
    def listen_host(self) -> str:
        return self.listen_address.rsplit(":", 1)[0]

    @property
    def listen_port(self) -> int:
        return int(self.listen_address.rsplit(":", 1)[1])

    def quota_policy(self) -> QuotaPolicy:
        return QuotaPolicy(
            max_sessions_per_user=self.max_sessions_per_user,
            max_total_sessions=self.max_total_sessions,
            idle_timeout_seconds=self.idle_timeout_seconds,
        )

    def default_endpoint(self) -> RuntimeEndpoint:
        return RuntimeEndpoint(
            address=self.runtime_address, tls_enabled=self.runtime_tls, label="shared-cluster"
        )


# (config field, TOML table, TOML key); env name is EVERHUB_<FIELD.upper()>.
_FILE_KEYS = [
    ("listen_address", None, "listen_address"),
    ("public_base_url", None, "public_base_url"),
    ("secret_key", None, "secret_key"),
    ("journal_path", None, "journal_path"),
    ("workdir", None, "workdir"),
    ("byor_enabled", None, "byor_enabled"),
    ("admins", None, "admins"),
    ("allow_list", None, "allow_list"),
    ("ui_dir", None, "ui_dir"),
    ("max_sessions_per_user", "quota", "max_sessions_per_user"),
    ("max_total_sessions", "quota", "max_total_sessions"),
    ("idle_timeout_seconds", "quota", "idle_timeout_seconds"),
    ("runtime_driver", "runtime", "driver"),
    ("runtime_address", "runtime", "address"),
    ("runtime_tls", "runtime", "tls"),
    ("container_port", "runtime", "container_port"),
    ("auth_provider", "auth", "provider"),
    ("client_id", "auth", "client_id"),
    ("client_secret", "auth", "client_secret"),
    ("authorize_endpoint", "auth", "authorize_endpoint"),
    ("token_endpoint", "auth", "token_endpoint"),
    ("user_endpoint", "auth", "user_endpoint"),
    ("oauth_scope", "auth", "scope"),
    ("static_users", "auth", "static_users"),
    ("fetch_timeout_seconds", "timeouts", "fetch_seconds"),
    ("build_timeout_seconds", "timeouts", "build_seconds"),
    ("cull_interval_seconds", "timeouts", "cull_interval_seconds"),
]


def load_config(
    path: str | Path | None = None,
    env: dict[str, str] | None = None,
    overrides: dict[str, Any] | None = None,
) -> HubConfig:
    """Assemble a validated HubConfig from file, environment, and flags."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}

    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file is not valid TOML: {exc}") from exc
        for field_name, table, key in _FILE_KEYS:
            section = doc.get(table, {}) if table else doc
            if key in section:
                values[field_name] = section[key]

    for field_name, _, _ in _FILE_KEYS:
        env_name = f"EVERHUB_{field_name.upper()}"
        if env_name in env:
            values[field_name] = env[env_name]

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    return _coerce(values)


def _coerce(values: dict[str, Any]) -> HubConfig:
    kwargs: dict[str, Any] = {}
    types = {f.name: f.type for f in fields(HubConfig)}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        kwargs[key] = _coerce_one(key, value)
    try:
        return HubConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce_one(key: str, value: Any) -> Any:
    if key == "secret_key":
        return _parse_secret(value)
    if key in ("admins", "allow_list"):
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return tuple(value)
    if key in ("byor_enabled", "runtime_tls"):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if key in ("max_sessions_per_user", "max_total_sessions", "idle_timeout_seconds", "container_port"):
        return int(value)
    if key in ("fetch_timeout_seconds", "build_timeout_seconds", "cull_interval_seconds"):
        return float(value)
    if key == "static_users" and not isinstance(value, dict):
        raise ConfigError("auth.static_users must be a table of code = login")
    return value


def _parse_secret(value: Any) -> bytes:
    if isinstance(value, bytes):
        return value
    text = str(value)
    if text.startswith("hex:"):
        try:
            return bytes.fromhex(text[4:])
        except ValueError as exc:
            raise ConfigError(f"secret_key hex value is invalid: {exc}") from exc
    return text.encode()
