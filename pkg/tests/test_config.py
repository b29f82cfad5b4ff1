"""Configuration loading and precedence: flags > env > file > defaults."""

from __future__ import annotations

import pytest

from everhub.config import ConfigError, HubConfig, load_config


def test_defaults():
    config = load_config()
    assert config.listen_address == "127.0.0.1:8000"
    assert config.max_sessions_per_user == 2
    assert config.max_total_sessions == 50
    assert config.idle_timeout_seconds == 3600
    assert config.runtime_driver == "docker"
    assert config.runtime_address == "/var/run/docker.sock"
    assert config.fetch_timeout_seconds == 120.0
    assert config.build_timeout_seconds == 900.0
    assert not config.byor_enabled


def test_file_values(tmp_path):
    path = tmp_path / "hub.toml"
    path.write_text(
        """
listen_address = "0.0.0.0:9000"
public_base_url = "https://hub.example.org/"
secret_key = "hex:00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff"
byor_enabled = true
admins = ["root"]

[quota]
max_sessions_per_user = 5
idle_timeout_seconds = 120

[runtime]
driver = "simulated"
address = "tcp-host:2375"

[auth]
provider = "static"
static_users = { "code-1" = "alice" }

[timeouts]
build_seconds = 60
"""
    )
    config = load_config(path)
    assert config.listen_address == "0.0.0.0:9000"
    assert config.public_base_url == "https://hub.example.org"  # trailing slash dropped
    assert config.secret_key == bytes.fromhex("00112233445566778899aabbccddeeff" * 2)
    assert config.byor_enabled is True
    assert config.admins == ("root",)
    assert config.max_sessions_per_user == 5
    assert config.idle_timeout_seconds == 120
    assert config.runtime_driver == "simulated"
    assert config.runtime_address == "tcp-host:2375"
    assert config.static_users == {"code-1": "alice"}
    assert config.build_timeout_seconds == 60.0


def test_env_overrides_file(tmp_path):
    path = tmp_path / "hub.toml"
    path.write_text('listen_address = "127.0.0.1:1111"\n[quota]\nmax_sessions_per_user = 5\n')
    config = load_config(
        path,
        env={
            "EVERHUB_LISTEN_ADDRESS": "127.0.0.1:2222",
            "EVERHUB_MAX_SESSIONS_PER_USER": "7",
            "EVERHUB_BYOR_ENABLED": "true",
        },
    )
    assert config.listen_address == "127.0.0.1:2222"
    assert config.max_sessions_per_user == 7
    assert config.byor_enabled is True


def test_flags_override_env_and_file(tmp_path):
    path = tmp_path / "hub.toml"
    path.write_text('listen_address = "127.0.0.1:1111"\n')
    config = load_config(
        path,
        env={"EVERHUB_LISTEN_ADDRESS": "127.0.0.1:2222"},
        overrides={"listen_address": "127.0.0.1:3333", "secret_key": None},
    )
    assert config.listen_address == "127.0.0.1:3333"


def test_secret_key_plain_string():
    config = load_config(env={"EVERHUB_SECRET_KEY": "s" * 40})
    assert config.secret_key == b"s" * 40


def test_validate_rejects_short_secret(tmp_path):
    config = HubConfig(secret_key=b"12345678", journal_path=str(tmp_path / "j.jsonl"))
    with pytest.raises(ConfigError, match="secret_key too short"):
        config.validate()


def test_validate_rejects_bad_listen_address(tmp_path):
    config = HubConfig(
        secret_key=b"x" * 32, listen_address="nohostport", journal_path=str(tmp_path / "j.jsonl")
    )
    with pytest.raises(ConfigError, match="listen_address"):
        config.validate()


def test_validate_rejects_unwritable_journal(tmp_path):
    blocked = tmp_path / "blocked"
    blocked.write_text("a file, not a directory")
    config = HubConfig(secret_key=b"x" * 32, journal_path=str(blocked / "j.jsonl"))
    with pytest.raises(ConfigError, match="journal"):
        config.validate()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(overrides={"no_such_option": 1})


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.toml")


def test_invalid_toml_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("]]] not toml")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(path)


def test_listen_helpers():
    config = HubConfig(listen_address="0.0.0.0:8123")
    assert config.listen_host == "0.0.0.0"
    assert config.listen_port == 8123
