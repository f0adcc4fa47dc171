"""Key-value configuration files for the agent and the warehouse server.

One ``key = value`` per line, ``#`` starts a comment. Per-device level-1
metadata uses dotted keys: ``device.<hexid>.type`` and ``device.<hexid>.geo``.
The ``LOGHIVE_CONFIG`` environment variable overrides the config path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .pipeline import DEFAULT_LEARNING_WINDOW, DEFAULT_THETA
from .transport import CryptoParams, parse_endpoint

ENV_VAR = "LOGHIVE_CONFIG"
WILDCARD = "*"


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def resolve_path(path: str | os.PathLike | None) -> Path:
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    if path is None:
        raise ConfigError(f"no config path given and {ENV_VAR} is unset")
    return Path(path)


def _bool(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes", "on")


def _idset(v: str) -> frozenset[str] | None:
    v = v.strip()
    if v in ("", WILDCARD):
        return None
    return frozenset(x.strip().lower() for x in v.split(",") if x.strip())


def _relative_to(base_dir: Path, value: str) -> str:
    """Relative paths in a config file are relative to the file's directory."""
    return value if os.path.isabs(value) else str(base_dir / value)


def _crypto_from(kv: dict[str, str], base: CryptoParams | None = None) -> CryptoParams:
    p = base or CryptoParams(batch_size=32)
    mapping = {
        "ttl_kilobits": "ttl_kilobits",
        "batch_size": "batch_size",
        "sig_proto": "sig_proto",
        "enc_proto": "enc_proto",
        "replay_window": "window",
        "validity_s": "validity_s",
    }
    updates = {attr: int(kv[key]) for key, attr in mapping.items() if key in kv}
    try:
        return replace(p, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class AgentConfig:
    capture_listen: str = "127.0.0.1:7781"
    control_listen: str = "127.0.0.1:7782"
    warehouse_endpoint: str = "127.0.0.1:7790"
    log_filter: frozenset[str] | None = None  # None accepts every device
    crypto: CryptoParams = field(default_factory=lambda: CryptoParams(batch_size=32))
    keyring_path: str = "keyring"
    identity_path: str = "identity"
    ca_cert: str = "ca.pem"
    controllers: frozenset[str] | None = None  # None: any certificate with the controller role
    discovery: str | None = "239.77.76.80:7780"
    theta: float = DEFAULT_THETA
    learning_window: int = DEFAULT_LEARNING_WINDOW
    queue_limit: int = 256
    emit_cbe: bool = True
    devices: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("capture_listen", "control_listen", "warehouse_endpoint"):
            try:
                parse_endpoint(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        a, b = parse_endpoint(self.capture_listen), parse_endpoint(self.control_listen)
        if a == b and a[1] != 0:
            raise ConfigError("capture_listen and control_listen must differ")
        if self.crypto.ttl_kilobits <= 0:
            raise ConfigError("ttl_kilobits must be positive")
        if self.queue_limit < 1:
            raise ConfigError("queue_limit must be positive")

    def accepts(self, device_id: bytes) -> bool:
        return self.log_filter is None or device_id.hex() in self.log_filter

    @classmethod
    def from_kv(cls, kv: dict[str, str], base_dir: Path | None = None) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        args: dict = {}
        devices: dict[str, dict[str, str]] = {}
        for key, value in kv.items():
            if key.startswith("device."):
                _, hexid, attr = key.split(".", 2)
                devices.setdefault(hexid.lower(), {})[attr] = value
            elif key in ("log_filter",):
                args["log_filter"] = _idset(value)
            elif key == "controllers":
                args["controllers"] = _idset(value)
            elif key in ("theta",):
                args["theta"] = float(value)
            elif key in ("learning_window", "queue_limit"):
                args[key] = int(value)
            elif key == "emit_cbe":
                args[key] = _bool(value)
            elif key == "discovery":
                args[key] = None if value.lower() in ("off", "none", "") else value
            elif key in known and key not in ("crypto", "devices"):
                args[key] = value
            elif key in ("ttl_kilobits", "batch_size", "sig_proto", "enc_proto", "replay_window", "validity_s"):
                continue
            else:
                raise ConfigError(f"unknown agent config key {key!r}")
        args["crypto"] = _crypto_from(kv)
        args["devices"] = devices
        if base_dir is not None:
            for k in ("keyring_path", "identity_path", "ca_cert"):
                args[k] = _relative_to(base_dir, args.get(k, _FIELD_DEFAULTS[cls][k]))
        return cls(**args)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "AgentConfig":
        p = resolve_path(path)
        return cls.from_kv(parse_kv(p.read_text()), p.parent)


@dataclass
class WarehouseConfig:
    listen: str = "127.0.0.1:7790"
    store_path: str = "store"
    identity_path: str = "identity"
    keyring_path: str = "keyring"
    ca_cert: str = "ca.pem"
    fsync: bool = True
    crypto: CryptoParams = field(default_factory=lambda: CryptoParams(batch_size=32))

    @classmethod
    def from_kv(cls, kv: dict[str, str], base_dir: Path | None = None) -> "WarehouseConfig":
        args: dict = {}
        for key, value in kv.items():
            if key == "fsync":
                args[key] = _bool(value)
            elif key in ("listen", "store_path", "identity_path", "keyring_path", "ca_cert"):
                args[key] = value
            elif key in ("ttl_kilobits", "batch_size", "sig_proto", "enc_proto", "replay_window", "validity_s"):
                continue
            else:
                raise ConfigError(f"unknown server config key {key!r}")
        args["crypto"] = _crypto_from(kv)
        if base_dir is not None:
            for k in ("store_path", "identity_path", "keyring_path", "ca_cert"):
                args[k] = _relative_to(base_dir, args.get(k, _FIELD_DEFAULTS[cls][k]))
        return cls(**args)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "WarehouseConfig":
        p = resolve_path(path)
        return cls.from_kv(parse_kv(p.read_text()), p.parent)


_FIELD_DEFAULTS = {
    cls: {f.name: f.default for f in fields(cls) if isinstance(f.default, str)}
    for cls in (AgentConfig, WarehouseConfig)
}
