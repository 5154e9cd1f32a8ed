"""Gateway configuration, validated partial updates and layered loading.

Precedence when loading: defaults < JSON config file < ``FIT_*`` environment
variables < explicit overrides (CLI flags). Nested fields are addressed in the
environment as ``FIT_<SECTION>_<FIELD>``, e.g. ``FIT_FRAME_WINDOW_MS=30``.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .dsp import ConfigurationError, FrameConfig, LoudnessParams

ENV_PREFIX = "FIT_"


class ConfigRejected(ValueError):
    """A config or update that would violate an invariant."""


@dataclass(frozen=True)
class GatewayConfig:
    inbox_dir: str = "inbox"
    data_dir: str = "data"
    cloud_url: str = ""
    cloud_token: str = ""
    gateway_id: str = "fit-gateway"
    sync_interval_s: float = 30.0
    poll_interval_ms: int = 1000
    frame: FrameConfig = field(default_factory=FrameConfig)
    loudness: LoudnessParams = field(default_factory=LoudnessParams)
    sync_series: bool = False
    store_series: bool = True
    max_batch: int = 16
    workers: int = 1
    admin_bind: str = "127.0.0.1:8765"

    @property
    def rejects_dir(self) -> Path:
        return Path(self.data_dir) / "rejects"

    @property
    def admin_address(self):
        host, _, port = self.admin_bind.rpartition(":")
        return host or "127.0.0.1", int(port)

    def validate(self) -> None:
        paths = [Path(self.inbox_dir).resolve(), Path(self.data_dir).resolve()]
        if len(set(paths)) != len(paths):
            raise ConfigRejected("inbox_dir and data_dir must be distinct")
        if not self.sync_interval_s > 0:
            raise ConfigRejected("sync_interval_s must be > 0")
        if not self.poll_interval_ms > 0:
            raise ConfigRejected("poll_interval_ms must be > 0")
        if self.max_batch < 1:
            raise ConfigRejected("max_batch must be >= 1")
        if self.workers < 1:
            raise ConfigRejected("workers must be >= 1")
        try:
            self.admin_address
        except ValueError:
            raise ConfigRejected(f"admin_bind {self.admin_bind!r} is not host:port") from None
        try:
            self.frame.validate()
            self.loudness.validate()
        except ConfigurationError as exc:
            raise ConfigRejected(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GatewayConfig":
        return merge_config(cls(), data)


def _coerce(value, like, name):
    if isinstance(like, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigRejected(f"{name}: expected a boolean, got {value!r}")
    if like is None or isinstance(like, str):
        if like is None and value is None:
            return None
        if isinstance(value, (dict, list)):
            raise ConfigRejected(f"{name}: expected a scalar")
        if like is None:
            return float(value)
        return str(value)
    try:
        if isinstance(like, int):
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigRejected(f"{name}: expected a number, got {value!r}") from None


def merge_config(current: GatewayConfig, changes: Mapping[str, Any]) -> GatewayConfig:
    """Return ``current`` with nested partial ``changes`` applied (unvalidated)."""
    return _merge(current, changes, "")


def _merge(obj, changes: Mapping[str, Any], prefix: str):
    if not isinstance(changes, Mapping):
        raise ConfigRejected(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in changes.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigRejected(f"unknown config field {name!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            updates[key] = _merge(current, value, name + ".")
        else:
            updates[key] = _coerce(value, current, name)
    return replace(obj, **updates)


@dataclass(frozen=True)
class ConfigUpdate:
    changes: Mapping[str, Any]
    update_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    received_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))


# bound when the gateway starts; changing them needs a restart
STARTUP_ONLY = frozenset({"inbox_dir", "data_dir", "admin_bind", "workers"})


def apply_config_update(current: GatewayConfig, update: ConfigUpdate) -> GatewayConfig:
    """Merge and validate; raises ConfigRejected and leaves ``current`` untouched."""
    fixed = sorted(k for k in STARTUP_ONLY & set(update.changes) if update.changes[k] != getattr(current, k))
    if fixed:
        raise ConfigRejected(f"cannot change {', '.join(fixed)} at runtime")
    merged = merge_config(current, update.changes)
    merged.validate()
    return merged


class ConfigHandle:
    """Serialized owner of the live config.

    Updates are applied one at a time in arrival order, each validated
    against the state left by the previous one.
    """

    def __init__(self, config: GatewayConfig):
        config.validate()
        self._config = config
        self._lock = threading.Lock()
        self.history: List[dict] = []

    def current(self) -> GatewayConfig:
        return self._config

    def submit(self, update: ConfigUpdate) -> GatewayConfig:
        with self._lock:
            try:
                new = apply_config_update(self._config, update)
            except ConfigRejected as exc:
                self.history.append({"update_id": update.update_id, "accepted": False, "reason": str(exc)})
                raise
            self._config = new
            self.history.append({"update_id": update.update_id, "accepted": True})
            return new


def _flatten(obj, prefix=()):
    for f in fields(obj):
        value = getattr(obj, f.name)
        if hasattr(value, "__dataclass_fields__"):
            yield from _flatten(value, prefix + (f.name,))
        else:
            yield prefix + (f.name,)


def env_overrides(environ: Mapping[str, str], base: GatewayConfig = GatewayConfig()) -> dict:
    out: Dict[str, Any] = {}
    for path in _flatten(base):
        key = ENV_PREFIX + "_".join(path).upper()
        if key in environ:
            node = out
            for part in path[:-1]:
                node = node.setdefault(part, {})
            node[path[-1]] = environ[key]
    return out


def load_config(
    path: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> GatewayConfig:
    cfg = GatewayConfig()
    if path:
        cfg = merge_config(cfg, json.loads(Path(path).read_text()))
    cfg = merge_config(cfg, env_overrides(os.environ if environ is None else environ, cfg))
    if overrides:
        cfg = merge_config(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg
