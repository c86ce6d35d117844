"""Service configuration: one YAML file, strict keys, documented defaults.

Unknown keys are rejected rather than ignored so a typo never silently
falls back to a default, and every validation error names the field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .adapters import ADAPTER_ROLES, AdapterConfig
from .control import DEFAULT_ESCALATION_PHRASES, DEFAULT_SENTENCES, DEFAULT_TAU
from .embedding import DEFAULT_DIM
from .gateway import DEFAULT_GATEWAY_PORT, CaptureSchedule

DEFAULT_HTTP_PORT = 8080


class ConfigError(Exception):
    pass


@dataclass
class ServiceConfig:
    data_dir: Path = Path("seesay-data")
    dim: int = DEFAULT_DIM
    tau: float = DEFAULT_TAU
    capture: CaptureSchedule = field(default_factory=CaptureSchedule)
    capture_source_dir: Path | None = None
    adapters: dict[str, AdapterConfig] = field(
        default_factory=lambda: {role: AdapterConfig() for role in ADAPTER_ROLES}
    )
    sentences: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SENTENCES))
    escalation_phrases: tuple[str, ...] = DEFAULT_ESCALATION_PHRASES
    http_port: int = DEFAULT_HTTP_PORT
    gateway_tcp_port: int = DEFAULT_GATEWAY_PORT
    faithful_mode: bool = False
    templates_dir: Path | None = None
    console_dir: Path | None = None

    def to_dict(self) -> dict:
        return {
            "data_dir": str(self.data_dir),
            "dim": self.dim,
            "tau": self.tau,
            "capture": {
                "interval_ms": self.capture.interval_ms,
                "jitter_ms": self.capture.jitter_ms,
            },
            "capture_source_dir": _opt_str(self.capture_source_dir),
            "adapters": {
                role: {
                    "kind": cfg.kind,
                    "endpoint_url": cfg.endpoint_url,
                    "api_key_env": cfg.api_key_env,
                    "timeout_ms": cfg.timeout_ms,
                    "max_retries": cfg.max_retries,
                }
                for role, cfg in self.adapters.items()
            },
            "sentences": dict(self.sentences),
            "escalation_phrases": list(self.escalation_phrases),
            "http_port": self.http_port,
            "gateway_tcp_port": self.gateway_tcp_port,
            "faithful_mode": self.faithful_mode,
            "templates_dir": _opt_str(self.templates_dir),
            "console_dir": _opt_str(self.console_dir),
        }


def _opt_str(value: Path | None) -> str | None:
    return None if value is None else str(value)


_TOP_LEVEL_KEYS = {f.name for f in fields(ServiceConfig)}
_CAPTURE_KEYS = {"interval_ms", "jitter_ms"}
_ADAPTER_KEYS = {"kind", "endpoint_url", "api_key_env", "timeout_ms", "max_retries"}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _reject_unknown(data: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown key(s): {', '.join(unknown)}")


def config_from_dict(data: dict) -> ServiceConfig:
    _require(isinstance(data, dict), "config root must be a mapping")
    _reject_unknown(data, _TOP_LEVEL_KEYS, "config")
    config = ServiceConfig()

    if "data_dir" in data:
        _require(isinstance(data["data_dir"], str) and data["data_dir"],
                 "data_dir: must be a non-empty path string")
        config.data_dir = Path(data["data_dir"])
    if "dim" in data:
        _require(isinstance(data["dim"], int) and data["dim"] >= 1,
                 "dim: must be a positive integer")
        config.dim = data["dim"]
    if "tau" in data:
        _require(isinstance(data["tau"], (int, float)) and -1.0 <= data["tau"] <= 1.0,
                 "tau: must be a number in [-1, 1]")
        config.tau = float(data["tau"])
    if "capture" in data:
        capture = data["capture"]
        _require(isinstance(capture, dict), "capture: must be a mapping")
        _reject_unknown(capture, _CAPTURE_KEYS, "capture")
        interval = capture.get("interval_ms", CaptureSchedule.interval_ms)
        jitter = capture.get("jitter_ms", CaptureSchedule.jitter_ms)
        _require(isinstance(interval, int), "capture.interval_ms: must be an integer")
        _require(isinstance(jitter, int), "capture.jitter_ms: must be an integer")
        try:
            config.capture = CaptureSchedule(interval_ms=interval, jitter_ms=jitter)
        except ValueError as exc:
            raise ConfigError(f"capture: {exc}") from exc
    if data.get("capture_source_dir") is not None:
        _require(isinstance(data["capture_source_dir"], str),
                 "capture_source_dir: must be a path string")
        config.capture_source_dir = Path(data["capture_source_dir"])
    if "adapters" in data:
        adapters = data["adapters"]
        _require(isinstance(adapters, dict), "adapters: must be a mapping")
        _reject_unknown(adapters, set(ADAPTER_ROLES), "adapters")
        for role, raw in adapters.items():
            _require(isinstance(raw, dict), f"adapters.{role}: must be a mapping")
            _reject_unknown(raw, _ADAPTER_KEYS, f"adapters.{role}")
            try:
                config.adapters[role] = AdapterConfig(**raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"adapters.{role}: {exc}") from exc
    if "sentences" in data:
        sentences = data["sentences"]
        _require(isinstance(sentences, dict), "sentences: must be a mapping")
        _reject_unknown(sentences, set(DEFAULT_SENTENCES), "sentences")
        for key, value in sentences.items():
            _require(isinstance(value, str), f"sentences.{key}: must be a string")
        config.sentences.update(sentences)
    if "escalation_phrases" in data:
        phrases = data["escalation_phrases"]
        _require(
            isinstance(phrases, list) and all(isinstance(p, str) and p for p in phrases),
            "escalation_phrases: must be a list of non-empty strings",
        )
        config.escalation_phrases = tuple(phrases)
    for port_key in ("http_port", "gateway_tcp_port"):
        if port_key in data:
            port = data[port_key]
            _require(isinstance(port, int) and 0 <= port <= 65535,
                     f"{port_key}: must be an integer in [0, 65535]")
            setattr(config, port_key, port)
    if "faithful_mode" in data:
        _require(isinstance(data["faithful_mode"], bool), "faithful_mode: must be a boolean")
        config.faithful_mode = data["faithful_mode"]
    for dir_key in ("templates_dir", "console_dir"):
        if data.get(dir_key) is not None:
            _require(isinstance(data[dir_key], str), f"{dir_key}: must be a path string")
            setattr(config, dir_key, Path(data[dir_key]))
    return config


def load_config(path: str | Path) -> ServiceConfig:
    """Parse and validate a YAML config file; an empty file is all defaults."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return config_from_dict(data)


def save_config(config: ServiceConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8"
    )
