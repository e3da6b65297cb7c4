"""Engine configuration: a flat ``key = value`` file with command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import DataError, ParseError
from .kvfile import parse_kv
from .learning import DEFAULT_FIT_WINDOW, MIN_TRAINING_DAYS, SGDConfig
from .monitoring import MonitorConfig


@dataclass(frozen=True)
class EngineConfig:
    tau: float | None = None
    h_mon: int = 6
    b_leak: int = 36
    hour_fraction: float = 0.5
    default_threshold: float = 10.0
    fit_mode: str = "closed_form"
    fit_window: int = DEFAULT_FIT_WINDOW
    min_training_days: int = MIN_TRAINING_DAYS
    sgd_learning_rate: float = 1e-3
    sgd_batch_size: int = 256
    sgd_max_epochs: int = 200
    sgd_tol: float = 1e-6
    seed: int = 0
    weather_max_fill_hours: int = 3
    store_root: str | None = None

    def __post_init__(self):
        positive = ("h_mon", "b_leak", "hour_fraction", "default_threshold", "fit_window",
                    "sgd_learning_rate", "sgd_batch_size", "sgd_max_epochs", "sgd_tol")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.hour_fraction > 1:
            raise ValueError("hour_fraction must not exceed 1")
        if self.fit_mode not in ("closed_form", "sgd"):
            raise ValueError(f"fit_mode must be closed_form or sgd, got {self.fit_mode!r}")
        if self.min_training_days < 0 or self.weather_max_fill_hours < 0:
            raise ValueError("day and hour counts must be non-negative")

    @property
    def monitor(self) -> MonitorConfig:
        return MonitorConfig(self.h_mon, self.b_leak, self.hour_fraction)

    @property
    def sgd(self) -> SGDConfig:
        return SGDConfig(
            self.sgd_learning_rate, self.sgd_batch_size, self.sgd_max_epochs, self.sgd_tol, seed=self.seed
        )

    def override(self, **values) -> EngineConfig:
        """Replace fields with every non-``None`` keyword; flags win over the file."""
        return replace(self, **{k: v for k, v in values.items() if v is not None})


_TYPES = {f.name: f.type for f in fields(EngineConfig)}


def _coerce(name: str, text: str):
    kind = _TYPES[name]
    if name == "store_root":
        return text
    if name == "fit_mode":
        return text
    if "int" in kind:
        return int(text)
    return float(text)


def config_from_text(text: str) -> EngineConfig:
    kv = parse_kv(text)
    unknown = sorted(set(kv) - set(_TYPES))
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return EngineConfig(**{k: _coerce(k, v) for k, v in kv.items()})
    except ValueError as exc:
        raise ParseError(f"invalid config: {exc}") from None


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    if not Path(path).is_file():
        raise DataError(f"config file {path} does not exist")
    return config_from_text(Path(path).read_text(encoding="utf-8"))
