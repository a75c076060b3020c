"""Run configuration: flat key = value files plus flag overrides.

The format is deliberately plain text: one `key = value` per line, `#`
comments, comma-separated lists, `inf` allowed in caps. Unknown keys are
rejected, and every field is validated against the preconditions of the
module that consumes it before any computation starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError

SPLITS = ("binary", "flow", "gradient")
GRADIENT_MODES = ("finite_difference", "provided")


@dataclass
class RunConfig:
    depth: int = 2
    num_bases: int = 32
    knn: int = 8
    caps: list[float] = field(default_factory=lambda: [math.inf, 5000, 2000])
    opacity_reset: float = 0.5
    lambda_track: float = 1.0
    lambda_arap: float = 0.3
    lambda_acc: float = 0.05
    lambda_vel: float = 0.05
    steps_per_layer: list[int] = field(default_factory=lambda: [4000, 2000, 2000])
    learning_rate: float = 0.02
    seed: int = 0
    split: str = "binary"
    # classification threshold on max displacement; note 3x the noise sigma
    # is far too tight for long sequences (the max over T frames of a noise
    # difference norm grows well past 3 sigma)
    static_eps: float = 0.05
    holdout_stride: int = 5
    gradient_mode: str = "finite_difference"
    fd_epsilon: float = 1e-5
    freeze_chains: bool = False
    child_track_loss: bool = True
    parallel: bool = False

    def validate(self) -> "RunConfig":
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.num_bases < 1:
            raise ConfigError("num_bases must be >= 1")
        if self.knn < 1:
            raise ConfigError("knn must be >= 1")
        if self.knn > self.num_bases:
            raise ConfigError("knn cannot exceed num_bases")
        if len(self.caps) != self.depth + 1:
            raise ConfigError(f"caps needs {self.depth + 1} entries, got {len(self.caps)}")
        for c in self.caps:
            if c != math.inf and (c != int(c) or c < 1):
                raise ConfigError(f"caps entries must be positive integers or inf, got {c}")
        if not 0.0 < self.opacity_reset <= 1.0:
            raise ConfigError("opacity_reset must be in (0, 1]")
        for name in ("lambda_track", "lambda_arap", "lambda_acc", "lambda_vel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if len(self.steps_per_layer) != self.depth + 1:
            raise ConfigError(
                f"steps_per_layer needs {self.depth + 1} entries, got {len(self.steps_per_layer)}")
        if any(s < 0 for s in self.steps_per_layer):
            raise ConfigError("steps_per_layer entries must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.static_eps <= 0:
            raise ConfigError("static_eps must be > 0")
        if self.holdout_stride < 2:
            raise ConfigError("holdout_stride must be >= 2")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.fd_epsilon <= 0:
            raise ConfigError("fd_epsilon must be > 0")
        return self


_BOOL_KEYS = {"freeze_chains", "child_track_loss", "parallel"}
_INT_KEYS = {"depth", "num_bases", "knn", "seed", "holdout_stride"}
_FLOAT_KEYS = {"opacity_reset", "lambda_track", "lambda_arap", "lambda_acc",
               "lambda_vel", "learning_rate", "static_eps", "fd_epsilon"}
_STR_KEYS = {"split", "gradient_mode"}
_INT_LIST_KEYS = {"steps_per_layer"}
_CAP_LIST_KEYS = {"caps"}

ALL_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _INT_LIST_KEYS | _CAP_LIST_KEYS
assert ALL_KEYS == {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _STR_KEYS:
            return raw
        if key in _INT_LIST_KEYS:
            return [int(x.strip()) for x in raw.split(",") if x.strip()]
        if key in _CAP_LIST_KEYS:
            out = []
            for x in raw.split(","):
                x = x.strip()
                if not x:
                    continue
                out.append(math.inf if x.lower() == "inf" else float(int(x)))
            return out
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unknown key {key!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply --key value flag overrides on top of a parsed config."""
    for key, raw in overrides.items():
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    """Round-trippable text form, keys in declaration order."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name in _CAP_LIST_KEYS:
            v = ",".join("inf" if x == math.inf else str(int(x)) for x in v)
        elif f.name in _INT_LIST_KEYS:
            v = ",".join(str(x) for x in v)
        elif f.name in _BOOL_KEYS:
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
