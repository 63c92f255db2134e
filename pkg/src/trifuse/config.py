"""Run configuration: named profiles plus a key=value config text format.

A config file is plain text, one `key = value` per line, `#` comments
allowed. Keys are the TrainConfig field names; `widths` is a comma list.
The raw text of a loaded file is echoed verbatim into checkpoints and run
summaries so a result can always be traced back to its exact inputs.

Profiles:
  toy   small everything; overfits a handful of samples on a CPU in minutes.
  full  production-scale settings (T=4000, batch 32, 800k steps); kept as a
        named profile for completeness, far beyond desk-scale budgets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


@dataclass(frozen=True)
class TrainConfig:
    profile: str = "toy"
    scale: int = 4
    T: int = 50
    beta_start: float = 0.015
    beta_end: float = 0.3
    lambda1: float = 0.5
    lambda2: float = 0.5
    psf_enabled: bool = True
    tmfa_enabled: bool = True
    reduction: int = 16
    lr: float = 1e-4
    batch_size: int = 8
    total_steps: int = 2000
    seed: int = 0
    widths: tuple = (8, 16, 16, 16)
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> "TrainConfig":
        if self.scale not in (2, 4, 8):
            raise ConfigError(f"scale must be one of 2, 4, 8; got {self.scale}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got [{self.beta_start}, {self.beta_end}]"
            )
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if len(self.widths) != 4 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be 4 positive integers, got {self.widths}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return self

    def to_fields(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d


PROFILES = {
    "toy": TrainConfig(),
    "full": TrainConfig(
        profile="full",
        scale=4,
        T=4000,
        beta_start=1e-6,
        beta_end=1e-2,
        lr=1e-4,
        batch_size=32,
        total_steps=800_000,
        widths=(16, 32, 64, 64),
    ),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if name == "widths":
            return tuple(int(part) for part in raw.split(","))
        if isinstance(current, bool):
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name}={raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """key=value lines to a raw {name: string} mapping; unknown keys rejected."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def resolve_config(profile: str = "toy", config_text: str | None = None,
                   overrides: dict | None = None) -> TrainConfig:
    """Profile defaults, then config-file values, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; have {sorted(PROFILES)}")
    cfg = dataclasses.replace(PROFILES[profile], profile=profile)
    if config_text is not None:
        for key, raw in parse_config_text(config_text).items():
            cfg = dataclasses.replace(cfg, **{key: _parse_value(key, raw, getattr(cfg, key))})
    for key, value in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, getattr(cfg, key))
        if key == "widths":
            value = tuple(int(w) for w in value)
        cfg = dataclasses.replace(cfg, **{key: value})
    return cfg.validate()


def render_config(cfg: TrainConfig) -> str:
    """Canonical key=value rendering of a resolved configuration."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "widths":
            v = ",".join(str(int(w)) for w in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
