"""Engine and harness knobs, loadable from flat YAML/JSON files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .errors import BadConfig


@dataclass(frozen=True)
class SwiftConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0
    max_new_tokens: int = 64
    epsilon: float = 0.3
    max_draft: int = 25
    gamma: int = 32
    max_opt_steps: int = 1000
    bayes_interval: int = 25
    patience: int = 300
    score_target: float = 0.95
    skip_ratio: float = 0.45
    alpha_tolerance: float = 0.7
    optimize: bool = True
    # diagnostic: draft with the full model (every draft is accepted)
    zero_mask: bool = False

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise BadConfig(f"mode must be 'greedy' or 'sample', got {self.mode!r}")
        if not self.temperature > 0:
            raise BadConfig("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise BadConfig("top_p must lie in (0, 1]")
        if not 0 <= self.epsilon < 1:
            raise BadConfig("epsilon must lie in [0, 1)")
        if not 0 < self.skip_ratio < 1:
            raise BadConfig("skip_ratio must lie in (0, 1)")
        for name in ("max_new_tokens", "max_draft", "gamma", "max_opt_steps", "bayes_interval", "patience"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be >= 1")

    @property
    def sample(self) -> bool:
        return self.mode == "sample"

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> SwiftConfig:
        known = {f.name for f in fields(self)}
        unknown = set(changes) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return replace(self, **changes)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None


def _coerce(cfg: SwiftConfig, raw: dict) -> dict:
    types = {f.name: f.type for f in fields(cfg)}
    out = {}
    for key, value in raw.items():
        key = key.replace("-", "_")
        if key not in types:
            raise BadConfig(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                out[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            elif kind == "int":
                out[key] = int(value)
            elif kind == "float":
                out[key] = float(value)
            else:
                out[key] = str(value)
        except (TypeError, ValueError):
            raise BadConfig(f"bad value for {key}: {value!r}") from None
    return out


def load_config(path=None, base: SwiftConfig | None = None, **overrides) -> SwiftConfig:
    """Defaults < config file (flat keys) < explicit overrides."""
    cfg = base or SwiftConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise BadConfig(f"cannot read config {path}: {exc}") from None
        try:
            raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise BadConfig(f"cannot parse config {path}: {exc}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise BadConfig("config file must hold a flat mapping")
        cfg = cfg.updated(**_coerce(cfg, raw))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.updated(**_coerce(cfg, overrides)) if overrides else cfg
