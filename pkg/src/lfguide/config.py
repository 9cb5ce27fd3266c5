"""Run configuration: TOML file plus flat command-line overrides."""
from __future__ import annotations

import dataclasses
import difflib
import os
from dataclasses import dataclass, field, fields

import tomli

from .core import InvalidArgument

MODES = ("render", "bake", "train-r", "train-q", "fit-implicit", "compare", "eval", "dataset-gen")
ESTIMATORS = ("heuristic", "learned", "none")


class ConfigError(InvalidArgument):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass
class RunConfig:
    mode: str = "render"
    scene: str = ""
    width: int = 0  # 0 keeps the scene camera's resolution
    height: int = 0
    block_size: int = 16
    init_depth: int = 2
    max_depth: int = 5
    budget: int = 4096
    estimator: str = "heuristic"
    alpha: float = 0.5
    eps_floor: float = 0.1
    spp: int = 16
    seed: int = 0
    max_trace_depth: int = 5
    batch_k: int = 1
    gt_spp: int = 64
    reference_spp: int = 1024
    reference: str = ""
    image: str = ""
    r_checkpoint: str = ""
    q_checkpoint: str = ""
    implicit_checkpoint: str = ""
    output_dir: str = "out"
    threads: int = 1
    dataset_dir: str = ""
    templates: list = field(default_factory=lambda: ["cornell", "small_light"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    spp_levels: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    resolutions: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    resolution: int = 16
    epochs: int = 40
    episodes: int = 40
    q_steps: int = 60
    q_budget: int = 5000
    implicit_epochs: int = 300
    thresholds: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


REQUIRED = {
    "render": ("scene",),
    "bake": ("scene",),
    "train-r": ("dataset_dir",),
    "train-q": ("r_checkpoint",),
    "fit-implicit": ("scene",),
    "compare": ("scene",),
    "eval": ("scene",),
    "dataset-gen": ("dataset_dir",),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _suggest(key):
    m = difflib.get_close_matches(key, list(_FIELDS), n=1, cutoff=0.6)
    return f"; did you mean {m[0]!r}?" if m else ""


def _coerce(name, value):
    default = getattr(RunConfig(), name)
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            typ = type(default[0]) if default else str
            return [typ(v) for v in value]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ValueError
            return {str(k): float(v) for k, v in value.items()}
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {name!r}: cannot use value {value!r}") from None


def parse_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Read ``path`` (TOML), apply ``overrides`` and the ``LFGUIDE_SEED``
    environment variable, and validate. Unknown keys are rejected."""
    raw = {}
    if path:
        try:
            with open(path, "rb") as f:
                raw = tomli.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
    raw = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    env = os.environ if env is None else env
    if env.get("LFGUIDE_SEED"):
        raw["seed"] = env["LFGUIDE_SEED"]
    vals = {}
    for k, v in raw.items():
        key = k.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}{_suggest(key)}")
        vals[key] = _coerce(key, v)
    cfg = RunConfig(**vals)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.mode not in MODES:
        raise ConfigError(f"field 'mode': unknown mode {cfg.mode!r}")
    for name in REQUIRED[cfg.mode]:
        if not getattr(cfg, name):
            raise ConfigError(f"missing required field {name!r} for mode {cfg.mode}")
    if cfg.estimator not in ESTIMATORS:
        raise ConfigError(f"field 'estimator': expected one of {ESTIMATORS}")
    if cfg.estimator == "learned" and cfg.mode in ("render", "eval") and not (cfg.r_checkpoint and cfg.q_checkpoint):
        raise ConfigError("estimator 'learned' needs r_checkpoint and q_checkpoint (run train-r, then train-q)")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError("field 'alpha' must lie in [0, 1]")
    if not 0.0 < cfg.eps_floor <= 1.0:
        raise ConfigError("field 'eps_floor' must lie in (0, 1]")
    for name in ("block_size", "spp", "gt_spp", "reference_spp", "threads", "max_trace_depth", "batch_k"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"field {name!r} must be >= 1")
    if cfg.budget < 0:
        raise ConfigError("field 'budget' must be >= 0")
    if not 1 <= cfg.init_depth <= cfg.max_depth:
        raise ConfigError("need 1 <= init_depth <= max_depth")
    for r in cfg.resolutions + [cfg.resolution]:
        if r < 2 or r & (r - 1):
            raise ConfigError(f"resolution {r} is not a power of two >= 2")
    return cfg
