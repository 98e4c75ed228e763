"""Model and experiment configuration, read from flat ``section.key = value`` files."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .path_sim import DriftSpec


@dataclass(frozen=True)
class ModelConfig:
    h: float = 1.0
    tau: float = 2.0
    steps_per_block: int = 2048
    drift_family: str = "zero"
    M: float = 0.0
    prior_mean: float = 0.0
    prior_std: float = 1.0
    grid_size: int = 400
    padding: float = 4.0
    mc_bridges: int = 200_000
    C: float = 1.0
    C1prime: float = 1.0

    def __post_init__(self):
        if self.h <= 0 or self.tau <= 0:
            raise ValueError("h and tau must be positive")
        if self.steps_per_block < 100:
            raise ValueError("need at least 100 Euler steps per block")
        if self.prior_std <= 0:
            raise ValueError("prior_std must be positive")

    @property
    def dt(self) -> float:
        return self.tau / self.steps_per_block

    @property
    def theta(self) -> float:
        return self.h * self.tau

    @property
    def drift(self) -> DriftSpec:
        fam = self.drift_family if self.M > 0 else "zero"
        return DriftSpec(fam, self.M if fam != "zero" else 0.0)

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.prior_mean + self.prior_std * rng.standard_normal(n)

    def prior_logpdf(self, x, mean=None, std=None) -> np.ndarray:
        mean = self.prior_mean if mean is None else mean
        std = self.prior_std if std is None else std
        z = (np.asarray(x, dtype=float) - mean) / std
        return -0.5 * z * z - np.log(std * np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    delta: float = 3.0
    iota: float = 0.75
    L: float = 0.0
    nu: float = 1.0
    delta_sweep: tuple = (2.0, 3.0, 4.0, 5.0)
    blocks: int = 10
    seeds: tuple = (0,)
    particles: int = 100_000
    alt_prior_mean: float = 2.0
    alt_prior_std: float = 1.5
    burn_in: int = 10
    force: bool = False


# key in the flat file -> (target, attribute, parser)
def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(";", ",").split(",") if v.strip())


def _seeds(s: str) -> tuple:
    s = s.strip()
    if ".." in s:
        lo, hi = s.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in s.replace(";", ",").split(",") if v.strip())


def _bool(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


KEYS = {
    "model.h": ("model", "h", float),
    "model.tau": ("model", "tau", float),
    "model.steps_per_block": ("model", "steps_per_block", int),
    "model.drift": ("model", "drift_family", str),
    "model.M": ("model", "M", float),
    "prior.mean": ("model", "prior_mean", float),
    "prior.std": ("model", "prior_std", float),
    "grid.size": ("model", "grid_size", int),
    "grid.padding": ("model", "padding", float),
    "mc.bridges": ("model", "mc_bridges", int),
    "constants.C": ("model", "C", float),
    "constants.C1prime": ("model", "C1prime", float),
    "truncation.delta": ("exp", "delta", float),
    "truncation.iota": ("exp", "iota", float),
    "truncation.L": ("exp", "L", float),
    "truncation.nu": ("exp", "nu", float),
    "truncation.sweep": ("exp", "delta_sweep", _floats),
    "run.blocks": ("exp", "blocks", int),
    "run.seeds": ("exp", "seeds", _seeds),
    "run.particles": ("exp", "particles", int),
    "run.burn_in": ("exp", "burn_in", int),
    "run.force": ("exp", "force", _bool),
    "prior2.mean": ("exp", "alt_prior_mean", float),
    "prior2.std": ("exp", "alt_prior_std", float),
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> ExperimentConfig:
    model_kw: dict[str, Any] = {}
    exp_kw: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        target, attr, parse = KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        (model_kw if target == "model" else exp_kw)[attr] = parsed
    try:
        model = ModelConfig(**model_kw)
        cfg = ExperimentConfig(model=model, **exp_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if list(cfg.delta_sweep) != sorted(cfg.delta_sweep):
        raise ConfigError("truncation.sweep must be increasing")
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def render_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, in the input format."""
    lines = []
    for key, (target, attr, _) in KEYS.items():
        obj = cfg.model if target == "model" else cfg
        val = getattr(obj, attr)
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        lines.append(f"{key} = {val}")
    m = cfg.model
    lines.append(f"# derived: theta = {m.theta!r}, dt = {m.dt!r}")
    return "\n".join(lines) + "\n"


def with_model(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, **kw))
