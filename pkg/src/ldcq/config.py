"""Experiment configuration: typed stage sections, env presets, text round-trip.

The on-disk format is one ``stage.key = value`` pair per line, values in JSON
(bare words are read as strings). ``#`` starts a comment.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .diffusion import GuidanceSpec, PriorTrainConfig
from .errors import ConfigError
from .planner import PlanSpec, WorldModelConfig
from .qlearning import LdcqConfig
from .vae import VaeConfig


@dataclass
class DataConfig:
    episodes: int = 100
    stride: int = 1
    # train the VAE and priors on windows cut short by the episode end too;
    # otherwise states just before a terminal have no skills to sample
    partial_snippets: bool = True


@dataclass
class QStageConfig:
    method: str = "ldcq"          # ldcq | bcq
    bank: bool = True              # precompute candidates per transition
    params: LdcqConfig = field(default_factory=LdcqConfig)


@dataclass
class EvalConfig:
    mode: str = "ldcq"            # ldcq | bcq | ldgc | ldcp | behavior
    episodes: int = 100
    seed: int | None = None        # None: derived from the top-level seed
    n_candidates: int = 16
    horizon: int | None = None
    noise_scale: float = 0.0
    goal_pairs_seed: int = 7
    goal_min_path: int = 4


@dataclass
class ExperimentConfig:
    env: str = "rw1d"
    H: int = 1
    seed: int = 0
    dtype: str = "float64"
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    prior: PriorTrainConfig = field(default_factory=PriorTrainConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    q: QStageConfig = field(default_factory=QStageConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    plan: PlanSpec = field(default_factory=PlanSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError("H must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")
        if self.q.method not in ("ldcq", "bcq"):
            raise ConfigError(f"unknown q method {self.q.method!r}")
        if self.eval.mode not in ("ldcq", "bcq", "ldgc", "ldcp", "behavior"):
            raise ConfigError(f"unknown eval mode {self.eval.mode!r}")

    # flat key/value view -------------------------------------------------------
    def flat(self) -> dict:
        return _flatten(self)

    def set(self, key: str, value) -> None:
        parts = key.split(".")
        obj = self
        for p in parts[:-1]:
            if not hasattr(obj, p) or not is_dataclass(getattr(obj, p)):
                raise ConfigError(f"unknown config section in {key!r}")
            obj = getattr(obj, p)
        if parts[-1] not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, parts[-1], value)

    def updated(self, overrides: dict) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        for k, v in overrides.items():
            cfg.set(k, v)
        return _revalidate(cfg)

    def dumps(self) -> str:
        lines = [f"{k} = {json.dumps(v)}" for k, v in self.flat().items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def to_dict(self) -> dict:
        return asdict(self)


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out.update(_flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out


def _revalidate(cfg):
    """Re-run every ``__post_init__`` so overrides are checked like constructor args."""
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            _revalidate(v)
    if hasattr(cfg, "__post_init__"):
        cfg.__post_init__()
    return cfg


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


# presets ------------------------------------------------------------------------

# Desk-scale settings per environment. Learning rates are raised and epoch
# counts lowered relative to the large-scale table values so that each
# pipeline fits a CPU budget of minutes.
PRESETS: dict[str, dict] = {
    "rw1d": {
        "H": 1, "dtype": "float32",
        "data.episodes": 100,
        "vae.lr": 1e-3, "vae.batch_size": 256, "vae.epochs": 30,
        "prior.lr": 1e-3, "prior.batch_size": 256, "prior.epochs": 30,
        "q.params.iterations": 10000,
        "eval.episodes": 100,
    },
    "trimodal": {
        "H": 20, "dtype": "float32",
        "data.episodes": 300, "data.stride": 2,
        "vae.lr": 1e-3, "vae.batch_size": 128, "vae.epochs": 30,
        "prior.lr": 1e-3, "prior.batch_size": 256, "prior.epochs": 300,
        "q.params.iterations": 3000,
        "eval.episodes": 100,
    },
    "gridmaze-tee": {
        "H": 10, "dtype": "float32",
        "data.episodes": 300, "data.stride": 2,
        "vae.lr": 1e-3, "vae.batch_size": 128, "vae.epochs": 30,
        # planning exploits off-manifold prior samples, so the prior trains longer
        "prior.lr": 1e-3, "prior.batch_size": 256, "prior.epochs": 300,
        "wm.epochs": 60,
        "eval.mode": "ldcp", "eval.episodes": 100, "eval.horizon": 100,
        "plan.n": 8, "plan.depth": 2,
    },
}
PRESETS["gridmaze-u"] = dict(PRESETS["gridmaze-tee"])

# Large-scale table values (hours of GPU time at the original scale).
PAPER_SCALE = {
    "vae.lr": 5e-5, "vae.batch_size": 128, "vae.epochs": 100, "vae.hidden": 256,
    "vae.latent_dim": 16, "vae.beta": 0.05,
    "prior.lr": 1e-4, "prior.batch_size": 32, "prior.epochs": 300, "prior.T": 500,
    "q.params.lr": 5e-4, "q.params.batch_size": 128, "q.params.gamma": 0.995,
    "q.params.rho": 0.995, "q.params.per_alpha": 0.7, "q.params.n_candidates": 500,
    "dtype": "float64",
}


def build_config(env: str = "rw1d", overrides: dict | None = None,
                 paper_scale: bool = False) -> ExperimentConfig:
    """Defaults, then the env preset (or the large-scale values), then ``overrides``."""
    cfg = ExperimentConfig(env=env)
    preset = dict(PRESETS.get(env, {}))
    if paper_scale:
        preset = {k: v for k, v in preset.items() if k.split(".")[0] in ("H", "data", "eval", "plan")}
        preset.update(PAPER_SCALE)
    return cfg.updated({**preset, **(overrides or {})})


def load_config(path=None, overrides: dict | None = None, paper_scale: bool = False) -> ExperimentConfig:
    """Read a key/value file; its ``env`` key picks the preset the rest is laid over."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    env = values.pop("env", "rw1d")
    return build_config(env, values, paper_scale)


# seeds ----------------------------------------------------------------------------

STAGES = ("gen-data", "train-vae", "encode", "train-prior", "train-q", "train-wm", "eval")


def stage_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed for ``stage`` derived from the top-level seed."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    sq = np.random.SeedSequence([seed, STAGES.index(stage)])
    return int(sq.generate_state(1)[0])
