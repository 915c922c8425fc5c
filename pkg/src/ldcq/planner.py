"""Skill-level world model and depth-limited planning over prior samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import DTYPES
from .errors import ConfigError
from .nn import Dense, NetworkSpec, Trainer, make_generator
from .replay import SkillTransitions


class WorldModel(nn.Module):
    """Deterministic predictor of ``s_{t+H}`` from ``(s_t, z)``, as a residual on ``s_t``."""

    def __init__(self, state_dim: int, latent_dim: int, hidden=(128, 128), seed: int = 0,
                 dtype: str = "float64"):
        super().__init__()
        self.hparams = dict(state_dim=state_dim, latent_dim=latent_dim, hidden=list(hidden),
                            seed=seed, dtype=dtype)
        self._dtype = DTYPES[dtype]
        self.state_dim = state_dim
        self.net = Dense(NetworkSpec.mlp(state_dim + latent_dim, hidden, state_dim, "relu"),
                         seed, self._dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def forward(self, s, z) -> torch.Tensor:
        s = torch.as_tensor(s, dtype=self._dtype)
        z = torch.as_tensor(z, dtype=self._dtype)
        if s.dim() < z.dim():
            s = s.unsqueeze(-2).expand(*z.shape[:-1], s.shape[-1])
        return s + self.net(torch.cat([s, z], dim=-1))


@dataclass
class WorldModelConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 40
    hidden: list = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = [128, 128]


@dataclass
class WorldModelFit:
    model: WorldModel
    train_curve: list[float]
    val_mse: float
    val_target_var: float
    val_median_error: float


def train_world_model(data: SkillTransitions, config: WorldModelConfig, seed: int = 0,
                      dtype: str = "float64", H: int | None = None, log=None) -> WorldModelFit:
    """Least-squares fit on full-horizon transitions with a held-out split."""
    keep = np.ones(len(data), bool) if H is None else data.steps_valid == H
    data = data.take(np.flatnonzero(keep))
    if len(data) < 2:
        raise ConfigError("not enough transitions to fit a world model")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_val = max(1, int(round(config.val_fraction * len(data))))
    val, tr = data.take(perm[:n_val]), data.take(perm[n_val:])
    wm = WorldModel(data.states.shape[1], data.latents.shape[1], config.hidden, seed, dtype)
    S = torch.as_tensor(tr.states, dtype=wm.dtype)
    Z = torch.as_tensor(tr.latents, dtype=wm.dtype)
    Y = torch.as_tensor(tr.next_states, dtype=wm.dtype)
    trainer = Trainer(wm, config.lr)
    g = make_generator(seed)
    curve = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(S), generator=g)
        losses = []
        for i in range(0, len(S), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = ((wm(S[idx], Z[idx]) - Y[idx]) ** 2).sum(-1).mean()
            losses.append(trainer.step(loss))
        curve.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, curve[-1])
    wm.eval()
    with torch.no_grad():
        pred = wm(val.states, val.latents).numpy()
    err = ((pred - val.next_states) ** 2).sum(-1)
    target_var = float(((val.next_states - val.next_states.mean(0)) ** 2).sum(-1).mean())
    return WorldModelFit(wm, curve, float(err.mean()), target_var, float(np.median(np.sqrt(err))))


def euclidean_goal_cost(s, goal, pos_dims: int | None = None):
    """Distance from the position part of ``s`` (first ``pos_dims`` entries) to ``goal``."""
    goal = torch.as_tensor(goal)
    s = torch.as_tensor(s, dtype=goal.dtype if goal.is_floating_point() else torch.float64)
    k = pos_dims or goal.shape[-1]
    return (s[..., :k] - goal.to(s.dtype)).norm(dim=-1)


COSTS = {"euclidean": euclidean_goal_cost}


@dataclass
class PlanSpec:
    n: int = 8
    depth: int = 2
    cost: str = "euclidean"

    def __post_init__(self):
        if self.n < 1 or self.depth < 1:
            raise ConfigError("n and depth must be >= 1")
        if self.cost not in COSTS:
            raise ConfigError(f"unknown cost function {self.cost!r}")

    @property
    def node_count(self) -> int:
        return sum(self.n ** k for k in range(1, self.depth + 1))


class Planner:
    """Expands ``n`` prior samples per node for ``depth`` levels and returns the
    first-level latent above the cheapest leaf (lowest index on ties).

    Works on a batch of root states at once. ``model_calls`` counts world-model
    evaluations per root over the planner's lifetime.
    """

    def __init__(self, world_model: WorldModel, candidates, spec: PlanSpec):
        self.wm, self.candidates, self.spec = world_model, candidates, spec
        self.model_calls = 0
        self.last_leaves = None

    @torch.no_grad()
    def plan_batch(self, states, goals, generator) -> torch.Tensor:
        dt = self.wm.dtype
        s = torch.as_tensor(states, dtype=dt)
        E, n = s.shape[0], self.spec.n
        z1 = self.candidates(s, n, generator).to(dt)            # (E, n, dz)
        out = self.wm(s, z1)                                      # (E, n, ds)
        calls = n
        for _ in range(self.spec.depth - 1):
            m = out.shape[1]
            flat = out.reshape(E * m, -1)
            z = self.candidates(flat, n, generator).to(dt)       # (E*m, n, dz)
            out = self.wm(flat, z).reshape(E, m * n, -1)
            calls += m * n
        self.model_calls += calls
        cost = COSTS[self.spec.cost](out, torch.as_tensor(goals, dtype=dt).unsqueeze(1))
        leaf = cost.argmin(dim=-1)
        root = leaf // (n ** (self.spec.depth - 1))
        self.last_leaves = out
        return z1[torch.arange(E), root]

    def __call__(self, states, goals, generator) -> torch.Tensor:
        return self.plan_batch(states, goals, generator)


def plan(world_model: WorldModel, candidates, s, goal, spec: PlanSpec,
         generator: torch.Generator) -> tuple[torch.Tensor, int]:
    """Plan from one state; returns the chosen latent and the model-call count."""
    p = Planner(world_model, candidates, spec)
    z = p.plan_batch(np.asarray(s, dtype=np.float64)[None], np.asarray(goal, dtype=np.float64)[None],
                     generator)
    return z[0], p.model_calls


@torch.no_grad()
def predict_outcomes(world_model: WorldModel, candidates, s, n: int,
                     generator: torch.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` prior latents at ``s`` and the world model's predicted ``s_{t+H}`` for each."""
    s_t = torch.as_tensor(np.asarray(s, dtype=np.float64)[None], dtype=world_model.dtype)
    z = candidates(s_t, n, generator)[0].to(world_model.dtype)
    return z.numpy(), world_model(s_t[0], z).numpy()
