"""Skill selection and evaluation rollouts.

Rollouts run all evaluation episodes in lockstep: every ``H`` steps each
live episode picks a new skill, and the decoder turns (state, skill) into one
action per step until the episode ends or the horizon is exhausted.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import DiffusionSchedule, Denoiser, GuidanceSpec, ddpm_sample
from .errors import ConfigError, ShapeError
from .nn import make_generator
from .qlearning import QNet
from .vae import SkillVAE


@dataclass
class EvalReport:
    mode: str
    env: str
    returns: list[float]
    successes: list[bool]
    steps: list[int]
    selections: list[int]
    wall_clock: float = 0.0
    convention: str = "raw undiscounted return; success = episode terminated before the horizon"
    extra: dict = field(default_factory=dict)

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def stderr(self) -> float:
        n = len(self.returns)
        return float(np.std(self.returns, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes))

    def summary(self) -> dict:
        return {"mode": self.mode, "env": self.env, "episodes": self.episodes,
                "mean_return": self.mean_return, "stderr": self.stderr,
                "success_rate": self.success_rate, "mean_steps": float(np.mean(self.steps)),
                "convention": self.convention}

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            del d["wall_clock"]
        d["summary"] = self.summary()
        return d

    def save(self, path) -> Path:
        """JSON (or CSV by suffix). Wall-clock time is left out so reruns compare equal."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".csv":
            with path.open("w", newline="") as f:
                w = csv.writer(f)
                f.write(f"# {self.convention}\n")
                w.writerow(["episode", "return", "success", "steps", "selections"])
                for i, row in enumerate(zip(self.returns, self.successes, self.steps, self.selections)):
                    w.writerow([i, repr(float(row[0])), int(row[1]), row[2], row[3]])
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


# selectors ------------------------------------------------------------------------

class LdcqSelector:
    """Argmax of the learned Q over diffusion-sampled candidates (first index on ties)."""

    def __init__(self, q: QNet, candidates, n: int, q_min: QNet | None = None):
        self.q, self.candidates, self.n, self.q_min = q, candidates, n, q_min

    @torch.no_grad()
    def __call__(self, states, goals, generator) -> torch.Tensor:
        s = torch.as_tensor(states, dtype=self.q.dtype)
        z = self.candidates(s, self.n, generator).to(self.q.dtype)
        scores = self.q(s, z)
        if self.q_min is not None:
            scores = torch.minimum(scores, self.q_min(s, z))
        best = scores.argmax(dim=-1)
        return z[torch.arange(len(z)), best]


class LdgcSelector:
    """Sample from the goal-conditioned prior ``p(z | s, g)``.

    With ``n > 1`` candidates, picks the one whose world-model outcome lies
    closest to the goal, or without a world model the candidate with the
    smallest mean distance to the others.
    """

    def __init__(self, psi_goal: Denoiser, sched: DiffusionSchedule, guidance: GuidanceSpec,
                 n: int = 1, world_model=None, pos_dims: int = 2):
        self.psi, self.sched, self.guidance, self.n = psi_goal, sched, guidance, n
        self.world_model, self.pos_dims = world_model, pos_dims

    @torch.no_grad()
    def __call__(self, states, goals, generator) -> torch.Tensor:
        if goals is None:
            raise ConfigError("goal-conditioned selection needs goals")
        dt = self.psi.dtype
        s = torch.as_tensor(states, dtype=dt)
        g = torch.as_tensor(goals, dtype=dt)
        z = ddpm_sample(self.psi, self.sched, torch.cat([s, g], -1), self.guidance, self.n, generator)
        if self.n == 1:
            return z[:, 0]
        if self.world_model is not None:
            pred = self.world_model(s, z)[..., :self.pos_dims]
            score = (pred - g.unsqueeze(1)).norm(dim=-1)
        else:
            score = torch.cdist(z, z).mean(-1)
        return z[torch.arange(len(z)), score.argmin(-1)]


def select_skill_ldcq(q1: QNet, psi: Denoiser, sched: DiffusionSchedule, s, n: int,
                      guidance: GuidanceSpec, generator: torch.Generator) -> torch.Tensor:
    from .qlearning import DiffusionCandidates
    sel = LdcqSelector(q1, DiffusionCandidates(psi, sched, guidance), n)
    return sel(np.asarray(s, dtype=np.float64)[None], None, generator)[0]


def select_skill_ldgc(psi_goal: Denoiser, sched: DiffusionSchedule, s, s_g, n: int,
                      guidance: GuidanceSpec, generator: torch.Generator,
                      goal_low=None, goal_high=None, world_model=None) -> torch.Tensor:
    s_g = np.asarray(s_g, dtype=np.float64)
    if goal_low is not None and (np.any(s_g < goal_low) or np.any(s_g > goal_high)):
        raise ShapeError(f"goal {s_g} outside the goal space [{goal_low}, {goal_high}]")
    sel = LdgcSelector(psi_goal, sched, guidance, n, world_model)
    return sel(np.asarray(s, dtype=np.float64)[None], s_g[None], generator)[0]


# rollouts ----------------------------------------------------------------------------

def _initial_states(env, episodes: int, seed: int, starts) -> np.ndarray:
    if starts is not None:
        return np.array(starts, dtype=np.float64)
    seqs = np.random.SeedSequence(seed).spawn(episodes)
    return np.stack([env.reset(np.random.default_rng(sq)) for sq in seqs])


def _step(env, s, a, goal_cells):
    if goal_cells is None:
        return env.step_batch(s, a)
    return env.step_batch(s, a, goals=goal_cells)


def rollout(env, vae: SkillVAE, selector, H: int, episodes: int, seed: int = 0, *,
            starts=None, goal_cells=None, goals=None, horizon: int | None = None,
            noise_scale: float = 0.0, mode: str = "ldcq") -> EvalReport:
    """Evaluate ``selector`` + decoder for ``episodes`` parallel episodes.

    ``goal_cells`` (grid maze) sets per-episode goals; the goal vector given to
    the selector defaults to the cell centers.
    """
    desc = env.descriptor
    if vae.state_dim != desc.state_dim or vae.action_dim != desc.action_dim:
        raise ConfigError(f"decoder dims ({vae.state_dim}, {vae.action_dim}) do not match "
                          f"{desc.name} ({desc.state_dim}, {desc.action_dim})")
    t0 = time.perf_counter()
    horizon = horizon or desc.horizon
    g = make_generator(seed)
    states = _initial_states(env, episodes, seed, starts)
    if goal_cells is not None:
        goal_cells = np.asarray(goal_cells, dtype=np.int64)
        if goals is None:
            goals = goal_cells + 0.5
    live = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    success = np.zeros(episodes, dtype=bool)
    steps = np.zeros(episodes, dtype=np.int64)
    selections = np.zeros(episodes, dtype=np.int64)
    z = None
    lo, hi = np.array(desc.action_low), np.array(desc.action_high)
    for t in range(horizon):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        if t % H == 0:
            znew = selector(states[idx], None if goals is None else goals[idx], g)
            if z is None:
                z = torch.zeros(episodes, znew.shape[-1], dtype=znew.dtype)
            z[idx] = znew
            selections[idx] += 1
        a = vae.decode(states[idx], z[idx].to(vae.dtype), g, noise_scale).numpy()
        a = np.clip(a, lo, hi)
        nxt, r, done = _step(env, states[idx], a, None if goal_cells is None else goal_cells[idx])
        states[idx] = nxt
        returns[idx] += r
        steps[idx] += 1
        success[idx] |= done
        live[idx[done]] = False
    return EvalReport(mode, desc.name, returns.tolist(), success.tolist(), steps.tolist(),
                      selections.tolist(), time.perf_counter() - t0)


def behavior_rollout(env, episodes: int, seed: int = 0, *, starts=None, goal_cells=None,
                     horizon: int | None = None) -> EvalReport:
    """The data-collecting behavior policy, evaluated like a learned policy."""
    desc = env.descriptor
    t0 = time.perf_counter()
    horizon = horizon or desc.horizon
    seqs = np.random.SeedSequence(seed).spawn(episodes)
    rets, succ, steps = [], [], []
    for e, sq in enumerate(seqs):
        rng = np.random.default_rng(sq)
        s = np.array(starts[e], dtype=np.float64) if starts is not None else env.reset(rng)
        pol = env.behavior(rng)
        pol.reset(s)
        total, done, k = 0.0, False, 0
        while not done and k < horizon:
            a = pol.act(s)
            if goal_cells is None:
                nxt, r, d = env.step_batch(s[None], a[None])
            else:
                nxt, r, d = env.step_batch(s[None], a[None], goals=np.asarray(goal_cells)[e:e + 1])
            s, done = nxt[0], bool(d[0])
            total += float(r[0])
            k += 1
        rets.append(total)
        succ.append(done)
        steps.append(k)
    return EvalReport("behavior", desc.name, rets, succ, steps, [0] * episodes,
                      time.perf_counter() - t0)
