"""Proportional prioritized replay over skill transitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyOutputError


@dataclass
class SkillTransitions:
    """Column storage for ``(s_t, z, r_{t:t+H}, s_{t+H}, terminal, steps_valid)``."""

    states: np.ndarray
    latents: np.ndarray
    returns: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    steps_valid: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def take(self, idx) -> "SkillTransitions":
        return SkillTransitions(self.states[idx], self.latents[idx], self.returns[idx],
                                self.next_states[idx], self.terminal[idx], self.steps_valid[idx])


class BetaSchedule:
    """Importance-sampling exponent: ``start``, raised by ``step`` every ``every`` sampling calls, capped at 1."""

    def __init__(self, start: float = 0.3, step: float = 0.03, every: int = 3000, end: float = 1.0):
        self.start, self.step, self.every, self.end = start, step, every, end

    def __call__(self, t: int) -> float:
        return min(self.end, self.start + self.step * (t // self.every))


class PrioritizedBuffer:
    """Sum-tree backed buffer; priorities are stored raw and raised to ``alpha`` on sampling."""

    def __init__(self, transitions: SkillTransitions, alpha: float = 0.7,
                 beta: BetaSchedule | None = None, eps: float = 1e-3):
        if len(transitions) == 0:
            raise EmptyOutputError("cannot build a replay buffer from zero transitions")
        if alpha < 0:
            raise ConfigError("alpha must be non-negative")
        self.data = transitions
        self.alpha = alpha
        self.beta = beta or BetaSchedule()
        self.eps = eps
        self.size = len(transitions)
        cap = 1
        while cap < self.size:
            cap *= 2
        self.tree = np.zeros(2 * cap, dtype=np.float64)
        self.priorities = np.ones(self.size, dtype=np.float64)
        self.max_priority = 1.0
        self.sample_calls = 0
        self._write(np.arange(self.size), self.priorities)

    def __len__(self) -> int:
        return self.size

    def _write(self, idx: np.ndarray, raw: np.ndarray) -> None:
        kernels.sumtree_update(self.tree, np.asarray(idx, dtype=np.int64),
                               np.ascontiguousarray(raw, dtype=np.float64) ** self.alpha)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def probabilities(self) -> np.ndarray:
        p = self.priorities ** self.alpha
        return p / p.sum()

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` indices proportionally; returns ``(batch, weights, indices)``."""
        prefixes = rng.random(n) * self.total
        idx = kernels.sumtree_find(self.tree, prefixes, self.size)
        beta = self.beta(self.sample_calls)
        self.sample_calls += 1
        probs = self.tree[len(self.tree) // 2 + idx] / self.total
        w = (self.size * probs) ** (-beta)
        return self.data.take(idx), w / w.max(), idx

    def update(self, idx: np.ndarray, td_errors: np.ndarray) -> None:
        raw = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps
        idx = np.asarray(idx, dtype=np.int64)
        # repeated indices: the last refresh wins
        _, last = np.unique(idx[::-1], return_index=True)
        keep = len(idx) - 1 - last
        idx, raw = idx[keep], raw[keep]
        self.priorities[idx] = raw
        self.max_priority = max(self.max_priority, float(raw.max()))
        self._write(idx, raw)


def per_sample(buffer: PrioritizedBuffer, n: int, rng: np.random.Generator):
    return buffer.sample(n, rng)


def per_update(buffer: PrioritizedBuffer, indices, td_errors) -> None:
    buffer.update(indices, td_errors)
