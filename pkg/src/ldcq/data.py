"""Offline datasets: episode collection, H-step snippet slicing, JSON-lines IO."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .envs import EnvDescriptor
from .errors import ConfigError, EmptyOutputError, ShapeError

DATASET_FORMAT = "ldcq-dataset"
DATASET_VERSION = 1


@dataclass
class EpisodeTrajectory:
    states: np.ndarray   # (L + 1, state_dim)
    actions: np.ndarray  # (L, action_dim)
    rewards: np.ndarray  # (L,)
    terminal: bool = False
    timeout: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.actions)
        if len(self.states) != n + 1 or len(self.rewards) != n:
            raise ShapeError(f"inconsistent lengths: {len(self.states)} states, "
                             f"{n} actions, {len(self.rewards)} rewards")
        if self.terminal and self.timeout:
            raise ShapeError("an episode cannot both terminate and time out")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def truncated(self) -> bool:
        """Ended by the collector without terminal or timeout."""
        return not (self.terminal or self.timeout)

    def to_json(self) -> str:
        return json.dumps({"states": self.states.tolist(), "actions": self.actions.tolist(),
                           "rewards": self.rewards.tolist(), "terminal": self.terminal,
                           "timeout": self.timeout})

    @classmethod
    def from_json(cls, line: str) -> "EpisodeTrajectory":
        d = json.loads(line)
        return cls(np.array(d["states"]), np.array(d["actions"]), np.array(d["rewards"]),
                   bool(d["terminal"]), bool(d["timeout"]))


@dataclass
class SkillSnippet:
    """An H-step window. Entries past ``steps_valid`` are padding.

    Padded states repeat ``next_state``; padded actions and rewards are zero.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_state: np.ndarray
    terminal_within: bool
    steps_valid: int
    episode: int = -1
    start: int = -1

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def full(self) -> bool:
        return self.steps_valid == self.horizon


@dataclass
class SnippetArrays:
    """Column-stacked snippets for batched training."""

    states: np.ndarray       # (n, H, ds)
    actions: np.ndarray      # (n, H, da)
    rewards: np.ndarray      # (n, H)
    next_states: np.ndarray  # (n, ds)
    terminal: np.ndarray     # (n,) bool
    steps_valid: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return len(self.states)


def stack_snippets(snips: list[SkillSnippet]) -> SnippetArrays:
    if not snips:
        raise EmptyOutputError("no snippets to stack")
    return SnippetArrays(
        np.stack([s.states for s in snips]), np.stack([s.actions for s in snips]),
        np.stack([s.rewards for s in snips]), np.stack([s.next_state for s in snips]),
        np.array([s.terminal_within for s in snips], dtype=bool),
        np.array([s.steps_valid for s in snips], dtype=np.int64))


def collect_dataset(env, episodes: int, seed: int, behavior_factory=None,
                    max_steps: int | None = None) -> list[EpisodeTrajectory]:
    """Roll out the environment's behavior policy; one derived rng per episode."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    horizon = max_steps or env.descriptor.horizon
    make_behavior = behavior_factory or env.behavior
    out = []
    for child in np.random.SeedSequence(seed).spawn(episodes):
        rng = np.random.default_rng(child)
        s = env.reset(rng)
        pol = make_behavior(rng)
        pol.reset(s)
        states, actions, rewards = [s], [], []
        done = False
        while not done and len(actions) < horizon:
            a = pol.act(s)
            s, r, done = env.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
        out.append(EpisodeTrajectory(np.array(states), np.array(actions), np.array(rewards),
                                     terminal=done, timeout=not done))
    return out


def count_windows(length: int, stride: int) -> int:
    return -(-length // stride)


def slice_snippets(dataset: list[EpisodeTrajectory], H: int, stride: int = 1) -> list[SkillSnippet]:
    """Windows starting at every multiple of ``stride`` inside each episode.

    Windows never cross episodes. A window that runs past the episode end is
    kept with ``steps_valid < H``. ``terminal_within`` is set when the window
    contains the final step of an episode that terminated.
    """
    if H < 1 or stride < 1:
        raise ConfigError("H and stride must be >= 1")
    if not any(len(ep) >= H for ep in dataset):
        raise EmptyOutputError(f"no episode is at least H={H} steps long")
    out = []
    for ei, ep in enumerate(dataset):
        L = len(ep)
        ds, da = ep.states.shape[1], ep.actions.shape[1]
        for start in range(0, L, stride):
            sv = min(H, L - start)
            nxt = ep.states[start + sv]
            states = np.repeat(nxt[None], H, axis=0)
            states[:sv] = ep.states[start:start + sv]
            actions = np.zeros((H, da))
            actions[:sv] = ep.actions[start:start + sv]
            rewards = np.zeros(H)
            rewards[:sv] = ep.rewards[start:start + sv]
            out.append(SkillSnippet(states, actions, rewards, nxt.copy(),
                                    terminal_within=bool(ep.terminal and start + sv == L),
                                    steps_valid=sv, episode=ei, start=start))
    return out


def discounted_return(rewards, steps_valid: int, gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    r = np.asarray(rewards, dtype=np.float64)[None, :]
    return float(kernels.discounted_returns(r, np.array([steps_valid], dtype=np.int64), gamma)[0])


def discounted_returns(rewards: np.ndarray, steps_valid: np.ndarray, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    return kernels.discounted_returns(np.ascontiguousarray(rewards, dtype=np.float64),
                                      np.ascontiguousarray(steps_valid, dtype=np.int64), gamma)


def save_dataset(path, descriptor: EnvDescriptor, dataset: list[EpisodeTrajectory],
                 extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "env": descriptor.to_dict(), **(extra or {})}
    lines = [json.dumps(header, sort_keys=True)] + [ep.to_json() for ep in dataset]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path) -> tuple[EnvDescriptor, list[EpisodeTrajectory], dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path} is not a dataset file")
    desc = EnvDescriptor.from_dict(header["env"])
    return desc, [EpisodeTrajectory.from_json(l) for l in lines[1:] if l.strip()], header
