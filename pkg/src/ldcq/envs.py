"""Built-in desk-scale environments with scripted behavior policies.

Each environment is deterministic given its state; the behavior policies are
the only source of randomness. Step functions come in a single-state form
(``step``) and a vectorized form (``step_batch``) used by parallel rollouts.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int
    goal_dim: int = 0
    goal_low: tuple[float, ...] = ()
    goal_high: tuple[float, ...] = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ConfigError("state and action dimensions must be >= 1")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ConfigError("action bounds must match the action dimension")
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ConfigError("action bounds must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvDescriptor":
        d = dict(d)
        for k in ("action_low", "action_high", "goal_low", "goal_high"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.action_low, self.action_high)


# --- 1-D random walk ---------------------------------------------------------

RW1D_BOUND = 10.0


def rw1d_step(state: float, action: float) -> tuple[float, float, bool]:
    """Move by ``action``; +10 and done at either wall, -1 otherwise."""
    if abs(action) > 1.0:
        raise ShapeError(f"action {action} outside [-1, 1]")
    nxt = min(max(state + action, -RW1D_BOUND), RW1D_BOUND)
    if abs(nxt) == RW1D_BOUND:
        return nxt, 10.0, True
    return nxt, -1.0, False


def rw1d_behavior(rng: np.random.Generator) -> float:
    """Uniform draw from [-1, -0.8] U [0.8, 1]."""
    mag = rng.uniform(0.8, 1.0)
    return mag if rng.random() < 0.5 else -mag


class RandomWalk1D:
    descriptor = EnvDescriptor("rw1d", 1, 1, (-1.0,), (1.0,), horizon=500)

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(1)

    def step(self, state, action):
        nxt, r, done = rw1d_step(float(state[0]), float(action[0]))
        return np.array([nxt]), r, done

    def step_batch(self, states: np.ndarray, actions: np.ndarray):
        a = np.clip(actions[:, 0], -1.0, 1.0)
        nxt = np.clip(states[:, 0] + a, -RW1D_BOUND, RW1D_BOUND)
        done = np.abs(nxt) == RW1D_BOUND
        return nxt[:, None], np.where(done, 10.0, -1.0), done

    def behavior(self, rng: np.random.Generator) -> "RW1DBehavior":
        return RW1DBehavior(rng)


class RW1DBehavior:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def reset(self, state) -> None:
        pass

    def act(self, state) -> np.ndarray:
        return np.array([rw1d_behavior(self.rng)])


# --- three target sites --------------------------------------------------------

class TrimodalEnv:
    """Point agent at the origin with three target sites 120 degrees apart.

    The behavior policy commits to one site per episode and drifts toward it
    with isotropic noise large enough that single steps barely reveal the
    chosen site, while 20-step stretches do.
    """

    def __init__(self, radius: float = 1.5, max_speed: float = 0.15, arrive: float = 0.15,
                 drift: float = 0.05, noise: float = 0.05, horizon: int = 80):
        self.radius, self.max_speed, self.arrive = radius, max_speed, arrive
        self.drift, self.noise = drift, noise
        ang = np.deg2rad([90.0, 210.0, 330.0])
        self.sites = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.descriptor = EnvDescriptor(
            "trimodal", 2, 2, (-max_speed,) * 2, (max_speed,) * 2, horizon=horizon,
            params=dict(radius=radius, max_speed=max_speed, arrive=arrive, drift=drift,
                        noise=noise))

    def reset(self, rng=None) -> np.ndarray:
        return np.zeros(2)

    def _limit(self, a: np.ndarray) -> np.ndarray:
        a = np.clip(a, -self.max_speed, self.max_speed)
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return np.where(n > self.max_speed, a * (self.max_speed / np.maximum(n, 1e-12)), a)

    def site_index(self, pos: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(np.asarray(pos)[..., None, :] - self.sites, axis=-1)
        return np.argmin(d, axis=-1)

    def step_batch(self, states, actions):
        nxt = states + self._limit(actions)
        d = np.linalg.norm(nxt[:, None, :] - self.sites[None], axis=-1).min(axis=1)
        done = d <= self.arrive
        return nxt, done.astype(np.float64), done

    def step(self, state, action):
        nxt, r, done = self.step_batch(np.asarray(state, float)[None], np.asarray(action, float)[None])
        return nxt[0], float(r[0]), bool(done[0])

    def behavior(self, rng: np.random.Generator) -> "TrimodalBehavior":
        return TrimodalBehavior(self, rng)


class TrimodalBehavior:
    def __init__(self, env: TrimodalEnv, rng: np.random.Generator):
        self.env, self.rng = env, rng
        self.site = 0

    def reset(self, state) -> None:
        self.site = int(self.rng.integers(3))

    def act(self, state) -> np.ndarray:
        d = self.env.sites[self.site] - state
        u = d / max(np.linalg.norm(d), 1e-12)
        a = self.env.drift * u + self.env.noise * self.rng.standard_normal(2)
        return self.env._limit(a)


def trimodal_env(seed: int = 0, **kw) -> TrimodalEnv:
    """The environment is deterministic; ``seed`` is accepted for symmetry."""
    return TrimodalEnv(**kw)


# --- continuous grid maze -------------------------------------------------------

LAYOUTS = {
    # two T-intersections on the top and bottom corridors joined by three
    # vertical corridors
    "tee": [
        "#########",
        "#.......#",
        "#.##.##.#",
        "#.##.##.#",
        "#.......#",
        "#########",
    ],
    "u": [
        "#######",
        "#.....#",
        "#.###.#",
        "#.#...#",
        "#.#.###",
        "#.....#",
        "#######",
    ],
}


def _neighbors(free: np.ndarray, r: int, c: int):
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < free.shape[0] and 0 <= cc < free.shape[1] and free[rr, cc]:
            yield rr, cc


class GridMaze:
    """Continuous 2-D position ``(row, col)`` in cell units inside a walled grid.

    Reward is 1 (and the episode ends) when the agent enters the goal cell.
    With no goal set the reward is always 0 and episodes only time out.
    """

    def __init__(self, layout: str = "tee", speed: float = 0.25, horizon: int = 150,
                 goal: tuple[int, int] | None = None):
        if layout not in LAYOUTS:
            raise ConfigError(f"unknown maze layout {layout!r}; known: {sorted(LAYOUTS)}")
        rows = LAYOUTS[layout]
        self.layout = layout
        self.free = np.array([[ch != "#" for ch in row] for row in rows], dtype=bool)
        self.cells = [tuple(rc) for rc in np.argwhere(self.free)]
        self.speed = speed
        self.goal = None if goal is None else tuple(goal)
        degrees = {rc: len(list(_neighbors(self.free, *rc))) for rc in self.cells}
        if not any(d == 3 for d in degrees.values()):
            raise ConfigError(f"layout {layout!r} has no T-intersection")
        self.junctions = [rc for rc, d in degrees.items() if d >= 3]
        self._next_hop = self._all_pairs_next_hop()
        nr, nc = self.free.shape
        self.descriptor = EnvDescriptor(
            f"gridmaze-{layout}", 2, 2, (-speed,) * 2, (speed,) * 2, horizon=horizon,
            goal_dim=2, goal_low=(0.0, 0.0), goal_high=(float(nr), float(nc)),
            params=dict(layout=layout, speed=speed))

    def _all_pairs_next_hop(self) -> dict:
        hop = {}
        for src in self.cells:
            parent = {src: None}
            q = deque([src])
            while q:
                u = q.popleft()
                for v in _neighbors(self.free, *u):
                    if v not in parent:
                        parent[v] = u
                        q.append(v)
            for dst in self.cells:
                # walk back from dst to find the first step out of src
                node = dst
                while parent[node] is not None and parent[node] != src:
                    node = parent[node]
                hop[src, dst] = node
        return hop

    def path_length(self, src, dst) -> int:
        n, node = 0, tuple(src)
        while node != tuple(dst):
            node = self._next_hop[node, tuple(dst)]
            n += 1
        return n

    @staticmethod
    def cell_of(pos) -> tuple[int, int]:
        return int(np.floor(pos[0])), int(np.floor(pos[1]))

    @staticmethod
    def center(cell) -> np.ndarray:
        return np.array([cell[0] + 0.5, cell[1] + 0.5])

    def goal_position(self) -> np.ndarray | None:
        return None if self.goal is None else self.center(self.goal)

    def set_goal(self, goal) -> None:
        goal = tuple(int(x) for x in goal)
        if goal not in set(self.cells):
            raise ShapeError(f"goal cell {goal} is not a free cell")
        self.goal = goal

    def reset(self, rng: np.random.Generator | None = None, start=None) -> np.ndarray:
        if start is None:
            rng = rng or np.random.default_rng(0)
            start = self.cells[int(rng.integers(len(self.cells)))]
        return self.center(start)

    def _reward(self, nxt: np.ndarray, goals: np.ndarray | None):
        if goals is None:
            z = np.zeros(len(nxt))
            return z, z.astype(bool)
        hit = np.all(np.floor(nxt).astype(np.int64) == goals, axis=1)
        return hit.astype(np.float64), hit

    def step_batch(self, states, actions, goals: np.ndarray | None = None):
        """``goals`` is an ``(n, 2)`` array of goal cells; defaults to ``self.goal``."""
        a = np.clip(actions, -self.speed, self.speed)
        nxt = kernels.maze_move(self.free, np.ascontiguousarray(states, dtype=np.float64),
                                np.ascontiguousarray(a, dtype=np.float64))
        if goals is None and self.goal is not None:
            goals = np.tile(np.array(self.goal), (len(nxt), 1))
        r, done = self._reward(nxt, goals)
        return nxt, r, done

    def step(self, state, action):
        nxt, r, done = self.step_batch(np.asarray(state, float)[None], np.asarray(action, float)[None])
        return nxt[0], float(r[0]), bool(done[0])

    def behavior(self, rng: np.random.Generator, noise: float = 0.05) -> "WaypointBehavior":
        return WaypointBehavior(self, rng, noise)


class WaypointBehavior:
    """Follows shortest cell paths to random waypoints, picking a new one on arrival."""

    def __init__(self, maze: GridMaze, rng: np.random.Generator, noise: float = 0.05):
        self.maze, self.rng, self.noise = maze, rng, noise
        self.waypoint = maze.cells[0]

    def _new_waypoint(self, here) -> None:
        while True:
            wp = self.maze.cells[int(self.rng.integers(len(self.maze.cells)))]
            if wp != here:
                self.waypoint = wp
                return

    def reset(self, state) -> None:
        self._new_waypoint(self.maze.cell_of(state))

    def act(self, state) -> np.ndarray:
        here = self.maze.cell_of(state)
        if here == self.waypoint and np.linalg.norm(self.maze.center(here) - state) < 0.2:
            self._new_waypoint(here)
        nxt = self.waypoint if here == self.waypoint else self.maze._next_hop[here, self.waypoint]
        d = self.maze.center(nxt) - state
        dist = np.linalg.norm(d)
        step = min(self.maze.speed, dist) * (d / max(dist, 1e-12))
        a = step + self.noise * self.rng.standard_normal(2)
        return np.clip(a, -self.maze.speed, self.maze.speed)


def gridmaze_env(layout: str = "tee", seed: int = 0, **kw) -> GridMaze:
    return GridMaze(layout, **kw)


def make_env(name: str, **kw):
    if name == "rw1d":
        return RandomWalk1D()
    if name == "trimodal":
        return TrimodalEnv(**kw)
    if name.startswith("gridmaze"):
        layout = name.partition("-")[2] or "tee"
        return GridMaze(layout, **kw)
    raise ConfigError(f"unknown environment {name!r}")
