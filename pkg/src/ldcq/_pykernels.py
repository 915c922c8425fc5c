"""Pure numpy implementations of the hot loops.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``LDCQ_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np


def sumtree_update(tree: np.ndarray, leaves: np.ndarray, values: np.ndarray) -> None:
    """Set leaf values and recompute every affected ancestor in place.

    ``tree`` has length ``2 * cap``; node 1 is the root and leaf ``i`` sits at
    ``cap + i``.
    """
    cap = tree.shape[0] // 2
    nodes = np.asarray(leaves, dtype=np.int64) + cap
    tree[nodes] = values
    nodes = np.unique(nodes // 2)
    while nodes.size and nodes[0] >= 1:
        tree[nodes] = tree[2 * nodes] + tree[2 * nodes + 1]
        if nodes[0] == 1:
            break
        nodes = np.unique(nodes // 2)


def sumtree_find(tree: np.ndarray, prefixes: np.ndarray, size: int) -> np.ndarray:
    """Leaf index whose cumulative-priority interval contains each prefix."""
    cap = tree.shape[0] // 2
    if len(prefixes) == 0:
        return np.zeros(0, dtype=np.int64)
    node = np.ones(len(prefixes), dtype=np.int64)
    v = np.array(prefixes, dtype=np.float64)
    while node[0] < cap:
        left = 2 * node
        lv = tree[left]
        go_right = v > lv
        v = np.where(go_right, v - lv, v)
        node = np.where(go_right, left + 1, left)
    return np.minimum(node - cap, size - 1)


def discounted_returns(rewards: np.ndarray, steps_valid: np.ndarray, gamma: float) -> np.ndarray:
    n, h = rewards.shape
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        disc = 1.0
        for k in range(int(steps_valid[i])):
            acc += disc * rewards[i, k]
            disc *= gamma
        out[i] = acc
    return out


def maze_move(free: np.ndarray, pos: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Move points through a grid of free cells; blocked moves stay put.

    A move is blocked when the destination cell is a wall or lies outside the
    grid, or when it changes both row and column and either side cell is a
    wall (no squeezing through corners).
    """
    rows, cols = free.shape
    prop = pos + delta
    r0 = np.floor(pos[:, 0]).astype(np.int64)
    c0 = np.floor(pos[:, 1]).astype(np.int64)
    r1 = np.floor(prop[:, 0]).astype(np.int64)
    c1 = np.floor(prop[:, 1]).astype(np.int64)
    inside = (r1 >= 0) & (r1 < rows) & (c1 >= 0) & (c1 < cols)
    r1c, c1c = np.clip(r1, 0, rows - 1), np.clip(c1, 0, cols - 1)
    ok = inside & free[r1c, c1c]
    diag = (r1 != r0) & (c1 != c0)
    side = free[np.clip(r0, 0, rows - 1), c1c] & free[r1c, np.clip(c0, 0, cols - 1)]
    ok &= ~diag | side
    return np.where(ok[:, None], prop, pos)
