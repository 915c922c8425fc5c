"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-``repeat`` time for each backend
and the speedup. Without the compiled extension only the fallback is timed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ldcq import _pykernels

try:
    from ldcq import _ckernels
except ImportError:
    _ckernels = None

MAZE = np.array([[c == "." for c in row] for row in [
    "#########",
    "#.......#",
    "#.##.##.#",
    "#.##.##.#",
    "#.......#",
    "#########",
]])


def workloads(rng: np.random.Generator) -> dict:
    n = 1 << 15
    cap = n
    values = rng.random(n) + 0.01
    idx = np.arange(n, dtype=np.int64)
    tree = np.zeros(2 * cap)
    _pykernels.sumtree_update(tree, idx, values)
    prefixes = rng.random(4096) * tree[1]
    upd_idx = rng.integers(0, n, 4096).astype(np.int64)
    upd_val = rng.random(4096)
    rewards = rng.normal(size=(20000, 20))
    valid = rng.integers(1, 21, 20000).astype(np.int64)
    cells = np.argwhere(MAZE)
    pos = cells[rng.integers(len(cells), size=20000)] + rng.random((20000, 2))
    delta = rng.uniform(-0.25, 0.25, size=(20000, 2))
    return {
        "sumtree_find (4096 draws, 32k leaves)": lambda k: k.sumtree_find(tree, prefixes, n),
        "sumtree_update (4096 writes)": lambda k: k.sumtree_update(tree.copy(), upd_idx, upd_val),
        "discounted_returns (20000 x 20)": lambda k: k.discounted_returns(rewards, valid, 0.99),
        "maze_move (20000 agents)": lambda k: k.maze_move(MAZE, pos, delta),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':40s} " + " ".join(f"{b:>12s}" for b, _ in backends) + ("  speedup" if _ckernels else ""))
    for name, fn in workloads(np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for _, k in backends]
        row = f"{name:40s} " + " ".join(f"{t * 1e3:10.2f}ms" for t in times)
        if _ckernels:
            row += f"  {times[0] / times[1]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
