"""Hot-loop kernels, compiled when available.

The Cython extension ``ldcq._ckernels`` is preferred; set ``LDCQ_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the one in use.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("LDCQ_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

sumtree_update = _impl.sumtree_update
sumtree_find = _impl.sumtree_find
discounted_returns = _impl.discounted_returns
maze_move = _impl.maze_move

__all__ = ["BACKEND", "sumtree_update", "sumtree_find", "discounted_returns", "maze_move"]
