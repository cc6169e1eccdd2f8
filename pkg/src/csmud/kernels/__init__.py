"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The numba backend is the default. Set ``CSMUD_NUMBA=0`` before import to
force the numpy path (useful for debugging and for short runs where JIT
warm-up would dominate). Both backends expose the same functions.
"""

import os

from . import _np

BACKEND = "numpy"
_impl = _np

if os.environ.get("CSMUD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off"):
    try:
        from . import _nb
    except ImportError:  # numba missing or broken: stay on numpy
        pass
    else:
        _impl = _nb
        BACKEND = "numba"

block_energies = _impl.block_energies
top_blocks = _impl.top_blocks
block_threshold = _impl.block_threshold
iht_loop = _impl.iht_loop
block_activation_forward = _impl.block_activation_forward
block_activation_backward = _impl.block_activation_backward
block_max_pool_forward = _impl.block_max_pool_forward
block_max_pool_backward = _impl.block_max_pool_backward

__all__ = [
    "BACKEND",
    "block_energies",
    "top_blocks",
    "block_threshold",
    "iht_loop",
    "block_activation_forward",
    "block_activation_backward",
    "block_max_pool_forward",
    "block_max_pool_backward",
]
