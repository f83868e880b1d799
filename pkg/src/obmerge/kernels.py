"""Kernel backend selection.

Imports the compiled extension when present, otherwise the numpy
fallback. Both backends are bit-identical; OBMERGE_PURE_PYTHON=1 forces
the fallback (useful for parity testing and debugging).
"""

from __future__ import annotations

import os

if os.environ.get("OBMERGE_PURE_PYTHON"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

BACKEND: str = _impl.BACKEND

dare_keep_mask = _impl.dare_keep_mask
rank_topk_mask = _impl.rank_topk_mask
score_grid = _impl.score_grid
elect_signs_stack = _impl.elect_signs_stack
aggregate_stack = _impl.aggregate_stack
