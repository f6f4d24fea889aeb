"""Kernel dispatch: the compiled extension when available, numpy otherwise.

Set ``IDCONFUSION_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

try:
    if os.environ.get("IDCONFUSION_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

rank_auc = _impl.rank_auc
eer_scan = _impl.eer_scan
select_blocks = _impl.select_blocks
candidate_thresholds = _pykernels.candidate_thresholds

__all__ = ["BACKEND", "rank_auc", "eer_scan", "select_blocks", "candidate_thresholds"]
