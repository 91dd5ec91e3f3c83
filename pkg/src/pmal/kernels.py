"""Hot-loop dispatch: compiled Cython core when built, numpy fallback otherwise.

Set ``PMAL_PURE_PYTHON=1`` to force the fallback (used by the benchmark and the
cross-backend tests).
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("PMAL_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def topology_gap(pts1, ref1, pts2, ref2):
    """Per-row Euclidean gap between two distance profiles.

    For row ``i`` returns ``sqrt(sum_j (|pts1[i]-ref1[j]| - |pts2[i]-ref2[j]|)**2)``.
    The two spaces may have different coordinate widths.
    """
    pts1, ref1, pts2, ref2 = map(_c64, (pts1, ref1, pts2, ref2))
    if pts1.shape[0] != pts2.shape[0] or ref1.shape[0] != ref2.shape[0]:
        raise ValueError("row counts of the two spaces disagree")
    return _impl.topology_gap(pts1, ref1, pts2, ref2)


def nearest_higher(dist, r, init):
    """Distance from each item to its nearest item with strictly larger ``r``.

    Items without such a neighbour get ``init``.
    """
    return _impl.nearest_higher(_c64(dist), _c64(r), float(init))


def fnv1a64(data, state=_fallback.FNV_OFFSET):
    """64-bit FNV-1a over ``data``; chain calls by passing the previous hash as ``state``."""
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    if _compiled is not None:
        return int(_compiled.fnv1a64(buf, state))
    return _fallback.fnv1a64(buf, state)
