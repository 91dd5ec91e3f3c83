"""Pure numpy versions of the compiled kernels in _kernels.pyx."""
import numpy as np
from scipy.spatial.distance import cdist

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1

# rows per block when materialising distance slabs
_CHUNK = 256


def topology_gap(pts1, ref1, pts2, ref2):
    n = pts1.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        d1 = cdist(pts1[start:stop], ref1)
        d2 = cdist(pts2[start:stop], ref2)
        out[start:stop] = np.sqrt(np.sum((d1 - d2) ** 2, axis=1))
    return out


def nearest_higher(dist, r, init):
    r = np.asarray(r)
    higher = r[None, :] > r[:, None]
    masked = np.where(higher, dist, np.inf)
    best = masked.min(axis=1) if len(r) else np.empty(0)
    return np.where(higher.any(axis=1), best, init).astype(np.float64)


def fnv1a64(data, state=FNV_OFFSET):
    h = state
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h
