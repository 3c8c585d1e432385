"""Numeric kernels with an optional compiled fast path.

The compiled extension is preferred when importable; set PAALIGN_FORCE_NUMPY=1
before import to force the numpy implementations.  Both backends implement the
same contracts and are cross-checked in the test suite.
"""
import os

import numpy as np

from . import _numpy

try:
    from . import _fast
except ImportError:
    _fast = None

if os.environ.get("PAALIGN_FORCE_NUMPY") == "1":
    _fast = None

BACKEND = "compiled" if _fast is not None else "numpy"


def pairwise_sqdist(a, b=None):
    """Squared euclidean distances between rows of a and b (or a with itself).

    Uses the gram expansion, clipped at zero against rounding; the self case
    gets an exactly zero diagonal.
    """
    sym = b is None or b is a
    if sym:
        b = a
    aa = np.einsum("ij,ij->i", a, a)
    bb = aa if sym else np.einsum("ij,ij->i", b, b)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    if sym:
        np.fill_diagonal(d2, 0.0)
    return d2


def median_bandwidth(d2):
    """Median of the off-diagonal squared distances; 1.0 when degenerate."""
    n = d2.shape[0]
    iu = np.triu_indices(n, 1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(d2[iu]))
    return med if med > 0.0 else 1.0


def _chain_head(multipliers):
    """(m_max, count) when the multipliers form a ratio-2 ladder, else None."""
    ms = sorted(float(m) for m in multipliers)
    if len(ms) == 0:
        return None
    for small, big in zip(ms, ms[1:]):
        if abs(big - 2.0 * small) > 1e-12 * big:
            return None
    return ms[-1], len(ms)


def gauss_forward(d2, h, multipliers):
    """Dispatch the fused kernel when compiled and the multiplier set allows."""
    if _fast is not None:
        chain = _chain_head(multipliers)
        if chain is not None:
            return _fast.gauss_forward_chain(
                np.ascontiguousarray(d2), float(h), chain[0], chain[1]
            )
    return _numpy.gauss_forward(d2, h, multipliers)


def pair_bce(phi, mu, mask, eps):
    if _fast is not None:
        return _fast.pair_bce(
            np.ascontiguousarray(phi),
            np.ascontiguousarray(mu),
            np.ascontiguousarray(mask),
            float(eps),
            float(mask.sum()),
        )
    return _numpy.pair_bce(phi, mu, mask, eps)
