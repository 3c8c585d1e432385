"""Reference numpy implementations of the numeric hot kernels.

These are the fallback used when the compiled extension is absent; they are
also the ground truth the compiled kernels are tested against.
"""
import numpy as np


def gauss_forward(d2, h, multipliers):
    """Multi-bandwidth Gaussian kernel matrix and its derivative.

    K = mean_m exp(-d2 / (m * h)) over the multiplier set.  Returns (K, W)
    where W = dK/d(d2) elementwise, needed by the backward pass.
    """
    k = np.zeros_like(d2)
    w = np.zeros_like(d2)
    for m in multipliers:
        c = -1.0 / (m * h)
        e = np.exp(d2 * c)
        k += e
        w += e * c
    inv = 1.0 / len(multipliers)
    k *= inv
    w *= inv
    return k, w


def pair_bce(phi, mu, mask, eps):
    """Masked mean binary cross-entropy on cosine similarities.

    phi holds pairwise cosines in [-1, 1]; mu the 0/1 same-class indicators;
    mask selects which entries count as pairs.  The cosine is mapped to a
    probability s = clip((phi + 1) / 2, eps, 1 - eps) before the BCE.
    Returns (loss, dloss/dphi); a zero mask yields (0.0, zeros).
    """
    npairs = float(mask.sum())
    if npairs == 0.0:
        return 0.0, np.zeros_like(phi)
    x = (phi + 1.0) * 0.5
    s = np.clip(x, eps, 1.0 - eps)
    ell = -(mu * np.log(s) + (1.0 - mu) * np.log(1.0 - s))
    loss = float((ell * mask).sum() / npairs)
    # clip passes gradient on the closed interval, matching clamp's convention
    inside = ((x >= eps) & (x <= 1.0 - eps)).astype(np.float64)
    dphi = mask * inside * (0.5 / npairs) * (-(mu / s) + (1.0 - mu) / (1.0 - s))
    return loss, dphi
