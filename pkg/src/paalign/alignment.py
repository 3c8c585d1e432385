"""Kernel discrepancy machinery: global MMD, class-conditional alignment,
and the contrastive class discrepancy.

All losses are quadratic forms u^T K u on one pooled Gaussian gram matrix of
the stacked [source; target] embeddings, with signed per-class weight
vectors.  That makes the three losses share a single kernel evaluation and
keeps every term differentiable through the gram op.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .graph import Graph, Node

__all__ = [
    "KernelSpec",
    "ClassWeights",
    "AlignmentError",
    "PooledGram",
    "gram",
    "pooled_gram",
    "mmd2",
    "mmd2_from",
    "class_weights",
    "l_align",
    "l_align_from",
    "l_contrast",
    "l_contrast_from",
]


class AlignmentError(ValueError):
    """Invalid inputs to the discrepancy machinery."""


@dataclass(frozen=True)
class KernelSpec:
    """Multi-bandwidth Gaussian kernel: arithmetic mean over multipliers of
    exp(-d2 / (m * h)), h from the pooled median heuristic."""

    multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        if len(self.multipliers) == 0:
            raise AlignmentError("at least one bandwidth multiplier required")
        if any(not m > 0.0 for m in self.multipliers):
            raise AlignmentError(
                f"multipliers must be positive, got {self.multipliers}"
            )


@dataclass(frozen=True)
class ClassWeights:
    """Per-class sample weights; each nonzero column sums to 1."""

    w_s: np.ndarray  # n x C
    w_t: np.ndarray  # m x C

    @property
    def included(self) -> List[int]:
        """Classes carrying mass in both domains."""
        src = self.w_s.sum(axis=0) > 0.0
        tgt = self.w_t.sum(axis=0) > 0.0
        return [c for c in range(self.w_s.shape[1]) if src[c] and tgt[c]]


def _check_batches(z_s, z_t) -> None:
    for name, z in (("source", z_s), ("target", z_t)):
        if z.shape[0] == 0:
            raise AlignmentError(f"{name} batch is empty")
    if z_s.shape[1] != z_t.shape[1]:
        raise AlignmentError(
            f"embedding widths differ: {z_s.shape} vs {z_t.shape}"
        )


@dataclass
class PooledGram:
    """Gram matrix of [z_s; z_t] plus its split sizes and bandwidth."""

    node: Node
    h: float
    n: int
    m: int

    @property
    def graph(self) -> Graph:
        return self.node.graph


def pooled_gram(
    g: Graph,
    z_s: Node,
    z_t: Node,
    spec: KernelSpec,
    h: Optional[float] = None,
) -> PooledGram:
    """Gram of the stacked batches; h defaults to the pooled median heuristic
    and is treated as a constant by the backward pass either way."""
    _check_batches(z_s, z_t)
    pooled = g.concat_rows(z_s, z_t)
    node, h_used = g.gauss_gram(pooled, spec.multipliers, h=h)
    return PooledGram(node=node, h=h_used, n=z_s.shape[0], m=z_t.shape[0])


def gram(g: Graph, a: Node, b: Node, spec: KernelSpec) -> Node:
    """Cross-kernel block K[i, j] = k(a_i, b_j) at the pooled bandwidth."""
    pg = pooled_gram(g, a, b, spec)
    total = pg.n + pg.m
    sel_a = np.zeros((total, pg.n))
    sel_a[np.arange(pg.n), np.arange(pg.n)] = 1.0
    sel_b = np.zeros((total, pg.m))
    sel_b[pg.n + np.arange(pg.m), np.arange(pg.m)] = 1.0
    return (g.tensor(sel_a).T @ pg.node) @ g.tensor(sel_b)


def _quad(pg: PooledGram, u: np.ndarray) -> Node:
    """u^T K u as a graph scalar for a constant weight column u."""
    g = pg.graph
    col = g.tensor(u.reshape(-1, 1))
    return (col.T @ pg.node) @ col


def mmd2_from(pg: PooledGram) -> Node:
    u = np.concatenate(
        [np.full(pg.n, 1.0 / pg.n), np.full(pg.m, -1.0 / pg.m)]
    )
    return _quad(pg, u)


def mmd2(g: Graph, z_s: Node, z_t: Node, spec: KernelSpec) -> Node:
    """Biased V-statistic squared MMD between the two embedding batches."""
    return mmd2_from(pooled_gram(g, z_s, z_t, spec))


def class_weights(
    y_s: np.ndarray,
    p_t: np.ndarray,
    conf_threshold: float,
) -> ClassWeights:
    """Source indicator weights and confidence-filtered target soft weights.

    Source: w_s[i, c] = 1/|batch class c| for matching rows.  Target: rows
    whose max probability falls below the threshold are zeroed, remaining
    columns carry p_t renormalized per class; columns with no mass stay zero.
    """
    y_s = np.asarray(y_s)
    p_t = np.asarray(p_t, dtype=np.float64)
    if p_t.ndim != 2:
        raise AlignmentError(f"p_t must be 2-D, got shape {p_t.shape}")
    classes = p_t.shape[1]
    if y_s.ndim != 1:
        raise AlignmentError("y_s must be a 1-D label vector")
    if y_s.size and (y_s.min() < 0 or y_s.max() >= classes):
        raise AlignmentError(
            f"labels must lie in [0, {classes}), got [{y_s.min()}, {y_s.max()}]"
        )
    if np.any(p_t < 0.0):
        raise AlignmentError("p_t entries must be >= 0")
    row_sums = p_t.sum(axis=1)
    if p_t.shape[0] and np.abs(row_sums - 1.0).max() > 1e-6:
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise AlignmentError(
            f"p_t row {worst} sums to {row_sums[worst]!r}, expected 1"
        )

    n = y_s.shape[0]
    w_s = np.zeros((n, classes))
    for c in range(classes):
        mask = y_s == c
        count = int(mask.sum())
        if count:
            w_s[mask, c] = 1.0 / count

    confident = p_t.max(axis=1) >= conf_threshold if p_t.shape[0] else np.zeros(0, bool)
    w_t = np.where(confident[:, None], p_t, 0.0)
    col = w_t.sum(axis=0)
    nonzero = col > 0.0
    w_t[:, nonzero] = w_t[:, nonzero] / col[nonzero]
    return ClassWeights(w_s=w_s, w_t=w_t)


def _class_sums(pg: PooledGram, cw: ClassWeights) -> Optional[Tuple[Node, Node, Node, Node, int]]:
    """Scalar nodes (S1, S2, S3, S4) over the included classes, where
    S1 = sum_c ws_c^T K ws_c, S2 = sum_c wt_c^T K wt_c,
    S3 = sum_c ws_c^T K wt_c, S4 = (sum_c ws_c)^T K (sum_c wt_c)."""
    included = cw.included
    if not included:
        return None
    g = pg.graph
    total = pg.n + pg.m
    ws = np.zeros((total, len(included)))
    wt = np.zeros((total, len(included)))
    for k, c in enumerate(included):
        ws[: pg.n, k] = cw.w_s[:, c]
        wt[pg.n :, k] = cw.w_t[:, c]
    ws_node = g.tensor(ws)
    wt_node = g.tensor(wt)
    k_ws = pg.node @ ws_node
    k_wt = pg.node @ wt_node
    s1 = (k_ws * ws_node).sum()
    s2 = (k_wt * wt_node).sum()
    s3 = (k_wt * ws_node).sum()
    ws_tot = g.tensor(ws.sum(axis=1, keepdims=True))
    wt_tot = g.tensor(wt.sum(axis=1, keepdims=True))
    s4 = (ws_tot.T @ pg.node) @ wt_tot
    return s1, s2, s3, s4, len(included)


def _zero(g: Graph) -> Node:
    return g.tensor(np.zeros((1, 1)))


def l_align_from(pg: PooledGram, cw: ClassWeights) -> Node:
    sums = _class_sums(pg, cw)
    if sums is None:
        return _zero(pg.graph)
    s1, s2, s3, _, c_inc = sums
    return (s1 + s2 + s3.scale(-2.0)).scale(1.0 / c_inc)


def l_align(
    g: Graph,
    z_s: Node,
    y_s: np.ndarray,
    z_t: Node,
    p_t: np.ndarray,
    spec: KernelSpec,
    conf_threshold: float,
) -> Node:
    """Mean per-class weighted MMD between same-class source and target mass."""
    pg = pooled_gram(g, z_s, z_t, spec)
    return l_align_from(pg, class_weights(y_s, p_t, conf_threshold))


def l_contrast_from(pg: PooledGram, cw: ClassWeights) -> Node:
    sums = _class_sums(pg, cw)
    if sums is None:
        return _zero(pg.graph)
    s1, s2, s3, s4, c_inc = sums
    if c_inc < 2:
        return _zero(pg.graph)
    # D_cc' = ws_c^T K ws_c + wt_c'^T K wt_c' - 2 ws_c^T K wt_c', so the
    # diagonal sum is S1+S2-2*S3 and the full sum is C'*(S1+S2)-2*S4.
    diag = s1 + s2 + s3.scale(-2.0)
    off = (s1 + s2).scale(float(c_inc - 1)) + (s4 + s3.scale(-1.0)).scale(-2.0)
    return diag.scale(1.0 / c_inc) + off.scale(-1.0 / (c_inc * (c_inc - 1)))


def l_contrast(
    g: Graph,
    z_s: Node,
    y_s: np.ndarray,
    z_t: Node,
    p_t: np.ndarray,
    spec: KernelSpec,
    conf_threshold: float,
) -> Node:
    """Intra-class cross-domain discrepancy minus inter-class discrepancy."""
    pg = pooled_gram(g, z_s, z_t, spec)
    return l_contrast_from(pg, class_weights(y_s, p_t, conf_threshold))
