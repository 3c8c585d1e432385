"""Dual-head relation discrepancy and controversial-sample accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import Graph, Node
from .model import ModelError, PrototypeBank, RalHead, class_logits_np

__all__ = [
    "PairwiseRelation",
    "ControversyReport",
    "pairwise_phi",
    "pairwise_relation",
    "l_disc",
    "l_disc_value",
    "controversy",
    "write_controversy_csv",
]

NORM_GUARD = 1e-8


@dataclass(frozen=True)
class PairwiseRelation:
    """Matrix of pairwise relation cosines for one head over a batch."""

    matrix: np.ndarray

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ModelError(f"relation matrix must be square, got {m.shape}")


def _phi_np(q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / np.maximum(norms, NORM_GUARD)
    return qn @ qn.T


def pairwise_relation(q: np.ndarray) -> PairwiseRelation:
    """Clipped relation matrix for reporting; zero-Q rows give zero rows."""
    phi = np.clip(_phi_np(np.asarray(q, dtype=np.float64)), -1.0, 1.0)
    return PairwiseRelation(matrix=phi)


def pairwise_phi(g: Graph, q: Node) -> Node:
    """Differentiable cosine matrix of the rows of Q.

    Row norms are clamped below at a small guard, so exactly-zero rows
    produce zero cosines; near-zero rows follow the clamped-norm gradient
    convention.
    """
    norms = q.l2norm_rows().clamp(NORM_GUARD, np.inf)
    qn = q.div(norms)
    return qn @ qn.T


def l_disc(
    g: Graph,
    z_t: Node,
    theta1: Node,
    theta2: Node,
    prototypes: Node,
) -> Node:
    """Mean absolute difference of the two heads' relation matrices.

    The double sum runs over all ordered pairs including the diagonal;
    batches of fewer than two samples contribute zero by convention.
    """
    if z_t.shape[0] < 2:
        return g.tensor(np.zeros((1, 1)))
    phi1 = pairwise_phi(g, (z_t @ theta1) @ prototypes.T)
    phi2 = pairwise_phi(g, (z_t @ theta2) @ prototypes.T)
    diff = phi1 - phi2
    return (diff.relu() + (-diff).relu()).mean()


def l_disc_value(
    z_t: np.ndarray,
    theta1: np.ndarray,
    theta2: np.ndarray,
    prototypes: np.ndarray,
) -> float:
    """Tape-free l_disc for probes and reports."""
    if z_t.shape[0] < 2:
        return 0.0
    q1 = np.asarray(z_t, dtype=np.float64) @ theta1 @ prototypes.T
    q2 = np.asarray(z_t, dtype=np.float64) @ theta2 @ prototypes.T
    return float(np.abs(_phi_np(q1) - _phi_np(q2)).mean())


@dataclass(frozen=True)
class ControversyReport:
    """Per-sample disagreement between the two heads on a target batch."""

    scores: np.ndarray  # row means of |phi1 - phi2|, >= 0
    disagree: np.ndarray  # bool, argmax predictions differ

    def __post_init__(self):
        if self.scores.shape != self.disagree.shape:
            raise ModelError("scores and flags must align")
        if np.any(self.scores < 0.0):
            raise ModelError("controversy scores must be >= 0")

    def __len__(self) -> int:
        return self.scores.shape[0]


def controversy(
    z_t: np.ndarray,
    head1: RalHead,
    head2: RalHead,
    bank: PrototypeBank,
) -> ControversyReport:
    rows = bank.snapshot()
    z_t = np.asarray(z_t, dtype=np.float64)
    q1 = class_logits_np(z_t, head1.theta, rows)
    q2 = class_logits_np(z_t, head2.theta, rows)
    diff = np.abs(_phi_np(q1) - _phi_np(q2))
    return ControversyReport(
        scores=diff.mean(axis=1),
        disagree=np.argmax(q1, axis=1) != np.argmax(q2, axis=1),
    )


def write_controversy_csv(report: ControversyReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "score", "disagree_flag"])
        for i in range(len(report)):
            writer.writerow(
                [i, repr(float(report.scores[i])), int(report.disagree[i])]
            )
