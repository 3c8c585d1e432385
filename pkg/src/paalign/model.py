"""Network components: extractor/discriminator MLPs, prototype bank, heads.

Parameters live as plain float64 arrays on the component objects.  For a
training step the component is bound to a Graph (one leaf per parameter,
shared across all forwards in that step); evaluation uses the _np forward
paths, which apply the same expressions without a tape.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .graph import Graph, Node

__all__ = [
    "Mlp",
    "PrototypeBank",
    "RalHead",
    "PaaModel",
    "ModelError",
    "build_model",
    "relation",
]


class ModelError(ValueError):
    """Structural misuse of model components."""


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Dense layers with ReLU on hidden layers; the output layer is linear."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ModelError(f"invalid layer widths {widths}")
        self.widths = widths
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            self.weights.append(_glorot(rng, fan_in, fan_out))
            self.biases.append(np.zeros((1, fan_out)))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.weights):
            raise ModelError(
                f"expected {2 * len(self.weights)} arrays, got {len(arrays)}"
            )
        for i in range(len(self.weights)):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ModelError(
                    f"layer {i} shape mismatch: {w.shape}/{b.shape} vs "
                    f"{self.weights[i].shape}/{self.biases[i].shape}"
                )
            self.weights[i] = np.ascontiguousarray(w, dtype=np.float64)
            self.biases[i] = np.ascontiguousarray(b, dtype=np.float64)

    def bind(self, g: Graph) -> List[Node]:
        """One leaf node per parameter, in arrays() order."""
        return [g.tensor(a) for a in self.arrays()]

    def apply(self, leaves: List[Node], x: Node) -> Node:
        if x.shape[1] != self.widths[0]:
            raise ModelError(
                f"input width {x.shape[1]} != expected {self.widths[0]}"
            )
        h = x
        n_layers = len(self.weights)
        for i in range(n_layers):
            h = h @ leaves[2 * i] + leaves[2 * i + 1]
            if i < n_layers - 1:
                h = h.relu()
        return h

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.widths[0]:
            raise ModelError(
                f"input width {x.shape[1]} != expected {self.widths[0]}"
            )
        h = x
        n_layers = len(self.weights)
        for i in range(n_layers):
            h = h @ self.weights[i] + self.biases[i]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h


class PrototypeBank:
    """Per-class source-embedding centroids with EMA updates.

    Each class is initialized to its first observed batch mean; later
    batches blend in with the configured momentum.  Classes absent from a
    batch keep their rows bitwise.
    """

    def __init__(self, classes: int, dim: int, momentum: float = 0.9):
        if classes < 1 or dim < 1:
            raise ModelError(f"invalid bank shape {classes}x{dim}")
        if not 0.0 <= momentum < 1.0:
            raise ModelError(f"momentum must lie in [0, 1), got {momentum}")
        self.classes = classes
        self.dim = dim
        self.momentum = float(momentum)
        self.rows = np.zeros((classes, dim))
        self.seen = np.zeros(classes, dtype=bool)

    @property
    def initialized(self) -> bool:
        return bool(self.seen.any())

    def update(self, z: np.ndarray, labels: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ModelError(f"embedding shape {z.shape} != (n, {self.dim})")
        if labels.shape != (z.shape[0],):
            raise ModelError("labels must be one per embedding row")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise ModelError(
                f"labels must lie in [0, {self.classes}), got "
                f"[{labels.min()}, {labels.max()}]"
            )
        for c in range(self.classes):
            mask = labels == c
            if not mask.any():
                continue
            mean = z[mask].mean(axis=0)
            if self.seen[c]:
                self.rows[c] = self.momentum * self.rows[c] + (1.0 - self.momentum) * mean
            else:
                self.rows[c] = mean
                self.seen[c] = True

    def snapshot(self) -> np.ndarray:
        """Copy of the rows for use as a graph constant."""
        if not self.initialized:
            raise ModelError("prototype bank read before initialization")
        return self.rows.copy()


class RalHead:
    """Bilinear transform theta mapping embeddings onto prototype space."""

    def __init__(self, dim: int, rng: Optional[np.random.Generator] = None,
                 noise: float = 0.01):
        if dim < 1:
            raise ModelError(f"invalid head dim {dim}")
        self.dim = dim
        self.theta = np.eye(dim)
        if rng is not None and noise > 0.0:
            self.theta = self.theta + noise * rng.standard_normal((dim, dim))

    def bind(self, g: Graph) -> Node:
        return g.tensor(self.theta)

    def set_theta(self, theta: np.ndarray) -> None:
        if theta.shape != (self.dim, self.dim):
            raise ModelError(
                f"theta shape {theta.shape} != ({self.dim}, {self.dim})"
            )
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)


def class_logits_np(z: np.ndarray, theta: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Q[i, c] = z_i . theta . P_c."""
    return np.asarray(z, dtype=np.float64) @ theta @ prototypes.T


def class_logits(z: Node, theta: Node, prototypes: Node) -> Node:
    return (z @ theta) @ prototypes.T


def relation(z_i: np.ndarray, z_j: np.ndarray, head: RalHead,
             bank: PrototypeBank) -> float:
    """Cosine of the two class-relation signatures; zero vectors give 0."""
    rows = bank.snapshot()
    q_i = np.asarray(z_i, dtype=np.float64).reshape(1, -1) @ head.theta @ rows.T
    q_j = np.asarray(z_j, dtype=np.float64).reshape(1, -1) @ head.theta @ rows.T
    ni = float(np.linalg.norm(q_i))
    nj = float(np.linalg.norm(q_j))
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float((q_i @ q_j.T)[0, 0] / (ni * nj))


class PaaModel:
    """Extractor, discriminator, prototype bank, and one or two RaL heads."""

    def __init__(self, extractor: Mlp, discriminator: Mlp, bank: PrototypeBank,
                 heads: List[RalHead]):
        if len(heads) not in (1, 2):
            raise ModelError(f"need one or two heads, got {len(heads)}")
        d_z = extractor.widths[-1]
        if discriminator.widths[0] != d_z:
            raise ModelError(
                f"discriminator input {discriminator.widths[0]} != embedding "
                f"width {d_z}"
            )
        if discriminator.widths[-1] != 1:
            raise ModelError("discriminator must end in a single unit")
        if bank.dim != d_z or any(h.dim != d_z for h in heads):
            raise ModelError("bank/head widths must match the embedding width")
        self.extractor = extractor
        self.discriminator = discriminator
        self.bank = bank
        self.heads = heads

    @property
    def embed_dim(self) -> int:
        return self.extractor.widths[-1]

    @property
    def n_classes(self) -> int:
        return self.bank.classes

    # ---- evaluation paths (no tape) ----

    def embed_np(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.apply_np(x)

    def head_logits_np(self, z: np.ndarray,
                       anchors: Optional[np.ndarray] = None) -> List[np.ndarray]:
        rows = anchors if anchors is not None else self.bank.snapshot()
        return [class_logits_np(z, h.theta, rows) for h in self.heads]

    def predict_np(self, x: np.ndarray,
                   anchors: Optional[np.ndarray] = None) -> np.ndarray:
        """Argmax of the softmax averaged over heads."""
        z = self.embed_np(x)
        logits = self.head_logits_np(z, anchors)
        probs = softmax_rows_np(logits[0])
        for q in logits[1:]:
            probs = probs + softmax_rows_np(q)
        return np.argmax(probs, axis=1).astype(np.int32)

    def discriminate_np(self, z: np.ndarray) -> np.ndarray:
        return expit(self.discriminator.apply_np(z))

    # ---- checkpoint parameter ordering ----

    def param_sections(self) -> Dict[str, np.ndarray]:
        """Canonical name -> array mapping: extractor, discriminator,
        prototypes, then each head's theta."""
        sections: Dict[str, np.ndarray] = {}
        for i, arr in enumerate(self.extractor.arrays()):
            sections[f"extractor.{i}"] = arr
        for i, arr in enumerate(self.discriminator.arrays()):
            sections[f"discriminator.{i}"] = arr
        sections["prototypes"] = self.bank.rows
        for k, head in enumerate(self.heads):
            sections[f"head{k}.theta"] = head.theta
        return sections

    def load_param_sections(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = [k for k in self.param_sections() if k not in arrays]
        if missing:
            raise ModelError(f"missing parameter section {missing[0]!r}")
        ext_n = 2 * len(self.extractor.weights)
        self.extractor.set_arrays([arrays[f"extractor.{i}"] for i in range(ext_n)])
        disc_n = 2 * len(self.discriminator.weights)
        self.discriminator.set_arrays(
            [arrays[f"discriminator.{i}"] for i in range(disc_n)]
        )
        rows = arrays["prototypes"]
        if rows.shape != self.bank.rows.shape:
            raise ModelError(
                f"prototype shape {rows.shape} != {self.bank.rows.shape}"
            )
        self.bank.rows = np.ascontiguousarray(rows, dtype=np.float64)
        for k, head in enumerate(self.heads):
            head.set_theta(arrays[f"head{k}.theta"])


def softmax_rows_np(q: np.ndarray) -> np.ndarray:
    e = np.exp(q - q.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def build_model(
    d_in: int,
    n_classes: int,
    rng: np.random.Generator,
    hidden: int = 256,
    embed_dim: int = 128,
    disc_hidden: int = 64,
    n_heads: int = 1,
    momentum_proto: float = 0.9,
) -> PaaModel:
    """Construct a model with the canonical initialization order
    (extractor, discriminator, then heads) from a single generator."""
    extractor = Mlp([d_in, hidden, embed_dim], rng)
    discriminator = Mlp([embed_dim, disc_hidden, 1], rng)
    bank = PrototypeBank(n_classes, embed_dim, momentum_proto)
    heads = [RalHead(embed_dim, rng) for _ in range(n_heads)]
    return PaaModel(extractor, discriminator, bank, heads)
