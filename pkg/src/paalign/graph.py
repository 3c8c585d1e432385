"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A Graph is a tape: every operation appends a node holding its value and a
backward closure.  backward() seeds the root with 1 and walks the tape in
reverse, accumulating gradients.  Only rank-2 tensors exist; scalars are 1x1.
The op set is deliberately small - just what the training losses need - plus
two fused ops (gauss_gram, pair_bce) whose forward/backward pairs live in the
kernels backend.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import _kernels

__all__ = ["Graph", "Node", "GraphError"]


class GraphError(ValueError):
    """Structural misuse of the tape: bad shapes, bad domains, mixed graphs."""


def _as_matrix(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 1:
        raise GraphError(f"expected a 2-D array, got 1-D of shape {arr.shape}")
    if arr.ndim != 2:
        raise GraphError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


def _acc(grads, node, delta):
    if grads[node.idx] is None:
        grads[node.idx] = delta
    else:
        grads[node.idx] = grads[node.idx] + delta


class Node:
    __slots__ = ("graph", "idx", "value", "_parents", "_bwd")

    def __init__(self, graph, idx, value, parents, bwd):
        self.graph = graph
        self.idx = idx
        self.value = value
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def _peer(self, other) -> "Node":
        if not isinstance(other, Node):
            raise GraphError(f"expected a Node operand, got {type(other).__name__}")
        if other.graph is not self.graph:
            raise GraphError("operands belong to different graphs")
        return other

    # ---- binary ops ----

    def __matmul__(self, other) -> "Node":
        other = self._peer(other)
        a, b = self.value, other.value
        if a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = a @ b

        def bwd(g, grads):
            _acc(grads, self, g @ b.T)
            _acc(grads, other, a.T @ g)

        return self.graph._record(out, (self, other), bwd)

    def __add__(self, other) -> "Node":
        other = self._peer(other)
        a, b = self.value, other.value
        if a.shape == b.shape:
            def bwd(g, grads):
                _acc(grads, self, g)
                _acc(grads, other, g)
        elif b.shape == (1, a.shape[1]):
            def bwd(g, grads):
                _acc(grads, self, g)
                _acc(grads, other, g.sum(axis=0, keepdims=True))
        elif a.shape == (1, b.shape[1]):
            def bwd(g, grads):
                _acc(grads, self, g.sum(axis=0, keepdims=True))
                _acc(grads, other, g)
        else:
            raise GraphError(f"add shape mismatch: {a.shape} + {b.shape}")
        return self.graph._record(a + b, (self, other), bwd)

    def __sub__(self, other) -> "Node":
        other = self._peer(other)
        a, b = self.value, other.value
        if a.shape != b.shape:
            raise GraphError(f"sub shape mismatch: {a.shape} - {b.shape}")

        def bwd(g, grads):
            _acc(grads, self, g)
            _acc(grads, other, -g)

        return self.graph._record(a - b, (self, other), bwd)

    def __mul__(self, other) -> "Node":
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        other = self._peer(other)
        a, b = self.value, other.value
        if a.shape != b.shape:
            raise GraphError(f"mul shape mismatch: {a.shape} * {b.shape}")

        def bwd(g, grads):
            _acc(grads, self, g * b)
            _acc(grads, other, g * a)

        return self.graph._record(a * b, (self, other), bwd)

    def __rmul__(self, other) -> "Node":
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return NotImplemented

    def div(self, other) -> "Node":
        """Elementwise division; the divisor may be a column to broadcast."""
        other = self._peer(other)
        a, b = self.value, other.value
        column = b.shape == (a.shape[0], 1) and a.shape[1] != 1
        if a.shape != b.shape and not column:
            raise GraphError(f"div shape mismatch: {a.shape} / {b.shape}")
        if np.any(b == 0.0):
            raise GraphError("division by zero; clamp the divisor first")
        out = a / b

        if column:
            def bwd(g, grads):
                _acc(grads, self, g / b)
                _acc(grads, other, -(g * a).sum(axis=1, keepdims=True) / (b * b))
        else:
            def bwd(g, grads):
                _acc(grads, self, g / b)
                _acc(grads, other, -g * a / (b * b))

        return self.graph._record(out, (self, other), bwd)

    # ---- scalar-parameter ops ----

    def scale(self, c: float) -> "Node":
        c = float(c)
        if not np.isfinite(c):
            raise GraphError(f"scale factor must be finite, got {c}")

        def bwd(g, grads):
            _acc(grads, self, g * c)

        return self.graph._record(self.value * c, (self,), bwd)

    def addc(self, c: float) -> "Node":
        c = float(c)
        if not np.isfinite(c):
            raise GraphError(f"added constant must be finite, got {c}")

        def bwd(g, grads):
            _acc(grads, self, g)

        return self.graph._record(self.value + c, (self,), bwd)

    def __neg__(self) -> "Node":
        def bwd(g, grads):
            _acc(grads, self, -g)

        return self.graph._record(-self.value, (self,), bwd)

    def clamp(self, lo: float, hi: float) -> "Node":
        lo, hi = float(lo), float(hi)
        if not lo < hi:
            raise GraphError(f"clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")
        a = self.value
        out = np.clip(a, lo, hi)
        # gradient passes on the closed interval
        gate = ((a >= lo) & (a <= hi)).astype(np.float64)

        def bwd(g, grads):
            _acc(grads, self, g * gate)

        return self.graph._record(out, (self,), bwd)

    def grl(self, coeff: float) -> "Node":
        """Gradient reversal: identity forward, -coeff times gradient backward."""
        coeff = float(coeff)
        if not np.isfinite(coeff) or coeff < 0.0:
            raise GraphError(f"grl coefficient must be finite and >= 0, got {coeff}")

        def bwd(g, grads):
            _acc(grads, self, g * (-coeff))

        return self.graph._record(self.value, (self,), bwd)

    # ---- elementwise nonlinearities ----

    def relu(self) -> "Node":
        a = self.value
        out = np.maximum(a, 0.0)
        gate = (a > 0.0).astype(np.float64)

        def bwd(g, grads):
            _acc(grads, self, g * gate)

        return self.graph._record(out, (self,), bwd)

    def sigmoid(self) -> "Node":
        out = expit(self.value)

        def bwd(g, grads):
            _acc(grads, self, g * out * (1.0 - out))

        return self.graph._record(out, (self,), bwd)

    def log(self) -> "Node":
        a = self.value
        if np.min(a) <= 0.0:
            raise GraphError(
                f"log domain error: min value {np.min(a)!r}; clamp positive first"
            )

        def bwd(g, grads):
            _acc(grads, self, g / a)

        return self.graph._record(np.log(a), (self,), bwd)

    def exp(self) -> "Node":
        out = np.exp(self.value)

        def bwd(g, grads):
            _acc(grads, self, g * out)

        return self.graph._record(out, (self,), bwd)

    def softmax_rows(self) -> "Node":
        a = self.value
        e = np.exp(a - a.max(axis=1, keepdims=True))
        out = e / e.sum(axis=1, keepdims=True)

        def bwd(g, grads):
            inner = (g * out).sum(axis=1, keepdims=True)
            _acc(grads, self, out * (g - inner))

        return self.graph._record(out, (self,), bwd)

    # ---- reductions / structure ----

    def sum(self) -> "Node":
        a = self.value

        def bwd(g, grads):
            _acc(grads, self, np.full(a.shape, g[0, 0]))

        return self.graph._record(np.array([[a.sum()]]), (self,), bwd)

    def mean(self) -> "Node":
        a = self.value
        inv = 1.0 / a.size

        def bwd(g, grads):
            _acc(grads, self, np.full(a.shape, g[0, 0] * inv))

        return self.graph._record(np.array([[a.mean()]]), (self,), bwd)

    def l2norm_rows(self) -> "Node":
        a = self.value
        out = np.sqrt((a * a).sum(axis=1, keepdims=True))
        # all-zero rows have zero numerator, so the guarded quotient stays 0
        safe = np.maximum(out, 1e-300)

        def bwd(g, grads):
            _acc(grads, self, g * (a / safe))

        return self.graph._record(out, (self,), bwd)

    @property
    def T(self) -> "Node":
        def bwd(g, grads):
            _acc(grads, self, g.T)

        return self.graph._record(np.ascontiguousarray(self.value.T), (self,), bwd)


class Graph:
    """Operation tape.  Build leaves with tensor(), run ops, call backward()."""

    def __init__(self):
        self._nodes: list = []
        self._grads: list = []

    def __len__(self) -> int:
        return len(self._nodes)

    def tensor(self, value) -> Node:
        """A leaf node.  The array is copied to float64 C-order if needed."""
        node = Node(self, len(self._nodes), _as_matrix(value), (), None)
        self._nodes.append(node)
        return node

    def _record(self, value, parents, bwd) -> Node:
        node = Node(self, len(self._nodes), value, parents, bwd)
        self._nodes.append(node)
        return node

    # ---- multi-input composites ----

    def concat_rows(self, a: Node, b: Node) -> Node:
        a._peer(b)
        if a.graph is not self:
            raise GraphError("node belongs to a different graph")
        va, vb = a.value, b.value
        if va.shape[1] != vb.shape[1]:
            raise GraphError(
                f"concat_rows width mismatch: {va.shape} vs {vb.shape}"
            )
        n = va.shape[0]

        def bwd(g, grads):
            _acc(grads, a, g[:n])
            _acc(grads, b, g[n:])

        return self._record(np.concatenate([va, vb], axis=0), (a, b), bwd)

    def gauss_gram(
        self,
        x: Node,
        multipliers: Sequence[float],
        h: Optional[float] = None,
    ) -> Tuple[Node, float]:
        """Multi-bandwidth Gaussian gram matrix of the rows of x.

        The bandwidth h defaults to the median of the off-diagonal squared
        distances (1.0 when that median is not positive) and is treated as a
        constant: no gradient flows through it.  Returns (gram_node, h).
        """
        if x.graph is not self:
            raise GraphError("node belongs to a different graph")
        if not multipliers:
            raise GraphError("multiplier set must be non-empty")
        for m in multipliers:
            if not (np.isfinite(m) and m > 0.0):
                raise GraphError(f"multipliers must be finite and > 0, got {m}")
        a = x.value
        d2 = _kernels.pairwise_sqdist(a)
        if h is None:
            h = _kernels.median_bandwidth(d2)
        h = float(h)
        if not (np.isfinite(h) and h > 0.0):
            raise GraphError(f"bandwidth must be finite and > 0, got {h}")
        k, w = _kernels.gauss_forward(d2, h, tuple(multipliers))

        def bwd(g, grads):
            s = g * w
            s = s + s.T
            dx = 2.0 * (s.sum(axis=1, keepdims=True) * a - s @ a)
            _acc(grads, x, dx)

        return self._record(k, (x,), bwd), h

    def pair_bce(self, phi: Node, mu, mask, eps: float = 1e-7) -> Node:
        """Mean BCE over masked pairs of cosine scores.

        mu and mask are constant 0/1 matrices the same shape as phi; an empty
        mask gives a zero loss with zero gradient.
        """
        if phi.graph is not self:
            raise GraphError("node belongs to a different graph")
        mu = _as_matrix(mu)
        mask = _as_matrix(mask)
        if mu.shape != phi.shape or mask.shape != phi.shape:
            raise GraphError(
                f"pair_bce shape mismatch: phi {phi.shape}, mu {mu.shape}, "
                f"mask {mask.shape}"
            )
        eps = float(eps)
        if not 0.0 < eps < 0.5:
            raise GraphError(f"pair_bce eps must lie in (0, 0.5), got {eps}")
        loss, dphi = _kernels.pair_bce(phi.value, mu, mask, eps)

        def bwd(g, grads):
            _acc(grads, phi, g[0, 0] * dphi)

        return self._record(np.array([[loss]]), (phi,), bwd)

    # ---- differentiation ----

    def backward(self, root: Node) -> None:
        if root.graph is not self:
            raise GraphError("backward root belongs to a different graph")
        if root.value.shape != (1, 1):
            raise GraphError(
                f"backward root must be a 1x1 scalar, got shape {root.value.shape}"
            )
        grads = [None] * len(self._nodes)
        grads[root.idx] = np.ones((1, 1))
        for node in reversed(self._nodes[: root.idx + 1]):
            g = grads[node.idx]
            if g is None or node._bwd is None:
                continue
            node._bwd(g, grads)
        self._grads = grads

    def grad(self, node: Node) -> np.ndarray:
        """Gradient of the last backward() root wrt node (zeros if unreached)."""
        if node.graph is not self:
            raise GraphError("node belongs to a different graph")
        if not self._grads:
            raise GraphError("backward() has not been run on this graph")
        g = self._grads[node.idx] if node.idx < len(self._grads) else None
        if g is None:
            return np.zeros_like(node.value)
        return g
