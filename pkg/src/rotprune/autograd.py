"""Tape-based reverse-mode differentiation over a small fixed set of matrix ops.

Every value on the tape is a 2-D float64 array. Scalars are 1×1 matrices and
reductions keep their reduced axis, so row sums are ``(m, 1)`` and column sums
``(1, n)``. Elementwise binary ops broadcast size-1 axes the numpy way.

Typical use::

    tape = Tape()
    a = tape.param(a0)
    loss = tape.sum(tape.square(tape.qr(a)))
    grads = backward(tape, loss)      # {a.id: dloss/da}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import entropy as _entropy
from . import linalg
from .errors import NonFiniteError, ShapeError


class Node:
    __slots__ = ("id", "value", "op", "inputs", "vjp", "aux")

    def __init__(self, id, value, op, inputs, vjp, aux=None):
        self.id = id
        self.value = value
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return np.sum(g, axis=axes, keepdims=True)


def _copyltu(m):
    return np.tril(m) + np.tril(m, -1).T


class Tape:
    """Records operations in execution order; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []

    def _push(self, value, op, inputs=(), vjp=None):
        node = Node(len(self.nodes), value, op, tuple(inputs), vjp)
        self.nodes.append(node)
        return node

    def _own(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise ValueError(f"{n!r} does not belong to this tape")

    # leaves

    def param(self, value) -> Node:
        node = self._push(linalg.as_matrix(value, "parameter").copy(), "param")
        self.leaves.append(node.id)
        return node

    def const(self, value) -> Node:
        return self._push(np.array(np.atleast_2d(value), dtype=np.float64), "const")

    # linear algebra

    def matmul(self, a, b):
        self._own(a, b)
        av, bv = a.value, b.value

        def vjp(g):
            return linalg.matmul(g, bv.T), linalg.matmul(av.T, g)

        return self._push(linalg.matmul(av, bv), "matmul", (a, b), vjp)

    def transpose(self, a):
        self._own(a)
        return self._push(linalg.transpose(a.value), "transpose", (a,), lambda g: (linalg.transpose(g),))

    def diag(self, a):
        """Diagonal of a square matrix as a ``(1, n)`` row."""
        self._own(a)
        n = a.value.shape[0]
        if a.value.shape != (n, n):
            raise ShapeError(f"diag needs a square matrix, got {a.value.shape}")

        def vjp(g):
            out = np.zeros((n, n))
            out[np.arange(n), np.arange(n)] = g[0]
            return (out,)

        return self._push(np.diag(a.value)[None, :].copy(), "diag", (a,), vjp)

    def qr(self, a):
        """Orthogonal factor of the positive-diagonal QR of ``a``.

        Only Q is exposed, so the backward pass assumes a zero cotangent on R.
        """
        self._own(a)
        f = linalg.qr_decompose(a.value)
        q, r = f.q, f.r

        def vjp(gq):
            m = -linalg.matmul(gq.T, q)
            b = gq + linalg.matmul(q, _copyltu(m))
            # b @ r^{-T}
            return (linalg.transpose(linalg.solve_upper(r, linalg.transpose(b))),)

        return self._push(q, "qr", (a,), vjp)

    def block_diag(self, blocks):
        self._own(*blocks)
        sizes = [b.value.shape[0] for b in blocks]
        for b in blocks:
            if b.value.shape[0] != b.value.shape[1]:
                raise ShapeError(f"block must be square, got {b.value.shape}")
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(
                np.ascontiguousarray(g[o:o + s, o:o + s]) for o, s in zip(offsets, sizes)
            )

        value = linalg.block_diag([b.value for b in blocks])
        return self._push(value, "block_diag", tuple(blocks), vjp)

    # elementwise

    def add(self, a, b):
        self._own(a, b)
        sa, sb = a.value.shape, b.value.shape
        return self._push(
            a.value + b.value, "add", (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def mul(self, a, b):
        self._own(a, b)
        av, bv = a.value, b.value
        return self._push(
            av * bv, "mul", (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def add_scalar(self, a, c: float):
        self._own(a)
        return self._push(a.value + c, "add_scalar", (a,), lambda g: (g,))

    def scale(self, a, c: float):
        self._own(a)
        return self._push(a.value * c, "scale", (a,), lambda g: (g * c,))

    def square(self, a):
        self._own(a)
        av = a.value
        return self._push(av * av, "square", (a,), lambda g: (2.0 * av * g,))

    def abs(self, a):
        self._own(a)
        av = a.value
        # subgradient 0 at 0
        return self._push(np.abs(av), "abs", (a,), lambda g: (np.sign(av) * g,))

    def reciprocal(self, a):
        self._own(a)
        out = 1.0 / a.value
        return self._push(out, "reciprocal", (a,), lambda g: (-g * out * out,))

    def exp(self, a):
        self._own(a)
        out = np.exp(a.value)
        return self._push(out, "exp", (a,), lambda g: (g * out,))

    def log(self, a):
        self._own(a)
        av = a.value
        return self._push(np.log(av), "log", (a,), lambda g: (g / av,))

    def xlogx(self, a):
        """``x * ln x`` with the convention ``0 ln 0 = 0`` (and zero gradient there)."""
        self._own(a)
        av = a.value
        pos = av > 0
        safe = np.where(pos, av, 1.0)
        out = np.where(pos, av * np.log(safe), 0.0)
        return self._push(out, "xlogx", (a,), lambda g: (np.where(pos, np.log(safe) + 1.0, 0.0) * g,))

    def sum(self, a, axis=None):
        """Sum over ``axis`` (0 → ``(1, n)``, 1 → ``(m, 1)``, None → ``(1, 1)``)."""
        self._own(a)
        shape = a.value.shape
        if axis is None:
            value = np.array([[np.sum(a.value)]])
        else:
            value = np.sum(a.value, axis=axis, keepdims=True)
        return self._push(value, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def entropy(self, a, layout, eps=1e-12):
        """Summed group entropy of non-negative scores ``a`` (fused forward and backward).

        ``node.aux`` holds the per-group entropies keyed by ``"rows"``/``"columns"``.
        """
        self._own(a)
        total, grad, groups = _entropy.entropy_value_and_grad(a.value, layout, eps)
        node = self._push(np.array([[total]]), "entropy", (a,), lambda g: (g[0, 0] * grad,))
        node.aux = groups
        return node


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every parameter leaf."""
    tape._own(loss)
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1×1, got {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or not node.inputs:
            continue
        if node.vjp is None:
            raise NotImplementedError(f"no gradient rule for op '{node.op}'")
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.op == "const":
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return {i: grads.get(i, np.zeros_like(tape.nodes[i].value)) for i in tape.leaves}


def value_and_grad(f: Callable[[Tape, Node], Node], a) -> tuple[float, np.ndarray]:
    tape = Tape()
    x = tape.param(a)
    loss = f(tape, x)
    return float(loss.value[0, 0]), backward(tape, loss)[x.id]


def _eval(f, a):
    tape = Tape()
    return float(f(tape, tape.const(a)).value[0, 0])


def check_gradient(f: Callable[[Tape, Node], Node], a, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Largest per-entry relative error between tape and central-difference gradients.

    ``f(tape, x)`` must build a scalar loss node from the input node ``x``.
    The error for each entry is ``|analytic - fd| / max(|fd|, floor)``; raise
    ``floor`` to the gradient's scale when near-zero entries would otherwise
    measure only finite-difference round-off.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    a = linalg.as_matrix(a, "gradient-check point")
    _, analytic = value_and_grad(f, a)
    worst = 0.0
    for idx in np.ndindex(a.shape):
        vals = []
        for sign in (1.0, -1.0):
            p = a.copy()
            p[idx] += sign * step
            v = _eval(f, p)
            if not np.isfinite(v):
                raise NonFiniteError(f"loss is non-finite when entry {idx} is perturbed by {sign * step:+g}")
            vals.append(v)
        fd = (vals[0] - vals[1]) / (2.0 * step)
        worst = max(worst, abs(analytic[idx] - fd) / max(abs(fd), floor))
    return worst


@dataclass
class AdamState:
    shape: tuple
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


def adam_step(state: AdamState, param, grad) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter and advances ``state``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != state.m.shape or grad.shape != param.shape:
        raise ShapeError(
            f"adam shapes disagree: state {state.m.shape}, param {param.shape}, grad {grad.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
