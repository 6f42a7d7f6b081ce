"""Train per-layer rotations that concentrate importance.

For each transformer layer, two orthogonal matrices are learned: ``R1`` on
the residual stream (hidden × hidden, optionally block-diagonal) and ``R2`` on
the attention value space (one head_dim × head_dim block per head). Each is
the Q factor of an unconstrained matrix ``A`` that Adam updates; starting from
``A = I`` the layer is initially untouched.

The loss is the summed entropy of normalized importance scores over every
normalization group of the seven linears that share the rotations.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import entropy as _entropy
from . import importance as imp
from . import linalg
from .autograd import AdamState, Node, Tape, adam_step, backward
from .errors import NonFiniteError, NumericalError, ShapeError
from .importance import Layout, Metric, RotationCase

LINEAR_CASES = {
    "q": RotationCase.RIGHT,
    "k": RotationCase.RIGHT,
    "v": RotationCase.TWO_SIDED_V,
    "o": RotationCase.TWO_SIDED_O,
    "gate": RotationCase.RIGHT,
    "up": RotationCase.RIGHT,
    "down": RotationCase.LEFT,
}
LINEAR_NAMES = tuple(LINEAR_CASES)

BOUND_TOL = 1e-12


def group_entropy(scores, layout, epsilon=1e-12):
    """Entropies of ``(s + ε) / (Σs + |G|ε)`` within each group, and their total.

    Returns ``(per_group, total)`` where ``per_group`` maps ``"rows"`` and/or
    ``"columns"`` to arrays of per-group entropies in nats. The two-sided
    layout contributes both passes to the total.
    """
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("group_entropy: scores must be non-negative")
    groups = _entropy.entropies(s, Layout(layout).value, epsilon)
    total = 0.0
    for key in ("rows", "columns"):
        if key in groups:
            total += float(np.sum(groups[key]))
    return groups, total


def make_block_diagonal(blocks, tol=1e-8) -> np.ndarray:
    """Assemble square orthogonal blocks along the diagonal."""
    mats = []
    for i, b in enumerate(blocks):
        b = linalg.as_matrix(b, f"block {i}")
        if b.shape[0] != b.shape[1]:
            raise ShapeError(f"block {i} is not square: {b.shape}")
        linalg.check_orthogonal(b, tol, f"block {i}")
        mats.append(b)
    if not mats:
        raise ShapeError("need at least one block")
    return linalg.block_diag(mats)


@dataclass
class LinearEntry:
    name: str
    weight: np.ndarray
    hessian: np.ndarray
    case: RotationCase
    h_inv: Optional[np.ndarray] = None


@dataclass
class LayerBundle:
    """The seven linears of one transformer layer, with their Hessians."""

    linears: list
    metric: Metric = Metric.OBD
    n_heads: int = 1
    damp: float = 0.01

    def __post_init__(self):
        self.metric = Metric(self.metric)
        names = [e.name for e in self.linears]
        if sorted(names) != sorted(LINEAR_NAMES):
            raise ShapeError(f"bundle must hold exactly {LINEAR_NAMES}, got {names}")
        for e in self.linears:
            e.case = RotationCase(e.case)
            if e.case is not LINEAR_CASES[e.name]:
                raise ShapeError(f"linear '{e.name}' must use case {LINEAR_CASES[e.name].value}")
            e.weight = linalg.as_matrix(e.weight, f"{e.name} weight")
            e.hessian = linalg.as_matrix(e.hessian, f"{e.name} hessian")
            if e.hessian.shape != (e.weight.shape[1],) * 2:
                raise ShapeError(f"{e.name}: hessian {e.hessian.shape} vs weight {e.weight.shape}")
            if self.metric is Metric.SPARSEGPT and e.h_inv is None:
                e.h_inv = linalg.cholesky_inverse(e.hessian, self.damp)
        if self.hidden % self.n_heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")

    @classmethod
    def from_layer(cls, weights: dict, hessians: dict, metric=Metric.OBD, n_heads=1, damp=0.01):
        return cls(
            [LinearEntry(n, weights[n], hessians[n], LINEAR_CASES[n]) for n in LINEAR_NAMES],
            metric=metric, n_heads=n_heads, damp=damp,
        )

    def __getitem__(self, name) -> LinearEntry:
        for e in self.linears:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def hidden(self) -> int:
        return self["q"].weight.shape[1]

    @property
    def value_dim(self) -> int:
        return self["v"].weight.shape[0]


@dataclass
class RotationPair:
    """Unconstrained parameters of ``R1`` (hidden space) and ``R2`` (per-head value space)."""

    a1_blocks: list
    a2_blocks: list

    @classmethod
    def identity(cls, hidden: int, n_heads: int, block_count: int = 1, value_dim=None):
        value_dim = hidden if value_dim is None else value_dim
        if block_count < 1 or hidden % block_count:
            raise ShapeError(f"hidden {hidden} is not divisible into {block_count} blocks")
        if value_dim % n_heads:
            raise ShapeError(f"value dim {value_dim} not divisible by {n_heads} heads")
        b, h = hidden // block_count, value_dim // n_heads
        return cls([np.eye(b) for _ in range(block_count)], [np.eye(h) for _ in range(n_heads)])

    @property
    def block_count(self) -> int:
        return len(self.a1_blocks)

    @property
    def n_heads(self) -> int:
        return len(self.a2_blocks)

    @property
    def hidden(self) -> int:
        return sum(b.shape[0] for b in self.a1_blocks)

    @property
    def value_dim(self) -> int:
        return sum(b.shape[0] for b in self.a2_blocks)

    @property
    def a1(self):
        return linalg.block_diag(self.a1_blocks)

    @property
    def a2(self):
        return linalg.block_diag(self.a2_blocks)

    @staticmethod
    def _orth(blocks):
        qs = [linalg.qr_decompose(b).q for b in blocks]
        return qs[0] if len(qs) == 1 else linalg.block_diag(qs)

    @property
    def q1(self):
        return self._orth(self.a1_blocks)

    @property
    def q2(self):
        return self._orth(self.a2_blocks)


def _assemble(tape, blocks):
    qs = [tape.qr(b) for b in blocks]
    return qs[0] if len(qs) == 1 else tape.block_diag(qs)


def build_loss(bundle: LayerBundle, pair: RotationPair, tape: Tape, epsilon=1e-12) -> Node:
    """Scalar entropy loss of ``bundle`` under ``pair``, recorded on ``tape``.

    The parameter leaves are registered in order: all ``a1`` blocks, then all
    ``a2`` blocks. Q factors are recomputed from the parameters on the tape.
    """
    if pair.hidden != bundle.hidden or pair.value_dim != bundle.value_dim:
        raise ShapeError("rotation pair does not match the bundle dimensions")
    p1 = [tape.param(b) for b in pair.a1_blocks]
    p2 = [tape.param(b) for b in pair.a2_blocks]
    q = {"r1": _assemble(tape, p1), "r2": _assemble(tape, p2)}
    qt = {k: tape.transpose(v) for k, v in q.items()}
    diag_cache: dict = {}

    def rotated_diag(mat, side):
        key = (id(mat), side)
        if key not in diag_cache:
            if side is None:
                diag_cache[key] = tape.const(np.diag(mat)[None, :])
            else:
                r = q[side]
                diag_cache[key] = tape.sum(tape.mul(r, tape.matmul(tape.const(mat), r)), axis=0)
        return diag_cache[key]

    total = None
    for e in bundle.linears:
        w = tape.const(e.weight)
        if e.case is RotationCase.RIGHT:
            wr = tape.matmul(w, q["r1"])
        elif e.case is RotationCase.LEFT:
            wr = tape.matmul(qt["r1"], w)
        elif e.case is RotationCase.TWO_SIDED_V:
            wr = tape.matmul(tape.matmul(qt["r2"], w), q["r1"])
        else:
            wr = tape.matmul(tape.matmul(qt["r1"], w), q["r2"])
        scores = tape.square(wr)
        side = e.case.input_rotation
        if bundle.metric in (Metric.OBD, Metric.WANDA):
            scores = tape.mul(scores, rotated_diag(e.hessian, side))
        elif bundle.metric is Metric.SPARSEGPT:
            scores = tape.mul(scores, tape.reciprocal(rotated_diag(e.h_inv, side)))
        ent = tape.entropy(scores, e.case.layout, epsilon)
        total = ent if total is None else tape.add(total, ent)
    return total


def bundle_scores(bundle: LayerBundle, pair: Optional[RotationPair] = None) -> dict:
    """Importance maps of every linear, rotated by ``pair`` when given."""
    out = {}
    if pair is None:
        for e in bundle.linears:
            m = bundle.metric
            if m is Metric.MAGNITUDE:
                s = imp.score_magnitude(e.weight, squared=True)
            elif m is Metric.WANDA:
                s = imp.score_wanda(e.weight, e.hessian, squared=True)
            elif m is Metric.OBD:
                s = imp.score_obd(e.weight, e.hessian)
            else:
                s = imp.score_sparsegpt(e.weight, e.h_inv)
            out[e.name] = imp.ImportanceMap(s.scores, m, e.case.layout)
        return out
    q1, q2 = pair.q1, pair.q2
    for e in bundle.linears:
        out[e.name] = imp.score_rotated(
            e.weight, e.hessian, e.case, q1, q2, bundle.metric, bundle.damp, h_inv=e.h_inv
        )
    return out


def bundle_entropy(bundle: LayerBundle, pair: Optional[RotationPair] = None, epsilon=1e-12) -> float:
    """Total loss value computed with the plain numpy scorers."""
    total = 0.0
    for name, smap in bundle_scores(bundle, pair).items():
        total += group_entropy(smap.scores, smap.layout, epsilon)[1]
    return total


def max_loss(bundle: LayerBundle) -> float:
    return float(sum(_entropy.max_entropy(e.weight.shape, e.case.layout) for e in bundle.linears))


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    seed: int = 0
    block_count: int = 1
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.epsilon < 0 or self.block_count < 1:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, step, loss, wall_ms):
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.steps)

    def rows(self):
        return list(zip(self.steps, self.losses, self.wall_ms))

    def write_csv(self, path, layer=None):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow((["layer"] if layer is not None else []) + ["step", "loss", "wall_ms"])
            for s, l, t in self.rows():
                writer.writerow(([layer] if layer is not None else []) + [s, repr(l), f"{t:.3f}"])


@dataclass
class StepInfo:
    step: int
    loss: float
    groups: list  # per linear: {"rows": ..., "columns": ...}
    orthogonality: float
    pair: RotationPair


def _check_bounds(step, node, shape):
    m, n = shape
    sizes = {"rows": n, "columns": m}
    for key, h in node.aux.items():
        hi = np.log(sizes[key]) + BOUND_TOL
        if np.any(h < -BOUND_TOL) or np.any(h > hi):
            raise NumericalError(f"step {step}: group entropy outside [0, ln|G|]")


def train_rotations(bundle: LayerBundle, config: TrainConfig = None,
                    on_step: Callable[[StepInfo], None] = None):
    """Minimize the bundle's entropy loss with Adam on the QR parameters.

    Returns ``(pair, trajectory)``. The trajectory has ``steps + 1`` points:
    the loss before each update, then the final loss. Weights and Hessians in
    the bundle are never modified.
    """
    config = config or TrainConfig()
    pair = RotationPair.identity(bundle.hidden, bundle.n_heads, config.block_count, bundle.value_dim)
    states = [AdamState(b.shape, lr=config.lr) for b in pair.a1_blocks + pair.a2_blocks]
    entropy_nodes_shapes = [e.weight.shape for e in bundle.linears]
    traj = Trajectory()
    t0 = time.perf_counter()
    for step in range(config.steps + 1):
        tape = Tape()
        loss = build_loss(bundle, pair, tape, config.epsilon)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {step}")
        ent_nodes = [n for n in tape.nodes if n.op == "entropy"]
        for node, shape in zip(ent_nodes, entropy_nodes_shapes):
            _check_bounds(step, node, shape)
        orth = max(
            linalg.orthogonality_error(n.value) for n in tape.nodes if n.op in ("qr",)
        )
        if orth > 1e-8:
            raise NumericalError(f"step {step}: rotation lost orthogonality ({orth:.2e})")
        traj.append(step, value, (time.perf_counter() - t0) * 1e3)
        if on_step is not None:
            on_step(StepInfo(step, value, [n.aux for n in ent_nodes], orth, pair))
        if step == config.steps:
            break
        grads = backward(tape, loss)
        new = [adam_step(st, tape.nodes[i].value, grads[i]) for st, i in zip(states, tape.leaves)]
        k = pair.block_count
        pair = RotationPair(new[:k], new[k:])
    return pair, traj
