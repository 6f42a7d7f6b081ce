"""Per-weight importance scores, before and after orthogonal rotation.

Weights are stored ``(d_out, d_in)`` and act on column inputs, ``Y = W X``.
The Hessian proxy of a linear layer is ``H = X Xᵀ`` over its calibration
inputs, shape ``(d_in, d_in)``.

A linear layer inside a rotated transformer block sees one of four
rotation cases. With ``R1`` the residual-stream rotation and ``R2`` the
value-space rotation:

=============  ===================  ===================
case           rotated weight       rotated Hessian
=============  ===================  ===================
right-only     ``W R1``             ``R1ᵀ H R1``
left-only      ``R1ᵀ W``            ``H``
two-sided-V    ``R2ᵀ W R1``         ``R1ᵀ H R1``
two-sided-O    ``R1ᵀ W R2``         ``R2ᵀ H R2``
=============  ===================  ===================

Rotated scores use squared magnitudes throughout (``W'²``, ``W'² · H'_jj``,
``W'² / (H'^-1)_jj``). Squaring is monotone, so rankings match the plain
Magnitude and Wanda scores; pass ``squared=True`` to the unrotated scorers to
get the same convention.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numba
import numpy as np

from . import linalg
from .errors import RotPruneError, ShapeError


class Metric(str, enum.Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"
    OBD = "obd"
    SPARSEGPT = "sparsegpt"


class Layout(str, enum.Enum):
    ROWS = "rows"
    COLUMNS = "columns"
    BOTH = "rows-and-columns"


class RotationCase(str, enum.Enum):
    RIGHT = "right-only"
    LEFT = "left-only"
    TWO_SIDED_V = "two-sided-V"
    TWO_SIDED_O = "two-sided-O"

    @property
    def layout(self) -> Layout:
        # right rotation mixes within a row, left rotation within a column
        if self is RotationCase.RIGHT:
            return Layout.ROWS
        if self is RotationCase.LEFT:
            return Layout.COLUMNS
        return Layout.BOTH

    @property
    def input_rotation(self):
        """Which rotation acts on this layer's input: ``"r1"``, ``"r2"`` or None."""
        return {
            RotationCase.RIGHT: "r1",
            RotationCase.LEFT: None,
            RotationCase.TWO_SIDED_V: "r1",
            RotationCase.TWO_SIDED_O: "r2",
        }[self]


@dataclass
class ImportanceMap:
    scores: np.ndarray
    metric: Metric
    layout: Layout = Layout.ROWS

    def __post_init__(self):
        self.metric = Metric(self.metric)
        self.layout = Layout(self.layout)
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("importance scores must be finite and non-negative")

    @property
    def shape(self):
        return self.scores.shape


class SealedError(RotPruneError):
    pass


@numba.njit(cache=True)
def _accumulate_outer(h, x):
    d, n = x.shape
    for k in range(n):
        for i in range(d):
            xi = x[i, k]
            for j in range(d):
                h[i, j] += xi * x[j, k]


class CalibStats:
    """Running ``H = X Xᵀ`` for one linear layer plus the number of samples seen."""

    def __init__(self, d_in: int):
        self.hessian = np.zeros((d_in, d_in))
        self.count = 0
        self.sealed = False

    @property
    def d_in(self):
        return self.hessian.shape[0]

    def seal(self):
        self.sealed = True
        self.hessian.setflags(write=False)
        return self

    def __repr__(self):
        return f"CalibStats(d_in={self.d_in}, count={self.count}, sealed={self.sealed})"


def accumulate_hessian(stats: CalibStats, x_batch) -> CalibStats:
    """Add ``X Xᵀ`` for a ``(d_in, n_samples)`` batch.

    Samples are folded in one at a time, in order, so splitting a batch never
    changes the result.
    """
    if stats.sealed:
        raise SealedError("calibration statistics are sealed; no further accumulation")
    x = linalg.as_matrix(x_batch, "calibration batch")
    if x.shape[0] != stats.d_in:
        raise ShapeError(f"batch has {x.shape[0]} rows but the statistics expect {stats.d_in}")
    _accumulate_outer(stats.hessian, x)
    stats.count += x.shape[1]
    return stats


def _diag_of(h, d_in):
    h = linalg.as_matrix(h, "hessian")
    if h.shape != (d_in, d_in):
        raise ShapeError(f"hessian shape {h.shape} does not match weight input dim {d_in}")
    return np.diag(h).copy()


def score_magnitude(w, squared=False, layout=Layout.ROWS) -> ImportanceMap:
    w = linalg.as_matrix(w, "weight")
    return ImportanceMap(w * w if squared else np.abs(w), Metric.MAGNITUDE, layout)


def score_obd(w, h, layout=Layout.ROWS) -> ImportanceMap:
    """``W_ij² · H_jj``."""
    w = linalg.as_matrix(w, "weight")
    d = _diag_of(h, w.shape[1])
    return ImportanceMap(w * w * d[None, :], Metric.OBD, layout)


def score_wanda(w, h, squared=False, layout=Layout.ROWS) -> ImportanceMap:
    """``|W_ij| · ‖X_j‖`` with ``‖X_j‖ = sqrt(H_jj)``; squared gives the OBD form."""
    w = linalg.as_matrix(w, "weight")
    d = _diag_of(h, w.shape[1])
    if np.any(d < 0):
        raise ValueError(f"hessian diagonal has a negative entry at {int(np.argmax(d < 0))}")
    if squared:
        return ImportanceMap(w * w * d[None, :], Metric.WANDA, layout)
    return ImportanceMap(np.abs(w) * np.sqrt(d)[None, :], Metric.WANDA, layout)


def score_sparsegpt(w, h_inv, layout=Layout.ROWS) -> ImportanceMap:
    """``W_ij² / (H⁻¹)_jj``."""
    w = linalg.as_matrix(w, "weight")
    d = _diag_of(h_inv, w.shape[1])
    if np.any(d <= 0):
        raise ValueError(f"inverse-hessian diagonal is non-positive at {int(np.argmax(d <= 0))}")
    return ImportanceMap(w * w / d[None, :], Metric.SPARSEGPT, layout)


def rotate_weight(w, case, r1, r2=None) -> np.ndarray:
    case = RotationCase(case)
    mm = linalg.matmul
    if case is RotationCase.RIGHT:
        return mm(w, r1)
    if case is RotationCase.LEFT:
        return mm(r1.T, w)
    if case is RotationCase.TWO_SIDED_V:
        return mm(mm(r2.T, w), r1)
    return mm(mm(r1.T, w), r2)


def rotate_hessian(h, case, r1, r2=None) -> np.ndarray:
    """Hessian of the rotated input; ``h`` may equally be an inverse Hessian."""
    side = RotationCase(case).input_rotation
    if side is None:
        return np.array(h, dtype=np.float64)
    r = r1 if side == "r1" else r2
    return linalg.matmul(linalg.matmul(r.T, h), r)


def _check_rotations(w, case, r1, r2, tol):
    case = RotationCase(case)
    d_out, d_in = w.shape
    r1 = linalg.check_orthogonal(r1, tol, "r1")
    need = {
        RotationCase.RIGHT: (d_in, None),
        RotationCase.LEFT: (d_out, None),
        RotationCase.TWO_SIDED_V: (d_in, d_out),
        RotationCase.TWO_SIDED_O: (d_out, d_in),
    }[case]
    if r1.shape[0] != need[0]:
        raise ShapeError(f"{case.value}: r1 is {r1.shape} but weight is {w.shape}")
    if need[1] is not None:
        if r2 is None:
            raise ShapeError(f"{case.value} needs r2")
        r2 = linalg.check_orthogonal(r2, tol, "r2")
        if r2.shape[0] != need[1]:
            raise ShapeError(f"{case.value}: r2 is {r2.shape} but weight is {w.shape}")
    return case, r1, r2


def score_rotated(w, h, case, r1, r2=None, metric=Metric.OBD, damp=0.01, h_inv=None,
                  tol=1e-8) -> ImportanceMap:
    """Importance of the rotated weight under ``metric`` (squared convention).

    ``h`` is the Hessian of the unrotated input; the rotated Hessian is derived
    from it and never re-estimated. For SparseGPT, ``h_inv`` may be supplied to
    reuse an existing dampened inverse.
    """
    w = linalg.as_matrix(w, "weight")
    case, r1, r2 = _check_rotations(w, case, r1, r2, tol)
    metric = Metric(metric)
    wr = rotate_weight(w, case, r1, r2)
    layout = case.layout
    if metric is Metric.MAGNITUDE:
        return ImportanceMap(wr * wr, metric, layout)
    if metric is Metric.SPARSEGPT:
        if h_inv is None:
            h_inv = linalg.cholesky_inverse(h, damp)
        d = np.diag(rotate_hessian(h_inv, case, r1, r2))
        if np.any(d <= 0):
            raise ValueError("rotated inverse-hessian diagonal is non-positive")
        return ImportanceMap(wr * wr / d[None, :], metric, layout)
    hr = rotate_hessian(h, case, r1, r2)
    d = np.maximum(np.diag(hr), 0.0)
    return ImportanceMap(wr * wr * d[None, :], metric, layout)


def total_quadratic(w, h) -> float:
    """``tr(W H Wᵀ)``, the output energy ``‖W X‖²_F``."""
    return float(np.trace(linalg.matmul(linalg.matmul(w, h), np.transpose(w))))
