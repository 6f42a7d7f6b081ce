"""Masks, mask-only pruning, and SparseGPT-style column-wise compensation.

Ties are always broken the same way: among equal scores the lower column
index (then the lower row index) is pruned first.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import NumericalError, ShapeError
from .importance import ImportanceMap


class PatternKind(str, enum.Enum):
    UNSTRUCTURED = "unstructured"
    N_OF_M = "n-of-m"


class ComparisonGroup(str, enum.Enum):
    PER_ROW = "per-row"
    PER_LAYER = "per-layer"


@dataclass(frozen=True)
class SparsityPattern:
    kind: PatternKind
    ratio: float = 0.0
    n: int = 0
    m: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        if self.kind is PatternKind.UNSTRUCTURED:
            if not 0.0 <= self.ratio <= 1.0:
                raise ValueError(f"sparsity ratio must be in [0, 1], got {self.ratio}")
        elif not 0 < self.n < self.m:
            raise ValueError(f"n:m pattern needs 0 < n < m, got {self.n}:{self.m}")

    @classmethod
    def unstructured(cls, ratio):
        return cls(PatternKind.UNSTRUCTURED, ratio=float(ratio))

    @classmethod
    def n_of_m(cls, n, m):
        return cls(PatternKind.N_OF_M, n=int(n), m=int(m))

    @classmethod
    def parse(cls, text, ratio=0.5):
        """``"unstructured"`` or ``"N:M"``."""
        text = text.strip()
        if text == "unstructured":
            return cls.unstructured(ratio)
        try:
            n, m = (int(x) for x in text.split(":"))
        except ValueError:
            raise ValueError(f"bad sparsity pattern {text!r}; expected 'unstructured' or 'N:M'")
        return cls.n_of_m(n, m)

    def __str__(self):
        if self.kind is PatternKind.UNSTRUCTURED:
            return f"unstructured({self.ratio:g})"
        return f"{self.n}:{self.m}"


def kept_per_row(cols, ratio) -> int:
    # guard against 10 * 0.7 = 7.000000000000001
    return min(cols, math.ceil(cols * (1.0 - ratio) - 1e-9))


@dataclass
class PruneMask:
    keep: np.ndarray
    pattern: SparsityPattern
    group: ComparisonGroup = ComparisonGroup.PER_ROW

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        self.group = ComparisonGroup(self.group)

    @property
    def shape(self):
        return self.keep.shape

    @property
    def pruned(self):
        return ~self.keep

    def validate(self):
        """Raise if the mask breaks its pattern."""
        rows, cols = self.keep.shape
        p = self.pattern
        if p.kind is PatternKind.N_OF_M:
            if cols % p.m:
                raise ShapeError(f"{cols} columns are not divisible by m={p.m}")
            counts = self.keep.reshape(rows, cols // p.m, p.m).sum(axis=2)
            if np.any(counts > p.n):
                raise ValueError(f"mask keeps more than {p.n} of {p.m} in some group")
        elif self.group is ComparisonGroup.PER_ROW:
            want = kept_per_row(cols, p.ratio)
            if np.any(self.keep.sum(axis=1) != want):
                raise ValueError(f"every row must keep exactly {want} entries")
        else:
            want = min(rows * cols, math.ceil(rows * cols * (1.0 - p.ratio) - 1e-9))
            if int(self.keep.sum()) != want:
                raise ValueError(f"mask must keep exactly {want} entries")
        return self


def _scores(s):
    return s.scores if isinstance(s, ImportanceMap) else np.asarray(s, dtype=np.float64)


def mask_unstructured(s, ratio, group=ComparisonGroup.PER_ROW) -> PruneMask:
    """Prune the lowest-scoring ``ratio`` of entries within each comparison group."""
    scores = _scores(s)
    group = ComparisonGroup(group)
    pattern = SparsityPattern.unstructured(ratio)
    rows, cols = scores.shape
    keep = np.ones((rows, cols), dtype=bool)
    if group is ComparisonGroup.PER_ROW:
        n_prune = cols - kept_per_row(cols, ratio)
        order = np.argsort(scores, axis=1, kind="stable")[:, :n_prune]
        np.put_along_axis(keep, order, False, axis=1)
    else:
        total = rows * cols
        n_prune = total - min(total, math.ceil(total * (1.0 - ratio) - 1e-9))
        r_idx, c_idx = np.indices((rows, cols))
        order = np.lexsort((r_idx.ravel(), c_idx.ravel(), scores.ravel()))[:n_prune]
        keep.ravel()[order] = False
    return PruneMask(keep, pattern, group)


def mask_nm(s, n, m) -> PruneMask:
    """Keep the ``n`` highest scores in every aligned run of ``m`` input columns."""
    scores = _scores(s)
    rows, cols = scores.shape
    pattern = SparsityPattern.n_of_m(n, m)
    if cols % m:
        raise ShapeError(f"{cols} columns are not divisible by m={m}")
    grouped = scores.reshape(rows, cols // m, m)
    keep = np.ones(grouped.shape, dtype=bool)
    order = np.argsort(grouped, axis=2, kind="stable")[:, :, : m - n]
    np.put_along_axis(keep, order, False, axis=2)
    return PruneMask(keep.reshape(rows, cols), pattern)


def make_mask(s, pattern: SparsityPattern, group=ComparisonGroup.PER_ROW) -> PruneMask:
    if pattern.kind is PatternKind.N_OF_M:
        return mask_nm(s, pattern.n, pattern.m)
    return mask_unstructured(s, pattern.ratio, group)


def prune_simple(w, mask: PruneMask) -> np.ndarray:
    w = linalg.as_matrix(w, "weight")
    if w.shape != mask.shape:
        raise ShapeError(f"weight {w.shape} and mask {mask.shape} disagree")
    return np.where(mask.keep, w, 0.0)


def output_deviation(w, w_hat, h) -> float:
    """Exact ``‖W X − Ŵ X‖²_F = tr((W − Ŵ) H (W − Ŵ)ᵀ)``."""
    w = linalg.as_matrix(w, "weight")
    w_hat = linalg.as_matrix(w_hat, "pruned weight")
    if w.shape != w_hat.shape:
        raise ShapeError(f"weight {w.shape} and pruned weight {w_hat.shape} disagree")
    h = linalg.check_symmetric(h, "hessian")
    if h.shape[0] != w.shape[1]:
        raise ShapeError(f"hessian {h.shape} does not match weight {w.shape}")
    d = w - w_hat
    return float(np.sum(linalg.matmul(d, h) * d))


def prune_sparsegpt(w, h, pattern: SparsityPattern, block_size=1, damp=0.01, mask=None,
                    group=ComparisonGroup.PER_ROW, mask_block=None):
    """Prune column by column, pushing each pruned weight's error onto later columns.

    For pruned entry ``(i, j)`` every later column ``k`` of row ``i`` receives
    ``-w_ij · U_jk / U_jj`` where ``U`` is the upper Cholesky factor of
    ``(H + λI)⁻¹``; this equals the OBS update ``-w_ij · [H_F⁻¹]_jk / [H_F⁻¹]_jj``
    for the Hessian restricted to the not-yet-processed columns.

    Masks come from ``mask`` when given. Otherwise they are chosen on the
    fly from the current weights with scores ``w² / U_jj²``: for n:m at the
    first column of each aligned group, for unstructured at the first column
    of each ``mask_block`` columns (default: the whole row, chosen once).
    ``block_size`` batches the updates and does not change the result beyond
    rounding. Returns ``(pruned_weight, PruneMask)``.
    """
    w = linalg.as_matrix(w, "weight").copy()
    rows, cols = w.shape
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    h = linalg.check_symmetric(h, "hessian")
    if h.shape != (cols, cols):
        raise ShapeError(f"hessian {h.shape} does not match weight {w.shape}")
    u = np.ascontiguousarray(linalg.cholesky(linalg.cholesky_inverse(h, damp), damp).T)
    if mask is not None:
        if mask.shape != w.shape:
            raise ShapeError(f"mask {mask.shape} does not match weight {w.shape}")
        keep = mask.keep.copy()
        pattern = mask.pattern
        window = None
    else:
        keep = np.ones((rows, cols), dtype=bool)
        if pattern.kind is PatternKind.N_OF_M:
            if cols % pattern.m:
                raise ShapeError(f"{cols} columns are not divisible by m={pattern.m}")
            window = pattern.m
        else:
            window = mask_block or cols
    diag = np.diag(u)

    for i1 in range(0, cols, block_size):
        i2 = min(i1 + block_size, cols)
        w1 = w[:, i1:i2].copy()
        err = np.zeros((rows, i2 - i1))
        for j in range(i1, i2):
            if window is not None and j % window == 0:
                end = min(j + window, cols)
                if j != i1 and end > i2:
                    raise ValueError(
                        f"mask window [{j}, {end}) crosses update block [{i1}, {i2}); "
                        "align block_size with the mask window"
                    )
                cur = np.concatenate([w1[:, j - i1:], w[:, i2:end]], axis=1)[:, : end - j]
                s = cur * cur / (diag[j:end] ** 2)[None, :]
                if pattern.kind is PatternKind.N_OF_M:
                    keep[:, j:end] = mask_nm(s, pattern.n, pattern.m).keep
                else:
                    keep[:, j:end] = mask_unstructured(s, pattern.ratio, group).keep
            c = j - i1
            d = u[j, j]
            if not d > 0:
                raise NumericalError(f"singular inverse-hessian pivot at column {j}")
            col = w1[:, c]
            e = np.where(keep[:, j], 0.0, col) / d
            w1[:, c] = np.where(keep[:, j], col, 0.0)
            w1[:, c + 1:] -= np.outer(e, u[j, j + 1:i2])
            err[:, c] = e
        w[:, i1:i2] = w1
        w[:, i2:] -= linalg.matmul(err, u[i1:i2, i2:])
    final = PruneMask(keep, pattern, group)
    w[~keep] = 0.0
    return w, final


def export_mask(mask: PruneMask) -> bytes:
    """8-byte header (rows, cols as little-endian u32) then row-major packed bits, MSB first."""
    rows, cols = mask.shape
    return struct.pack("<II", rows, cols) + np.packbits(mask.keep.ravel()).tobytes()


def import_mask(data: bytes, pattern=None) -> np.ndarray:
    rows, cols = struct.unpack_from("<II", data, 0)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=8), count=rows * cols)
    return bits.astype(bool).reshape(rows, cols)
