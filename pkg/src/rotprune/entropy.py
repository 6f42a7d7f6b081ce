"""Shannon entropy of importance scores normalized within groups.

Values are summed sequentially in sorted order, so reordering the members
of a group leaves its entropy bit-identical.
"""
from __future__ import annotations

import numpy as np


def _ordered_sum(x):
    # np.sum's pairwise SIMD reduction depends on memory alignment; cumsum does not
    return np.cumsum(np.sort(x, axis=1), axis=1)[:, -1]


def _row_entropies(s, eps):
    # s: (groups, members), one group per row
    n = s.shape[1]
    z = _ordered_sum(s)[:, None] + n * eps
    safe_z = np.where(z > 0, z, 1.0)
    p = np.where(z > 0, (s + eps) / safe_z, 1.0 / n)
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, -p * logp, 0.0)
    # a non-finite score must not vanish into a zero term
    h = np.where(np.isfinite(z[:, 0]), _ordered_sum(terms), np.nan)
    return h, p, logp, pos, safe_z


def entropies(scores, layout, eps=1e-12):
    """Per-group entropies in nats: ``{"rows": (m,), "columns": (n,)}`` as the layout requires."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    layout = getattr(layout, "value", layout)
    out = {}
    if layout in ("rows", "rows-and-columns"):
        out["rows"] = _row_entropies(s, eps)[0]
    if layout in ("columns", "rows-and-columns"):
        out["columns"] = _row_entropies(s.T, eps)[0]
    if not out:
        raise ValueError(f"unknown layout {layout!r}")
    return out


def entropy_value_and_grad(scores, layout, eps=1e-12):
    """Total entropy over all groups and its gradient with respect to the scores.

    For one group with ``p = (s + eps) / Z``, ``dH/ds_k = -(ln p_k + H) / Z``;
    members with ``p_k = 0`` get zero gradient.
    """
    s = np.asarray(scores, dtype=np.float64)
    layout = getattr(layout, "value", layout)
    total = 0.0
    grad = np.zeros_like(s)
    groups = {}
    passes = []
    if layout in ("rows", "rows-and-columns"):
        passes.append(("rows", s))
    if layout in ("columns", "rows-and-columns"):
        passes.append(("columns", s.T))
    for name, m in passes:
        h, p, logp, pos, z = _row_entropies(m, eps)
        g = np.where(pos, -(logp + h[:, None]) / z, 0.0)
        grad += g if name == "rows" else g.T
        groups[name] = h
        total += float(np.sum(h))
    return total, grad, groups


def max_entropy(shape, layout) -> float:
    """``Σ ln |G|`` over every group of the layout."""
    m, n = shape
    layout = getattr(layout, "value", layout)
    total = 0.0
    if layout in ("rows", "rows-and-columns"):
        total += m * np.log(n)
    if layout in ("columns", "rows-and-columns"):
        total += n * np.log(m)
    return float(total)
