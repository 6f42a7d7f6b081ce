"""Seeded synthetic layers and Hessians for experiments and tests."""
from __future__ import annotations

import numpy as np

from .denoiser import LINEAR_NAMES, LayerBundle
from .importance import Metric


def gaussian_hessian(dim, samples, rng) -> np.ndarray:
    """``X Xᵀ`` for ``X`` with i.i.d. standard normal entries, shape ``(dim, samples)``."""
    x = rng.standard_normal((dim, samples))
    return x @ x.T


def layer_shapes(hidden, ffn_dim) -> dict:
    return {
        "q": (hidden, hidden), "k": (hidden, hidden), "v": (hidden, hidden), "o": (hidden, hidden),
        "gate": (ffn_dim, hidden), "up": (ffn_dim, hidden), "down": (hidden, ffn_dim),
    }


def gaussian_bundle(hidden=64, n_heads=4, ffn_dim=172, samples=256, seed=0,
                    metric=Metric.OBD, damp=0.01) -> LayerBundle:
    """A LLaMA-style layer with N(0, 1/d_in) weights and Gaussian-sample Hessians.

    As in a real layer, q/k/v share one Hessian and gate/up share another.
    """
    rng = np.random.default_rng(seed)
    weights = {
        name: rng.standard_normal(shape) / np.sqrt(shape[1])
        for name, shape in layer_shapes(hidden, ffn_dim).items()
    }
    h_attn = gaussian_hessian(hidden, samples, rng)
    h_o = gaussian_hessian(hidden, samples, rng)
    h_ffn = gaussian_hessian(hidden, samples, rng)
    h_down = gaussian_hessian(ffn_dim, samples, rng)
    hessians = {"q": h_attn, "k": h_attn, "v": h_attn, "o": h_o,
                "gate": h_ffn, "up": h_ffn, "down": h_down}
    assert set(hessians) == set(LINEAR_NAMES)
    return LayerBundle.from_layer(weights, hessians, metric, n_heads, damp)
