"""A small LLaMA-style decoder used to check that rotations leave the function unchanged.

Linear weights are stored ``(d_out, d_in)``. Activations are row vectors,
so a linear layer computes ``x @ Wᵀ``. A rotation ``R`` of the residual
stream maps rows as ``x → x @ R``.

Each layer is ``x + Attn(RMSNorm(x))`` followed by ``x + FFN(RMSNorm(x))``
with a SiLU-gated FFN. ``R2`` must be block-diagonal over heads: each head
mixes its values with its own attention pattern, so a rotation that mixed
heads would change the output.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import linalg
from .errors import RotPruneError, ShapeError
from .importance import RotationCase, rotate_weight

NORM_EPS = 1e-6

LINEAR_ATTRS = {
    "q": "wq", "k": "wk", "v": "wv", "o": "wo",
    "gate": "wgate", "up": "wup", "down": "wdown",
}
ROTATION_CASES = {
    "q": RotationCase.RIGHT, "k": RotationCase.RIGHT,
    "v": RotationCase.TWO_SIDED_V, "o": RotationCase.TWO_SIDED_O,
    "gate": RotationCase.RIGHT, "up": RotationCase.RIGHT, "down": RotationCase.LEFT,
}


@dataclass(frozen=True)
class ModelSpec:
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 172
    vocab_size: int = 256
    rope: bool = True
    rope_theta: float = 10000.0

    def __post_init__(self):
        counts = (self.hidden_dim, self.n_layers, self.n_heads, self.head_dim, self.ffn_dim, self.vocab_size)
        if min(counts) < 1:
            raise ShapeError(f"all model dimensions must be >= 1: {self}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ShapeError("hidden_dim must equal n_heads * head_dim")
        if self.rope and self.head_dim % 2:
            raise ShapeError("rotary embedding needs an even head_dim")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wgate: np.ndarray
    wup: np.ndarray
    wdown: np.ndarray
    attn_norm: Optional[np.ndarray] = None
    ffn_norm: Optional[np.ndarray] = None

    def linear(self, name) -> np.ndarray:
        return getattr(self, LINEAR_ATTRS[name])

    def linears(self) -> dict:
        return {n: getattr(self, a) for n, a in LINEAR_ATTRS.items()}

    @property
    def fused(self) -> bool:
        return self.attn_norm is None and self.ffn_norm is None


@dataclass
class Model:
    spec: ModelSpec
    embed: np.ndarray
    layers: list
    lm_head: np.ndarray
    final_norm: Optional[np.ndarray] = None

    @property
    def fused(self) -> bool:
        return self.final_norm is None and all(l.fused for l in self.layers)

    def parameter_count(self) -> int:
        n = self.embed.size + self.lm_head.size
        n += 0 if self.final_norm is None else self.final_norm.size
        for l in self.layers:
            n += sum(w.size for w in l.linears().values())
            n += sum(v.size for v in (l.attn_norm, l.ffn_norm) if v is not None)
        return n


@dataclass
class RotatedModel:
    """A fused model whose weights are expressed in rotated coordinates.

    ``entry[i]`` / ``exit[i]`` are applied to the residual stream before and
    after layer ``i`` (None means nothing is applied). In explicit mode they
    are ``R1_i`` and ``R1_iᵀ``; after merging, adjacent pairs collapse into
    a single ``R1_{i-1}ᵀ R1_i`` at each layer entry plus one final exit.
    """

    model: Model
    r1: list
    r2: list
    mode: str = "explicit"
    entry: list = field(default_factory=list)
    exit: list = field(default_factory=list)

    @property
    def spec(self):
        return self.model.spec

    def boundary_matrices(self) -> list:
        return [m for m in self.entry + self.exit if m is not None]

    def boundary_parameter_count(self) -> int:
        if self.mode == "explicit":
            # exits reuse the transposes of the stored entries
            return sum(m.size for m in self.entry if m is not None)
        return sum(m.size for m in self.boundary_matrices())


def random_model(spec: ModelSpec, seed: int = 0, norm_range=(0.5, 1.5)) -> Model:
    """Unfused model with N(0, 1/d_in) weights and positive norm weights."""
    rng = np.random.default_rng(seed)
    d, f = spec.hidden_dim, spec.ffn_dim

    def lin(out, inp):
        return rng.standard_normal((out, inp)) / np.sqrt(inp)

    layers = []
    for _ in range(spec.n_layers):
        layers.append(LayerWeights(
            wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d),
            wgate=lin(f, d), wup=lin(f, d), wdown=lin(d, f),
            attn_norm=rng.uniform(*norm_range, d), ffn_norm=rng.uniform(*norm_range, d),
        ))
    return Model(
        spec=spec,
        embed=rng.standard_normal((spec.vocab_size, d)),
        layers=layers,
        lm_head=lin(spec.vocab_size, d),
        final_norm=rng.uniform(*norm_range, d),
    )


def rms_norm(x, weight=None, eps=NORM_EPS):
    """Row-wise ``x / sqrt(mean(x²) + eps)``, optionally scaled per feature."""
    out = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return out if weight is None else out * weight


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _rope(x, theta):
    # x: (T, head_dim); rotate-half convention
    t, hd = x.shape
    half = hd // 2
    freqs = theta ** (-np.arange(half) * 2.0 / hd)
    ang = np.arange(t)[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _linear(x, w):
    return linalg.matmul(x, linalg.transpose(w))


def _layer(spec, lw: LayerWeights, x, idx, hook):
    t = x.shape[0]
    h = rms_norm(x, lw.attn_norm)
    if hook:
        for name in ("q", "k", "v"):
            hook(idx, name, h)
    q, k, v = _linear(h, lw.wq), _linear(h, lw.wk), _linear(h, lw.wv)
    causal = np.triu(np.full((t, t), -np.inf), k=1)
    heads = []
    for hi in range(spec.n_heads):
        sl = slice(hi * spec.head_dim, (hi + 1) * spec.head_dim)
        qh, kh = q[:, sl], k[:, sl]
        if spec.rope:
            qh, kh = _rope(qh, spec.rope_theta), _rope(kh, spec.rope_theta)
        scores = linalg.matmul(qh, linalg.transpose(kh)) / np.sqrt(spec.head_dim) + causal
        heads.append(linalg.matmul(_softmax(scores), np.ascontiguousarray(v[:, sl])))
    attn = np.concatenate(heads, axis=1)
    if hook:
        hook(idx, "o", attn)
    x = x + _linear(attn, lw.wo)
    h = rms_norm(x, lw.ffn_norm)
    if hook:
        hook(idx, "gate", h)
        hook(idx, "up", h)
    act = _silu(_linear(h, lw.wgate)) * _linear(h, lw.wup)
    if hook:
        hook(idx, "down", act)
    return x + _linear(act, lw.wdown)


def _as_batch(model_spec, batch):
    arr = np.asarray(batch)
    if np.issubdtype(arr.dtype, np.integer):
        single = arr.ndim == 1
        arr = arr[None, :] if single else arr
        if arr.ndim != 2:
            raise ShapeError(f"token batch must be (batch, seq), got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= model_spec.vocab_size):
            raise ShapeError(f"token id outside vocabulary of size {model_spec.vocab_size}")
        return arr, True, single
    arr = arr.astype(np.float64)
    single = arr.ndim == 2
    arr = arr[None] if single else arr
    if arr.ndim != 3 or arr.shape[2] != model_spec.hidden_dim:
        raise ShapeError(f"vector batch must be (batch, seq, {model_spec.hidden_dim}), got {arr.shape}")
    return arr, False, single


def _run(model: Model, batch, entry=None, exit=None, return_hidden=False,
         hook: Callable = None):
    spec = model.spec
    arr, tokens, single = _as_batch(spec, batch)
    outs = []
    for seq in arr:
        x = model.embed[seq] if tokens else np.array(seq)
        for i, lw in enumerate(model.layers):
            if entry and entry[i] is not None:
                x = linalg.matmul(x, entry[i])
            x = _layer(spec, lw, x, i, hook)
            if exit and exit[i] is not None:
                x = linalg.matmul(x, exit[i])
        if not return_hidden:
            x = _linear(rms_norm(x, model.final_norm), model.lm_head)
        outs.append(x)
    out = np.stack(outs)
    return out[0] if single else out


def forward(model, batch, return_hidden=False, hook=None):
    """Logits ``(batch, seq, vocab)`` (or final hidden states) for tokens or vectors.

    ``batch`` is an integer array of token ids ``(batch, seq)`` or a float
    array of input vectors ``(batch, seq, hidden)``; 1-D/2-D inputs are a
    single sequence. ``hook(layer, linear_name, rows)`` sees every linear's
    input rows (rotated coordinates for a rotated model).
    """
    if isinstance(model, RotatedModel):
        return _run(model.model, batch, model.entry, model.exit, return_hidden, hook)
    return _run(model, batch, None, None, return_hidden, hook)


def fuse_rmsnorm(weights: LayerWeights) -> LayerWeights:
    """Fold both RMSNorm scale vectors into the linears that consume them."""
    if weights.attn_norm is None or weights.ffn_norm is None:
        raise RotPruneError("layer is already fused")
    for name, g in (("attn_norm", weights.attn_norm), ("ffn_norm", weights.ffn_norm)):
        if np.any(g <= 0):
            raise ValueError(f"{name} has a non-positive entry; fusion requires positive weights")
    ga, gf = weights.attn_norm[None, :], weights.ffn_norm[None, :]
    return LayerWeights(
        wq=weights.wq * ga, wk=weights.wk * ga, wv=weights.wv * ga, wo=weights.wo.copy(),
        wgate=weights.wgate * gf, wup=weights.wup * gf, wdown=weights.wdown.copy(),
    )


def fuse_model(model: Model) -> Model:
    if model.final_norm is None:
        raise RotPruneError("model is already fused")
    if np.any(model.final_norm <= 0):
        raise ValueError("final_norm has a non-positive entry")
    return Model(
        spec=model.spec,
        embed=model.embed.copy(),
        layers=[fuse_rmsnorm(l) for l in model.layers],
        lm_head=model.lm_head * model.final_norm[None, :],
        final_norm=None,
    )


def _pair_matrices(pair):
    if isinstance(pair, (tuple, list)):
        return np.asarray(pair[0], dtype=np.float64), np.asarray(pair[1], dtype=np.float64)
    return pair.q1, pair.q2


def check_head_blocks(r2, n_heads, tol=0.0):
    hd = r2.shape[0] // n_heads
    off = r2.copy()
    for h in range(n_heads):
        off[h * hd:(h + 1) * hd, h * hd:(h + 1) * hd] = 0.0
    if np.abs(off).max() > tol:
        raise ShapeError("R2 must be block-diagonal with one block per attention head")


def apply_rotations(model: Model, pairs, tol=1e-8) -> RotatedModel:
    """Rotate every layer's weights and insert ``R1`` / ``R1ᵀ`` at the layer boundaries.

    ``pairs`` holds one ``RotationPair`` or ``(R1, R2)`` tuple per layer.
    """
    if not model.fused:
        raise RotPruneError("apply_rotations needs a fused model")
    if len(pairs) != model.spec.n_layers:
        raise ShapeError(f"need {model.spec.n_layers} rotation pairs, got {len(pairs)}")
    spec = model.spec
    layers, r1s, r2s = [], [], []
    for i, (lw, pair) in enumerate(zip(model.layers, pairs)):
        r1, r2 = _pair_matrices(pair)
        linalg.check_orthogonal(r1, tol, f"layer {i} R1")
        linalg.check_orthogonal(r2, tol, f"layer {i} R2")
        if r1.shape[0] != spec.hidden_dim or r2.shape[0] != spec.hidden_dim:
            raise ShapeError(f"layer {i}: rotations must be {spec.hidden_dim}×{spec.hidden_dim}")
        check_head_blocks(r2, spec.n_heads)
        new = {LINEAR_ATTRS[n]: rotate_weight(w, ROTATION_CASES[n], r1, r2)
               for n, w in lw.linears().items()}
        layers.append(LayerWeights(**new))
        r1s.append(r1)
        r2s.append(r2)
    rotated = Model(spec, model.embed.copy(), layers, model.lm_head.copy(), None)
    return RotatedModel(
        rotated, r1s, r2s, "explicit",
        entry=[r.copy() for r in r1s], exit=[linalg.transpose(r) for r in r1s],
    )


def merge_rotations(rotated: RotatedModel) -> RotatedModel:
    """Collapse each ``R1_{i-1}ᵀ`` exit and ``R1_i`` entry into one matrix."""
    if rotated.mode != "explicit":
        raise RotPruneError("rotations are already merged")
    n = len(rotated.r1)
    entry = [rotated.r1[0].copy()]
    for i in range(1, n):
        entry.append(linalg.matmul(linalg.transpose(rotated.r1[i - 1]), rotated.r1[i]))
    exit = [None] * (n - 1) + [linalg.transpose(rotated.r1[-1])]
    return RotatedModel(copy.deepcopy(rotated.model), rotated.r1, rotated.r2, "merged", entry, exit)
