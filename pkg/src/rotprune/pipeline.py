"""End-to-end pipeline: fuse, calibrate, denoise, merge, prune, evaluate.

Each stage is a plain function so it can run on its own from the CLI or as
part of :func:`run_pipeline`. The denoise and prune stages read Hessians from
the same sealed calibration statistics.
"""
from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, linalg
from . import importance as imp
from .config import PipelineConfig
from .denoiser import LayerBundle, RotationPair, TrainConfig, Trajectory, train_rotations
from .errors import RotPruneError, ShapeError, StageError
from .importance import CalibStats, Metric
from .pruner import (ComparisonGroup, PatternKind, PruneMask, export_mask, make_mask,
                     output_deviation, prune_simple, prune_sparsegpt)
from .transformer import (LINEAR_ATTRS, ROTATION_CASES, LayerWeights, Model, ModelSpec,
                          RotatedModel, apply_rotations, forward, fuse_model, merge_rotations,
                          random_model)

SCHEMA_VERSION = 1

# linears that read the same activations share one set of statistics
STAT_KEYS = {"q": "attn", "k": "attn", "v": "attn", "o": "o", "gate": "ffn", "up": "ffn", "down": "down"}
STAT_SOURCES = {"q": "attn", "o": "o", "gate": "ffn", "down": "down"}


# data sources

def text_windows(path, seq_len, samples, vocab_size=256) -> np.ndarray:
    """Non-overlapping byte windows ``(n, seq_len)`` from a file, at most ``samples`` of them."""
    path = Path(path)
    try:
        data = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64)
    except OSError as exc:
        raise RotPruneError(f"cannot read text file {path}: {exc}") from exc
    n = min(samples, data.size // seq_len)
    if n == 0:
        raise ValueError(f"{path} has fewer than {seq_len} bytes; no complete window")
    if data.max() >= vocab_size:
        raise ShapeError(f"{path} has byte values outside a vocabulary of {vocab_size}")
    return data[: n * seq_len].reshape(n, seq_len)


def synthetic_embeddings(samples, seq_len, hidden, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((samples, seq_len, hidden))


def synthetic_tokens(samples, seq_len, vocab_size, seed) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, vocab_size, size=(samples, seq_len))


def calib_inputs(cfg: PipelineConfig) -> np.ndarray:
    c = cfg.calib
    if c.source == "text-file":
        return text_windows(c.path, c.seq_len, c.samples, cfg.model.vocab_size)
    return synthetic_embeddings(c.samples, c.seq_len, cfg.model.hidden_dim, c.seed)


def eval_tokens(cfg: PipelineConfig) -> np.ndarray:
    e = cfg.eval
    if e.source == "text-file":
        return text_windows(e.path, e.seq_len, e.samples, cfg.model.vocab_size)
    return synthetic_tokens(e.samples, e.seq_len, cfg.model.vocab_size, e.seed)


# stage: fuse

def model_spec(cfg: PipelineConfig) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.hidden_dim, m.n_layers, m.n_heads, m.head_dim, m.ffn_dim, m.vocab_size, m.rope)


def initial_model(cfg: PipelineConfig) -> Model:
    if cfg.model.path:
        model = checkpoint.load_model(cfg.model.path)
        if isinstance(model, RotatedModel):
            raise RotPruneError("model.path must point at an unrotated model checkpoint")
        return model
    return random_model(model_spec(cfg), cfg.model.seed)


def fuse_stage(model: Model) -> Model:
    return model if model.fused else fuse_model(model)


# stage: calibrate

def calibrate(model, inputs, batch_size=4, seal=True) -> list:
    """Accumulate ``H = X Xᵀ`` for every linear's input over the calibration set.

    ``inputs`` is a token array ``(n, seq)`` or an embedding array
    ``(n, seq, hidden)``. Returns one dict per layer mapping ``attn``, ``o``,
    ``ffn`` and ``down`` to :class:`CalibStats` (see :data:`STAT_KEYS`).
    """
    if isinstance(model, RotatedModel):
        raise RotPruneError("calibrate expects the fused dense model")
    if not model.fused:
        raise RotPruneError("calibrate expects a fused model")
    inputs = np.asarray(inputs)
    if inputs.ndim < 2 or inputs.shape[0] == 0 or inputs.shape[1] == 0:
        raise ValueError("calibration set is empty")
    spec = model.spec
    dims = {"attn": spec.hidden_dim, "o": spec.hidden_dim, "ffn": spec.hidden_dim, "down": spec.ffn_dim}
    stats = [{k: CalibStats(d) for k, d in dims.items()} for _ in range(spec.n_layers)]

    def hook(layer, name, rows):
        key = STAT_SOURCES.get(name)
        if key is not None:
            imp.accumulate_hessian(stats[layer][key], linalg.transpose(rows))

    for start in range(0, inputs.shape[0], batch_size):
        forward(model, inputs[start:start + batch_size], return_hidden=True, hook=hook)
    if seal:
        for layer in stats:
            for s in layer.values():
                s.seal()
    return stats


def layer_hessians(layer_stats: dict) -> dict:
    return {name: layer_stats[key].hessian for name, key in STAT_KEYS.items()}


# stage: denoise

@dataclass
class DenoiseResult:
    pairs: list
    trajectories: list
    stats: list
    metric: Metric

    @property
    def rotations(self):
        return [(p.q1, p.q2) for p in self.pairs]


def layer_bundle(layer: LayerWeights, layer_stats: dict, metric, n_heads, damp) -> LayerBundle:
    return LayerBundle.from_layer(layer.linears(), layer_hessians(layer_stats), metric, n_heads, damp)


def denoise_stage(model: Model, stats: list, cfg: PipelineConfig) -> DenoiseResult:
    r = cfg.rotator
    metric = cfg.train_metric
    spec = model.spec
    steps = r.steps if r.enabled else 0
    train_cfg = TrainConfig(steps=steps, lr=r.lr, seed=r.seed, block_count=r.block_count, epsilon=r.epsilon)

    def work(i):
        try:
            bundle = layer_bundle(model.layers[i], stats[i], metric, spec.n_heads, cfg.prune.damp)
            return train_rotations(bundle, train_cfg)
        except Exception as exc:
            raise StageError("denoise", i, exc) from exc

    with ThreadPoolExecutor(max_workers=r.workers) as pool:
        results = list(pool.map(work, range(spec.n_layers)))
    return DenoiseResult([p for p, _ in results], [t for _, t in results], stats, metric)


def rotate_stage(model: Model, rotations) -> RotatedModel:
    try:
        return apply_rotations(model, rotations)
    except Exception as exc:
        raise StageError("merge", None, exc) from exc


# stage: prune

def linear_scores(w, h, method: str, damp: float, h_inv=None) -> np.ndarray:
    """Mask-selection scores for a pruning method in the current basis."""
    if method == "magnitude":
        return imp.score_magnitude(w).scores
    if method == "wanda":
        return imp.score_wanda(w, h).scores
    if h_inv is None:
        h_inv = linalg.cholesky_inverse(h, damp)
    return imp.score_sparsegpt(w, h_inv).scores


@dataclass
class LayerPruneRecord:
    pruned_score_before: float
    pruned_score_after: float
    output_deviation: float


@dataclass
class PruneResult:
    model: RotatedModel
    masks: list
    records: list
    stats: list


def prune_stage(rotated: RotatedModel, stats: list, cfg: PipelineConfig, dense: Model = None) -> PruneResult:
    """Prune every linear of ``rotated`` using rotated Hessians built from ``stats``.

    ``dense`` is the unrotated fused model; when given, the report also
    records the pruned score mass the same method would remove without the
    rotation.
    """
    p = cfg.prune
    pattern = cfg.pattern
    group = ComparisonGroup(p.comparison_group)
    layers, masks, records = [], [], []
    for i, lw in enumerate(rotated.model.layers):
        try:
            r1, r2 = rotated.r1[i], rotated.r2[i]
            hess = layer_hessians(stats[i])
            new, layer_masks = {}, {}
            before = after = dev = 0.0
            for name, w in lw.linears().items():
                case = ROTATION_CASES[name]
                h = hess[name]
                hr = imp.rotate_hessian(h, case, r1, r2)
                if p.method == "sparsegpt":
                    w_hat, mask = prune_sparsegpt(w, hr, pattern, p.block_size, p.damp, group=group)
                else:
                    mask = make_mask(linear_scores(w, hr, p.method, p.damp), pattern, group)
                    w_hat = prune_simple(w, mask)
                mask.validate()
                s_after = linear_scores(w, hr, p.method, p.damp)
                after += float(np.sum(s_after[mask.pruned]))
                if dense is not None:
                    w0 = dense.layers[i].linear(name)
                    s0 = linear_scores(w0, h, p.method, p.damp)
                    before += float(np.sum(s0[make_mask(s0, pattern, group).pruned]))
                dev += output_deviation(w, w_hat, hr)
                new[LINEAR_ATTRS[name]] = w_hat
                layer_masks[name] = mask
            if not np.isfinite(dev):
                raise ArithmeticError("non-finite output deviation")
        except Exception as exc:
            raise StageError("prune", i, exc) from exc
        layers.append(LayerWeights(**new))
        masks.append(layer_masks)
        records.append(LayerPruneRecord(before if dense is not None else float("nan"), after, dev))
    base = rotated.model
    pruned_model = Model(base.spec, base.embed.copy(), layers, base.lm_head.copy(), base.final_norm)
    out = RotatedModel(pruned_model, rotated.r1, rotated.r2, rotated.mode, rotated.entry, rotated.exit)
    return PruneResult(out, masks, records, stats)


# stage: eval

def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def perplexity(model, tokens) -> float:
    """``exp`` of the mean next-byte negative log-likelihood over all windows."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size == 0 or tokens.shape[1] < 2:
        raise ValueError("evaluation text is empty")
    logp = log_softmax(forward(model, tokens))
    targets = tokens[:, 1:]
    picked = np.take_along_axis(logp[:, :-1, :], targets[..., None], axis=2)[..., 0]
    return float(np.exp(-np.mean(picked)))


def heldout_deviation(dense: Model, pruned: RotatedModel, tokens) -> list:
    """Per-layer ``Σ tr(ΔH Δᵀ)`` using Hessians measured on the held-out tokens."""
    stats = calibrate(dense, tokens)
    out = []
    for i, (dl, pl) in enumerate(zip(dense.layers, pruned.model.layers)):
        hess = layer_hessians(stats[i])
        r1, r2 = pruned.r1[i], pruned.r2[i]
        total = 0.0
        for name, w_hat in pl.linears().items():
            case = ROTATION_CASES[name]
            w = imp.rotate_weight(dl.linear(name), case, r1, r2)
            total += output_deviation(w, w_hat, imp.rotate_hessian(hess[name], case, r1, r2))
        out.append(total)
    return out


def evaluate(model, tokens, dense: Model = None, metrics=("perplexity", "output_deviation")) -> dict:
    """Byte-level perplexity of ``model``; comparisons against ``dense`` when given."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("evaluation text is empty")
    out = {}
    if "perplexity" in metrics:
        out["perplexity"] = perplexity(model, tokens)
        if dense is not None:
            out["perplexity_dense"] = perplexity(dense, tokens)
            out["perplexity_delta"] = out["perplexity"] - out["perplexity_dense"]
    if dense is not None and "output_deviation" in metrics:
        diff = forward(model, tokens) - forward(dense, tokens)
        out["logit_mse"] = float(np.mean(diff * diff))
        if isinstance(model, RotatedModel):
            per_layer = heldout_deviation(dense, model, tokens)
            out["heldout_deviation"] = per_layer
            out["mean_heldout_deviation"] = float(np.mean(per_layer))
    return out


# report

@dataclass
class LayerRecord:
    layer: int
    entropy_before: float
    entropy_after: float
    pruned_score_before: float
    pruned_score_after: float
    output_deviation: float


@dataclass
class RunReport:
    layers: list
    trajectories: list
    eval: dict
    config: dict
    checkpoints: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    timings: dict = field(default_factory=dict, compare=False)

    @property
    def mean_output_deviation(self) -> float:
        return float(np.mean([r.output_deviation for r in self.layers]))

    def check_finite(self):
        for r in self.layers:
            for k, v in vars(r).items():
                if not np.isfinite(v):
                    raise ArithmeticError(f"layer {r.layer}: {k} is not finite")
        for k, v in self.eval.items():
            if not np.all(np.isfinite(v)):
                raise ArithmeticError(f"eval metric {k} is not finite")
        return self


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_calib(path, stats: list) -> Path:
    tensors, counts = {}, {}
    for i, layer in enumerate(stats):
        for key, s in layer.items():
            tensors[f"{i}.{key}"] = s.hessian
            counts[f"{i}.{key}"] = s.count
    return checkpoint.save_tensors(path, tensors, {"kind": "calib", "counts": counts, "n_layers": len(stats)})


def load_calib(path) -> list:
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("kind") != "calib":
        raise checkpoint.CheckpointError(f"{path} is not a calibration checkpoint")
    stats = []
    for i in range(meta["n_layers"]):
        layer = {}
        for key in ("attn", "o", "ffn", "down"):
            h = tensors[f"{i}.{key}"]
            s = CalibStats(h.shape[0])
            s.hessian = h.copy()
            s.count = meta["counts"][f"{i}.{key}"]
            s.seal()
            layer[key] = s
        stats.append(layer)
    return stats


def save_rotations(path, result: DenoiseResult) -> Path:
    tensors = {}
    for i, (q1, q2) in enumerate(result.rotations):
        tensors[f"r1.{i}"] = q1
        tensors[f"r2.{i}"] = q2
    meta = {
        "kind": "rotations",
        "metric": result.metric.value,
        "n_layers": len(result.pairs),
        "trajectories": [t.losses for t in result.trajectories],
    }
    return checkpoint.save_tensors(path, tensors, meta)


def load_rotations(path):
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("kind") != "rotations":
        raise checkpoint.CheckpointError(f"{path} is not a rotations checkpoint")
    rots = [(tensors[f"r1.{i}"], tensors[f"r2.{i}"]) for i in range(meta["n_layers"])]
    return rots, meta


def _timed(timings, name, fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    timings[name] = time.perf_counter() - t0
    return out


def run_pipeline(cfg: PipelineConfig, output_dir=None) -> RunReport:
    """Run every stage in order, writing checkpoints and reports to ``output_dir``.

    Checkpoints: ``fused.dnrt``, ``calib.dnrt``, ``rotations.dnrt``,
    ``merged.dnrt`` and ``pruned.dnrt``, plus one bit-packed mask file per
    linear under ``masks/``. Partial outputs stay on disk if a stage fails.
    """
    from .report import report_emit

    out = Path(output_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    ckpts: dict = {}

    def persist(name, fn, *args):
        path = fn(out / name, *args)
        ckpts[name] = sha256_file(path)

    def stage(name, fn, *args, **kw):
        try:
            return _timed(timings, name, fn, *args, **kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, None, exc) from exc

    dense = stage("fuse", lambda: fuse_stage(initial_model(cfg)))
    persist("fused.dnrt", checkpoint.save_model, dense)

    stats = stage("calibrate", lambda: calibrate(dense, calib_inputs(cfg), cfg.calib.batch_size))
    persist("calib.dnrt", save_calib, stats)

    den = stage("denoise", denoise_stage, dense, stats, cfg)
    persist("rotations.dnrt", save_rotations, den)

    merged = stage("merge", lambda: merge_rotations(rotate_stage(dense, den.rotations)))
    persist("merged.dnrt", checkpoint.save_model, merged)

    # the prune stage must see the very objects the rotations were trained on
    assert den.stats is stats
    pruned = stage("prune", prune_stage, merged, den.stats, cfg, dense)
    assert pruned.stats is stats
    persist("pruned.dnrt", checkpoint.save_model, pruned.model)
    write_masks(out / "masks", pruned.masks)

    metrics = stage("eval", lambda: evaluate(pruned.model, eval_tokens(cfg), dense, cfg.eval.metrics))

    records = [
        LayerRecord(i, t.losses[0], t.losses[-1], r.pruned_score_before, r.pruned_score_after, r.output_deviation)
        for i, (t, r) in enumerate(zip(den.trajectories, pruned.records))
    ]
    metrics["mean_output_deviation"] = float(np.mean([r.output_deviation for r in records]))
    report = RunReport(
        layers=records,
        trajectories=[list(t.losses) for t in den.trajectories],
        eval=metrics,
        config=cfg.to_dict(),
        checkpoints=ckpts,
        timings=timings,
    )
    try:
        report.check_finite()
    except ArithmeticError as exc:
        raise StageError("report", None, exc) from exc
    report_emit(report, out, figures=cfg.output.figures)
    return report


def write_masks(directory, masks: list):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, layer_masks in enumerate(masks):
        for name, mask in layer_masks.items():
            (directory / f"layer{i}.{name}.mask").write_bytes(export_mask(mask))
