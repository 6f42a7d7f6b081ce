"""Binary checkpoints: magic ``DNRT``, u32 version, u64 metadata length, JSON metadata, f64 payloads.

All integers and tensors are little-endian. The metadata JSON has sorted
keys and holds a ``tensors`` directory of ``{name, shape, offset}`` entries,
where offsets are byte positions within the payload region. Writing the same
tensors and metadata twice yields identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import RotPruneError
from .transformer import LINEAR_ATTRS, LayerWeights, Model, ModelSpec, RotatedModel

MAGIC = b"DNRT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(RotPruneError):
    pass


def dump_tensors(tensors: dict, meta: dict | None = None) -> bytes:
    directory = []
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    body = dict(meta or {})
    body["tensors"] = directory
    text = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(payloads)


def parse_tensors(data: bytes) -> tuple[dict, dict]:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + meta_len
    meta = json.loads(data[_HEADER.size:start].decode("utf-8"))
    tensors = {}
    for entry in meta.pop("tensors"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        if lo + 8 * count > len(data):
            raise CheckpointError(f"tensor {entry['name']!r} runs past the end of the file")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=lo).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return tensors, meta


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.write_bytes(dump_tensors(tensors, meta))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_tensors(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_tensors(data)


def model_tensors(model) -> tuple[dict, dict]:
    """Flatten a ``Model`` or ``RotatedModel`` into named tensors plus metadata."""
    rotated = isinstance(model, RotatedModel)
    base = model.model if rotated else model
    t = {"embed": base.embed, "lm_head": base.lm_head}
    if base.final_norm is not None:
        t["final_norm"] = base.final_norm
    for i, lw in enumerate(base.layers):
        for name, attr in LINEAR_ATTRS.items():
            t[f"layers.{i}.{name}"] = getattr(lw, attr)
        for norm in ("attn_norm", "ffn_norm"):
            if getattr(lw, norm) is not None:
                t[f"layers.{i}.{norm}"] = getattr(lw, norm)
    meta = {"kind": "model", "spec": base.spec.to_dict()}
    if rotated:
        meta.update(kind="rotated", mode=model.mode)
        for i, (r1, r2) in enumerate(zip(model.r1, model.r2)):
            t[f"r1.{i}"] = r1
            t[f"r2.{i}"] = r2
        for side in ("entry", "exit"):
            for i, m in enumerate(getattr(model, side)):
                if m is not None:
                    t[f"{side}.{i}"] = m
    return t, meta


def model_from_tensors(t: dict, meta: dict):
    spec = ModelSpec.from_dict(meta["spec"])
    layers = []
    for i in range(spec.n_layers):
        kw = {attr: t[f"layers.{i}.{name}"] for name, attr in LINEAR_ATTRS.items()}
        for norm in ("attn_norm", "ffn_norm"):
            kw[norm] = t.get(f"layers.{i}.{norm}")
        layers.append(LayerWeights(**kw))
    model = Model(spec, t["embed"], layers, t["lm_head"], t.get("final_norm"))
    if meta.get("kind") != "rotated":
        return model
    n = spec.n_layers
    return RotatedModel(
        model,
        [t[f"r1.{i}"] for i in range(n)],
        [t[f"r2.{i}"] for i in range(n)],
        meta["mode"],
        [t.get(f"entry.{i}") for i in range(n)],
        [t.get(f"exit.{i}") for i in range(n)],
    )


def save_model(path, model, extra: dict | None = None) -> Path:
    t, meta = model_tensors(model)
    if extra:
        meta["extra"] = extra
    return save_tensors(path, t, meta)


def load_model(path):
    t, meta = load_tensors(path)
    try:
        return model_from_tensors(t, meta)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing tensor {exc}") from exc
