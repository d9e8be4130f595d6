"""SGD training with recorded execution traces, and their on-disk format.

A trace file is a JSON manifest next to a binary blob of little-endian
float64 values::

    run.json   version, config, array table (name, shape, offset, sha256)
    run.bin    raw arrays, concatenated in table order
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import MiniBatch
from .nn import FcnArchitecture, FcnParams, grad_batch

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class TraceFormatError(ValueError):
    """Raised for unreadable, inconsistent or tampered trace files."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    batch_size: int
    seed: int
    arch: FcnArchitecture

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["arch"] = {"layer_dims": list(self.arch.layer_dims),
                     "activation": self.arch.activation}
        return d

    @classmethod
    def from_dict(cls, d):
        arch = FcnArchitecture(tuple(d["arch"]["layer_dims"]), d["arch"]["activation"])
        return cls(float(d["lr"]), int(d["steps"]), int(d["batch_size"]), int(d["seed"]), arch)


@dataclass
class ExecutionTrace:
    checkpoints: list
    batches: list
    config: TrainConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.checkpoints) != len(self.batches) + 1:
            raise ValueError("a trace needs exactly one more checkpoint than batches")

    @property
    def steps(self):
        return len(self.batches)

    @property
    def lr(self):
        return self.config.lr


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = arch.layer_dims
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return FcnParams(weights, biases, arch.activation)


def apply_update(params, grad, lr):
    return FcnParams([w - lr * g for w, g in zip(params.weights, grad.d_weights)],
                     [b - lr * g for b, g in zip(params.biases, grad.d_biases)],
                     params.activation)


def sgd_step(params, batch, lr, plan=None):
    """One SGD step; accumulation order fixed unless ``plan`` is given."""
    return apply_update(params, grad_batch(params, batch, plan), lr)


def train(ds, cfg, meta=None):
    if len(ds) < cfg.batch_size:
        raise ValueError(f"dataset of {len(ds)} is smaller than batch size {cfg.batch_size}")
    if cfg.arch.n_inputs != ds.n_features or cfg.arch.n_classes != ds.class_count:
        raise ValueError(f"architecture {cfg.arch.layer_dims} does not fit the dataset")
    params = init_params(cfg.arch, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    checkpoints, batches = [params], []
    for _ in range(cfg.steps):
        idx = rng.choice(len(ds), size=cfg.batch_size, replace=False)
        batch = ds.batch(idx)
        params = sgd_step(params, batch, cfg.lr)
        batches.append(batch)
        checkpoints.append(params)
    return ExecutionTrace(checkpoints, batches, cfg, dict(meta or {}))


def _arrays(trace):
    for i, p in enumerate(trace.checkpoints):
        for j, (w, b) in enumerate(zip(p.weights, p.biases)):
            yield f"theta{i}.W{j + 1}", w
            yield f"theta{i}.b{j + 1}", b
    for i, bt in enumerate(trace.batches):
        yield f"batch{i}.X", bt.X
        yield f"batch{i}.Y", bt.Y


def _blob_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".bin")


def dumps(trace):
    """Serialize to ``(manifest_text, blob_bytes)``."""
    table, chunks, offset = [], [], 0
    for name, arr in _arrays(trace):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float64-le",
        "config": trace.config.to_dict(),
        "meta": trace.meta,
        "steps": trace.steps,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": table,
    }
    return json.dumps(manifest, indent=1, sort_keys=True) + "\n", blob


def save(trace, path):
    """Write ``path`` (manifest) and a sibling ``.bin`` blob; returns both paths."""
    path = Path(path)
    text, blob = dumps(trace)
    blob_path = _blob_path(path)
    blob_path.write_bytes(blob)
    path.write_text(text)
    return path, blob_path


def loads(text, blob):
    try:
        m = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"manifest is not valid JSON: {exc}") from exc
    if m.get("version") != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported trace version {m.get('version')!r}")
    if len(blob) != m["blob_bytes"]:
        raise TraceFormatError(f"blob has {len(blob)} bytes, manifest says {m['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != m["blob_sha256"]:
        raise TraceFormatError("blob checksum mismatch")
    arrays, expect = {}, 0
    for entry in m["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        start = entry["offset"]
        if start != expect or start + nbytes > len(blob):
            raise TraceFormatError(f"corrupt offset for {entry['name']}")
        raw = blob[start:start + nbytes]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise TraceFormatError(f"checksum mismatch for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
        expect = start + nbytes
    if expect != len(blob):
        raise TraceFormatError("array table does not cover the blob")
    cfg = TrainConfig.from_dict(m["config"])
    depth = cfg.arch.depth
    try:
        checkpoints = [
            FcnParams([arrays[f"theta{i}.W{j}"] for j in range(1, depth + 1)],
                      [arrays[f"theta{i}.b{j}"] for j in range(1, depth + 1)],
                      cfg.arch.activation)
            for i in range(m["steps"] + 1)
        ]
        batches = [MiniBatch(arrays[f"batch{i}.X"], arrays[f"batch{i}.Y"])
                   for i in range(m["steps"])]
    except (KeyError, ValueError) as exc:
        raise TraceFormatError(f"manifest inconsistent with its arrays: {exc}") from exc
    return ExecutionTrace(checkpoints, batches, cfg, m.get("meta", {}))


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
        blob = _blob_path(path).read_bytes()
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc
    return loads(text, blob)
