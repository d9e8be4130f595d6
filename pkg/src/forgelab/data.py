"""Mini-batches, validity domains, synthetic data and IDX ingestion."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TOL = 1e-9
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class MiniBatch:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("X and Y must be 2-D (features x examples)")
        if self.X.shape[1] != self.Y.shape[1] or self.X.shape[1] < 1:
            raise ValueError(f"X has {self.X.shape[1]} columns, Y has {self.Y.shape[1]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("batch contains non-finite entries")

    @property
    def size(self):
        return self.X.shape[1]

    def __len__(self):
        return self.size

    def example(self, k):
        return self.X[:, k], self.Y[:, k]

    def copy(self):
        return MiniBatch(self.X.copy(), self.Y.copy())


@dataclass(frozen=True)
class Domain:
    """Input domain (box or pixel grid on [0, 1]) times a label space."""

    input: str = "grid"
    lo: float = 0.0
    hi: float = 1.0
    levels: int = 256
    label: str = "one_hot"

    def __post_init__(self):
        if self.input not in ("box", "grid"):
            raise ValueError(f"unknown input domain {self.input!r}")
        if self.label not in ("one_hot", "real_vector"):
            raise ValueError(f"unknown label domain {self.label!r}")
        if self.input == "grid" and self.levels < 2:
            raise ValueError("grid needs at least 2 levels")
        if self.input == "box" and not self.lo < self.hi:
            raise ValueError("box needs lo < hi")

    @classmethod
    def box(cls, lo=-np.inf, hi=np.inf, label="one_hot"):
        return cls("box", lo=lo, hi=hi, label=label)

    @classmethod
    def grid(cls, levels=256, label="one_hot"):
        return cls("grid", levels=levels, label=label)

    @classmethod
    def parse(cls, text):
        """Parse ``grid:256``, ``box``, ``box:0,1`` with optional ``+real`` labels."""
        label = "one_hot"
        if text.endswith("+real"):
            text, label = text[:-5], "real_vector"
        kind, _, arg = text.partition(":")
        if kind == "grid":
            return cls.grid(int(arg) if arg else 256, label)
        if kind == "box":
            if arg:
                lo, hi = (float(t) for t in arg.split(","))
                return cls.box(lo, hi, label)
            return cls.box(label=label)
        raise ValueError(f"cannot parse domain {text!r}")

    def __str__(self):
        base = f"grid:{self.levels}" if self.input == "grid" else f"box:{self.lo},{self.hi}"
        return base + ("+real" if self.label == "real_vector" else "")


def quantize(X, dom):
    """Project inputs onto the domain (clip, then round to grid levels)."""
    X = np.asarray(X, dtype=np.float64)
    if dom.input == "box":
        return np.clip(X, dom.lo, dom.hi)
    q = dom.levels - 1
    return np.round(np.clip(X, 0.0, 1.0) * q) / q


def inputs_in_domain(X, dom, tol=DEFAULT_TOL):
    X = np.asarray(X, dtype=np.float64)
    if dom.input == "box":
        return bool(np.all(X >= dom.lo - tol) and np.all(X <= dom.hi + tol))
    q = dom.levels - 1
    if np.any(X < -tol) or np.any(X > 1 + tol):
        return False
    return bool(np.all(np.abs(X * q - np.round(X * q)) <= tol * q))


def labels_in_domain(Y, dom, tol=DEFAULT_TOL):
    if dom.label == "real_vector":
        return True
    Y = np.asarray(Y, dtype=np.float64)
    near_one = np.abs(Y - 1.0) <= tol
    near_zero = np.abs(Y) <= tol
    return bool(np.all(near_one | near_zero) and np.all(near_one.sum(axis=0) == 1))


def in_domain(batch, dom, tol=DEFAULT_TOL):
    return inputs_in_domain(batch.X, dom, tol) and labels_in_domain(batch.Y, dom, tol)


def _stacked(batch):
    return np.vstack([batch.X, batch.Y]).T


def match_columns(a, b, tol=DEFAULT_TOL):
    """For each example of ``a``, whether some example of ``b`` equals it within ``tol``."""
    ea, eb = _stacked(a), _stacked(b)
    if ea.shape[1] != eb.shape[1]:
        raise ValueError("batches have different feature/label dims")
    diff = np.abs(ea[:, None, :] - eb[None, :, :]).max(axis=2)
    return (diff <= tol).any(axis=1)


def distinct(a, b, tol=DEFAULT_TOL):
    """True iff some example of ``a`` has no equal example in ``b`` (order ignored)."""
    if a.X.shape[0] != b.X.shape[0] or a.Y.shape[0] != b.Y.shape[0]:
        raise ValueError("batches have different shapes")
    return not bool(match_columns(a, b, tol).all())


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((n_classes, labels.size))
    Y[labels, np.arange(labels.size)] = 1.0
    return Y


@dataclass
class Dataset:
    """A dataset stored column-wise: ``X`` is ``d x N``, ``Y`` is ``n x N``."""

    X: np.ndarray
    Y: np.ndarray
    domain: Domain

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.shape[1] != self.Y.shape[1]:
            raise ValueError("X and Y have different example counts")
        if not in_domain(MiniBatch(self.X, self.Y), self.domain):
            raise ValueError("dataset contains examples outside its domain")

    def __len__(self):
        return self.X.shape[1]

    def __getitem__(self, i):
        return self.X[:, i], self.Y[:, i]

    @property
    def class_count(self):
        return self.Y.shape[0]

    @property
    def n_features(self):
        return self.X.shape[0]

    @property
    def labels(self):
        return np.argmax(self.Y, axis=0)

    def batch(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return MiniBatch(self.X[:, idx], self.Y[:, idx])

    def locate(self, batch, tol=DEFAULT_TOL):
        """Dataset index of each batch example (first match), ``-1`` if absent."""
        out = np.full(batch.size, -1, dtype=np.int64)
        data = np.vstack([self.X, self.Y])
        for k in range(batch.size):
            col = np.concatenate(batch.example(k))
            hit = np.flatnonzero(np.abs(data - col[:, None]).max(axis=0) <= tol)
            if hit.size:
                out[k] = hit[0]
        return out


def gen_synthetic(seed, n_examples, d, n_classes, dom=None, spread=0.15):
    """Gaussian class clusters projected into ``dom``; labels assigned round-robin."""
    if min(n_examples, d, n_classes) < 1:
        raise ValueError("counts must be positive")
    dom = Domain.grid(256) if dom is None else dom
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(d, n_classes))
    labels = np.arange(n_examples) % n_classes
    X = centers[:, labels] + spread * rng.standard_normal((d, n_examples))
    if dom.input == "box" and not (np.isfinite(dom.lo) and np.isfinite(dom.hi)):
        X = np.clip(X, 0.0, 1.0)
    elif dom.input == "box":
        X = dom.lo + (dom.hi - dom.lo) * np.clip(X, 0.0, 1.0)
    X = quantize(X, dom)
    return Dataset(X, one_hot(labels, n_classes), dom)


def sample_batch(ds, b, seed):
    """Uniform sample of ``b`` distinct dataset indices; returns ``(batch, indices)``."""
    if b < 1 or b > len(ds):
        raise ValueError(f"batch size {b} invalid for dataset of {len(ds)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=b, replace=False)
    return ds.batch(idx), idx


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, "magic"))
        if magic != expected_magic:
            raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected {expected_magic:#010x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, "header"))
        count = int(np.prod(dims))
        data = np.frombuffer(_read_exact(fh, count, "payload"), dtype=np.uint8)
        if fh.read(1):
            raise IdxFormatError(f"{path}: trailing bytes after payload")
    return data.reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, n_classes=10):
    images = read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= n_classes:
        raise IdxFormatError(f"label {labels.max()} out of range for {n_classes} classes")
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    return Dataset(X, one_hot(labels, n_classes), Domain.grid(256))
