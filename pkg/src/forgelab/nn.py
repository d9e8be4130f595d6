"""Fully connected softmax networks with hand-written gradients.

Conventions: ``X`` is ``d0 x b`` with one example per column, ``W_i`` is
``d_{i-1} x d_i`` and layers compute ``Z_i = W_i.T @ A_{i-1} + b_i``.
Error matrices ``D_i`` are ``b x d_i`` with one row per example.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class FcnArchitecture:
    layer_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if min(dims) < 1:
            raise ValueError(f"layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def depth(self):
        return len(self.layer_dims) - 1

    @property
    def n_inputs(self):
        return self.layer_dims[0]

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    @property
    def n_params(self):
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(self.depth))


@dataclass
class FcnParams:
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i + 1}: W {w.shape} incompatible with b {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i + 1}: input dim {w.shape[0]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i + 1} has non-finite entries")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def arch(self):
        dims = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        return FcnArchitecture(tuple(dims), self.activation)

    @property
    def depth(self):
        return len(self.weights)

    def flatten(self):
        return _flatten(self.weights, self.biases)

    def copy(self):
        return FcnParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


@dataclass
class Gradient:
    """Per-layer gradient. Flattened order: W1 (row-major), b1, W2, b2, ..."""

    d_weights: list
    d_biases: list

    def flatten(self):
        return _flatten(self.d_weights, self.d_biases)

    @classmethod
    def from_flat(cls, flat, like):
        ws, bs = _unflatten(flat, [w.shape for w in like.weights])
        return cls(ws, bs)


@dataclass
class ForwardCache:
    pre_activations: list
    activations: list
    probabilities: np.ndarray
    activation: str = "relu"
    extra: dict = field(default_factory=dict)


def _flatten(weights, biases):
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts)


def _unflatten(flat, shapes):
    flat = np.asarray(flat, dtype=np.float64)
    ws, bs, pos = [], [], 0
    for shape in shapes:
        n = shape[0] * shape[1]
        ws.append(flat[pos:pos + n].reshape(shape))
        pos += n
        bs.append(flat[pos:pos + shape[1]].copy())
        pos += shape[1]
    if pos != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
    return ws, bs


def flatten(obj):
    """Flatten a :class:`Gradient`, :class:`FcnParams` or array."""
    if hasattr(obj, "flatten") and not isinstance(obj, np.ndarray):
        return obj.flatten()
    return np.ravel(np.asarray(obj, dtype=np.float64))


def l2_distance(a, b):
    fa, fb = flatten(a), flatten(b)
    if fa.shape != fb.shape:
        raise ValueError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    return float(np.linalg.norm(fa - fb))


def params_from_flat(flat, like):
    ws, bs = _unflatten(flat, [w.shape for w in like.weights])
    return FcnParams(ws, bs, like.activation)


def _act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_deriv(z, activation):
    # relu'(0) := 0
    if activation == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def softmax(z):
    """Column-wise softmax with max-shift."""
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _check_input(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] != params.weights[0].shape[0]:
        raise ValueError(f"X must be {params.weights[0].shape[0]} x b, got {X.shape}")
    if X.shape[1] < 1:
        raise ValueError("batch must contain at least one example")
    return X


def _check_labels(params, Y, b):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    n = params.weights[-1].shape[1]
    if Y.shape != (n, b):
        raise ValueError(f"Y must be {n} x {b}, got {Y.shape}")
    return Y


def forward(params, X):
    X = _check_input(params, X)
    zs, acts = [], [X]
    a = X
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w.T @ a + b[:, None]
        zs.append(z)
        if i < params.depth - 1:
            a = _act(z, params.activation)
            acts.append(a)
    return ForwardCache(zs, acts, softmax(zs[-1]), params.activation)


def predict_proba(params, X):
    return forward(params, X).probabilities


def loss(cache, Y):
    """Mean cross-entropy over the columns of ``Y``."""
    p = cache.probabilities
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if Y.shape != p.shape:
        raise ValueError(f"Y shape {Y.shape} does not match predictions {p.shape}")
    return float(np.mean(-np.sum(Y * np.log(np.maximum(p, LOG_FLOOR)), axis=0)))


def per_example_losses(params, X, Y):
    cache = forward(params, X)
    Y = _check_labels(params, Y, cache.probabilities.shape[1])
    return -np.sum(Y * np.log(np.maximum(cache.probabilities, LOG_FLOOR)), axis=0)


def batch_loss(params, X, Y):
    return loss(forward(params, X), Y)


def grad_example(params, x, y):
    """Gradient of the single-example loss by vector backpropagation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != params.weights[0].shape[0]:
        raise ValueError(f"x has length {x.size}, expected {params.weights[0].shape[0]}")
    if y.size != params.weights[-1].shape[1]:
        raise ValueError(f"y has length {y.size}, expected {params.weights[-1].shape[1]}")
    zs, acts = [], [x]
    a = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w.T @ a + b
        zs.append(z)
        a = _act(z, params.activation) if i < params.depth - 1 else z
        if i < params.depth - 1:
            acts.append(a)
    zl = zs[-1] - zs[-1].max()
    y_hat = np.exp(zl) / np.exp(zl).sum()
    v = y.sum()
    delta = v * y_hat - y
    d_w = [None] * params.depth
    d_b = [None] * params.depth
    for i in range(params.depth - 1, -1, -1):
        d_w[i] = np.outer(acts[i], delta)
        d_b[i] = delta.copy()
        if i:
            delta = _act_deriv(zs[i - 1], params.activation) * (params.weights[i] @ delta)
    return Gradient(d_w, d_b)


def _check_batch(params, batch):
    X = _check_input(params, batch.X)
    Y = _check_labels(params, batch.Y, X.shape[1])
    return X, Y


def error_matrices(params, batch, cache=None):
    """Per-layer error matrices ``D_1 .. D_L`` (each ``b x d_i``)."""
    X, Y = _check_batch(params, batch)
    if cache is None:
        cache = forward(params, X)
    v = Y.sum(axis=0)
    d = (cache.probabilities * v[None, :] - Y).T
    ds = [d]
    for i in range(params.depth - 1, 0, -1):
        h = _act_deriv(cache.pre_activations[i - 1], params.activation).T
        d = (d @ params.weights[i].T) * h
        ds.append(d)
    return ds[::-1]


def per_example_gradients(params, batch):
    """Rows are the flattened single-example gradients, shape ``(b, n_params)``."""
    X, _ = _check_batch(params, batch)
    cache = forward(params, X)
    ds = error_matrices(params, batch, cache)
    b = X.shape[1]
    parts = []
    for a_prev, d in zip(cache.activations, ds):
        parts.append(np.einsum("ik,kj->kij", a_prev, d).reshape(b, -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def sequential_sum(rows, order=None):
    """Sum rows one at a time in ``order`` (index order by default)."""
    if order is None:
        order = range(rows.shape[0])
    it = iter(order)
    acc = rows[next(it)].copy()
    for k in it:
        acc += rows[k]
    return acc


def grad_batch(params, batch, plan=None):
    """Mean gradient over the batch.

    Per-example gradients are accumulated one by one in index order, or in
    the order dictated by ``plan`` (any object with a ``reduce(rows)`` method).
    """
    rows = per_example_gradients(params, batch)
    total = sequential_sum(rows) if plan is None else plan.reduce(rows)
    return Gradient.from_flat(total / rows.shape[0], params)


def grad_batch_matrix(params, batch):
    """Matrix-form mean gradient ``A_{i-1} D_i / b``; a second code path."""
    X, _ = _check_batch(params, batch)
    cache = forward(params, X)
    ds = error_matrices(params, batch, cache)
    b = X.shape[1]
    return Gradient([a @ d / b for a, d in zip(cache.activations, ds)],
                    [d.mean(axis=0) for d in ds])


def invert_single_example(g, eps=1e-12):
    """Recover ``x`` from a single-example gradient.

    Returns ``(x, delta_1)``, or ``None`` when the first-layer error is
    (numerically) zero and ``x`` is not identifiable.
    """
    delta = np.asarray(g.d_biases[0], dtype=np.float64)
    nrm2 = float(delta @ delta)
    if np.sqrt(nrm2) <= eps:
        return None
    x = g.d_weights[0] @ delta / nrm2
    return x, delta
