"""Exact forging: gradient-preserving constructions and exhaustive search.

Three routes to a distinct batch with the same gradient:

* input perturbations ``P`` with ``P @ D1 = 0`` and ``W1.T @ P = 0``
  (:func:`perturbation_basis`, :func:`perturb_forge`);
* for single-layer models, sampling a zero-row-sum error matrix ``D`` and
  solving ``X' @ D = b * G`` (:func:`error_matrix_forge`);
* brute-force enumeration of every batch over a small discrete domain
  (:func:`brute_force_search`).
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .data import MiniBatch, distinct, one_hot
from .greedy import ForgeResult
from .nn import (FcnParams, error_matrices, forward, grad_batch, l2_distance,
                 per_example_gradients, softmax)


class InfeasibleForgery(ValueError):
    """No non-trivial construction exists for the given model and batch."""


class ForgeryFailed(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def feasibility(d, d1, b):
    """Sufficient condition ``d*b > d1*(d+b)`` for a non-zero perturbation."""
    if min(d, d1, b) < 1:
        raise ValueError("dimensions must be positive")
    return d * b > d1 * (d + b)


def factored_feasibility(d, rank_w1, b, rank_d1):
    """Whether ``null(W1.T)`` and ``null(D1.T)`` are both non-trivial."""
    return d > rank_w1 and b > rank_d1


@dataclass
class PerturbationBasis:
    """Admissible perturbations of a ``d x b`` input matrix.

    ``stacked_kron`` keeps an explicit orthonormal basis of ``vec(P)``.
    ``factored`` keeps ``left`` (basis of null(W1.T), ``d x p``) and
    ``right`` (basis of null(D1.T), ``b x q``); then ``P = left @ F @ right.T``
    and ``vec(P) = kron(right, left) @ vec(F)``.
    """

    method: str
    dims: tuple
    k_rank: int
    vectors: np.ndarray | None = None
    left: np.ndarray | None = None
    right: np.ndarray | None = None

    @property
    def dim(self):
        if self.vectors is not None:
            return self.vectors.shape[1]
        return self.left.shape[1] * self.right.shape[1]

    @property
    def basis_vectors(self):
        if self.vectors is not None:
            return self.vectors
        return linalg.kron(self.right, self.left)

    def combine(self, coeffs):
        """Perturbation matrix for coefficient vector ``coeffs`` (length ``dim``)."""
        d, _, b = self.dims
        coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
        if self.vectors is not None:
            return linalg.unvec(self.vectors @ coeffs, (d, b))
        F = linalg.unvec(coeffs, (self.left.shape[1], self.right.shape[1]))
        return self.left @ F @ self.right.T

    def sample(self, rng, scale=1.0):
        """Random ``P`` with standard-normal coefficients and ``||P||_F = scale``."""
        if self.dim == 0:
            raise InfeasibleForgery("only the trivial perturbation exists")
        P = self.combine(rng.standard_normal(self.dim))
        nrm = np.linalg.norm(P)
        return P * (scale / nrm) if nrm > 0 else P


def stacked_system(W1, D1):
    """``K = [D1.T ⊗ I_d ; I_b ⊗ W1.T]`` so that ``K vec(P) = 0`` encodes both constraints."""
    d, _ = W1.shape
    b = D1.shape[0]
    return np.vstack([linalg.kron(D1.T, np.eye(d)), linalg.kron(np.eye(b), W1.T)])


def perturbation_basis(params, batch, method="factored", tol=linalg.DEFAULT_TOL):
    W1 = params.weights[0]
    D1 = error_matrices(params, batch)[0]
    d, d1 = W1.shape
    b = batch.size
    if method == "stacked_kron":
        K = stacked_system(W1, D1)
        N = linalg.nullspace(K, tol)
        return PerturbationBasis(method, (d, d1, b), d * b - N.shape[1], vectors=N)
    if method == "factored":
        left = linalg.nullspace(W1.T, tol)
        right = linalg.nullspace(D1.T, tol)
        dim = left.shape[1] * right.shape[1]
        return PerturbationBasis(method, (d, d1, b), d * b - dim, left=left, right=right)
    raise ValueError(f"unknown method {method!r}")


def perturb_forge(params, batch, scale=1.0, seed=0, method="factored", lr=None,
                  tol=linalg.DEFAULT_TOL):
    """Forge ``B' = (X + P, Y)`` with a random admissible perturbation.

    ``approx_error`` is the gradient distance, or the update distance when
    ``lr`` is given.
    """
    basis = perturbation_basis(params, batch, method, tol)
    if basis.dim == 0:
        d, d1, b = basis.dims
        raise InfeasibleForgery(
            f"no non-trivial perturbation (d={d}, d1={d1}, b={b}, "
            f"sufficient condition {'holds' if feasibility(d, d1, b) else 'fails'})")
    rng = np.random.default_rng(seed)
    P = basis.sample(rng, scale) if scale > 0 else np.zeros_like(batch.X)
    forged = MiniBatch(batch.X + P, batch.Y.copy())
    gd = l2_distance(grad_batch(params, forged), grad_batch(params, batch))
    err = gd if lr is None else lr * gd
    meta = {"seed": seed, "scale": scale, "basis_dim": basis.dim, "k_rank": basis.k_rank,
            "basis_method": method, "distinct": distinct(batch, forged)}
    return ForgeResult(forged, err, "exact_perturb", gd, meta)


@dataclass
class ErrorMatrixDraw:
    D: np.ndarray
    v_constants: np.ndarray


def sample_error_matrix(b, n, rng, col_sums=None):
    """Gaussian ``b x n`` matrix with zero row sums.

    With ``col_sums`` the column sums are pinned too (needed to preserve a
    bias gradient); ``col_sums`` must itself sum to zero.
    """
    D = rng.standard_normal((b, n))
    if col_sums is None:
        D[:, -1] = -D[:, :-1].sum(axis=1)
        return D
    D = D - D.mean(axis=1, keepdims=True) - D.mean(axis=0, keepdims=True) + D.mean()
    return D + np.asarray(col_sums)[None, :] / b


def _single_layer(W, bias):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return FcnParams([W], [b], "identity")


def error_matrix_forge(W, batch, seed=0, max_resamples=5, bias=None, v=None, D=None,
                       tol=linalg.DEFAULT_TOL):
    """Forge a batch for the single-layer model ``softmax(W.T x [+ bias])``.

    Without ``bias`` only the weight gradient is matched (bias-free model);
    with ``bias`` its gradient is matched as well. Forged labels are real
    vectors ``Y' = f(X') diag(v) - D.T``.
    """
    model = _single_layer(W, bias)
    X, Y = batch.X, batch.Y
    b, n = batch.size, W.shape[1]
    d_true = error_matrices(model, batch)[0]
    G = X @ d_true / b
    if b <= linalg.rank(G, tol):
        raise InfeasibleForgery(f"b={b} does not exceed rank(G)={linalg.rank(G, tol)}")
    v = np.ones(b) if v is None else np.asarray(v, dtype=np.float64)
    col_sums = d_true.sum(axis=0) if bias is not None else None
    g_ref = grad_batch(model, batch)
    rng = np.random.default_rng(seed)
    tries = []
    for attempt in range(max(1, max_resamples)):
        Dk = np.array(D, dtype=np.float64) if D is not None else sample_error_matrix(b, n, rng, col_sums)
        rk_d = linalg.rank(Dk, tol)
        sol, ok = linalg.solve_ls(Dk.T, b * G.T, tol)
        Xf = sol.T
        rel = np.linalg.norm(Xf @ Dk - b * G) / max(1.0, np.linalg.norm(b * G))
        tries.append({"attempt": attempt, "rank_D": rk_d, "consistent": ok, "rel_residual": rel})
        if not ok:
            continue
        Z = W.T @ Xf + model.biases[0][:, None]
        Yf = softmax(Z) * v[None, :] - Dk.T
        forged = MiniBatch(Xf, Yf)
        if not distinct(batch, forged) and D is None:
            continue
        g = grad_batch(model, forged)
        gd_w = l2_distance(g.d_weights[0], g_ref.d_weights[0])
        gd = gd_w if bias is None else l2_distance(g, g_ref)
        meta = {"seed": seed, "resamples": attempt, "draw": ErrorMatrixDraw(Dk, v),
                "rel_residual": rel, "attempts": tries, "distinct": distinct(batch, forged)}
        return ForgeResult(forged, gd, "exact_error_matrix", gd, meta)
    raise ForgeryFailed(f"no consistent error matrix after {len(tries)} draws", {"attempts": tries})


# -- brute force ---------------------------------------------------------------

def count_batches(d, n, v_levels, b):
    """Exact number of size-``b`` subsets of ``{q/(v-1)}^d x one-hot(n)``."""
    return math.comb(v_levels ** d * n, b)


def enumerate_examples(d, n, v_levels):
    """All examples as ``(X, Y)`` columns; index ``e`` has label ``e % n``
    and pixel digits of ``e // n`` in base ``v`` (most significant first)."""
    total = v_levels ** d * n
    e = np.arange(total)
    codes, labels = e // n, e % n
    digits = np.empty((d, total), dtype=np.int64)
    rem = codes.copy()
    for j in range(d - 1, -1, -1):
        digits[j] = rem % v_levels
        rem //= v_levels
    return digits / (v_levels - 1), one_hot(labels, n)


def unrank_combination(rank, N, b):
    """The ``rank``-th ``b``-subset of ``range(N)`` in lexicographic order."""
    out, x = [], 0
    for i in range(b):
        while True:
            c = math.comb(N - x - 1, b - i - 1)
            if rank < c:
                break
            rank -= c
            x += 1
        out.append(x)
        x += 1
    return tuple(out)


def rank_combination(combo, N):
    b, r, prev = len(combo), 0, -1
    for i, c in enumerate(combo):
        for x in range(prev + 1, c):
            r += math.comb(N - x - 1, b - i - 1)
        prev = c
    return r


def _batch_grads(per_ex, combos):
    acc = per_ex[combos[:, 0]].copy()
    for j in range(1, combos.shape[1]):
        acc += per_ex[combos[:, j]]
    return acc / combos.shape[1]


def _scan(per_ex, target, N, b, lo, hi, skip, tol, chunk=1 << 16):
    """Scan combination ranks ``[lo, hi)``; returns ``(first_match_rank, min_gap)``."""
    it = itertools.islice(itertools.combinations(range(N), b), lo, hi)
    pos, min_gap = lo, np.inf
    while True:
        flat = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, chunk)),
                           dtype=np.int64)
        if flat.size == 0:
            return None, min_gap
        combos = flat.reshape(-1, b)
        dist = np.linalg.norm(_batch_grads(per_ex, combos) - target, axis=1)
        if pos <= skip < pos + combos.shape[0]:
            dist[skip - pos] = np.inf
        min_gap = min(min_gap, float(dist.min()))
        hits = np.flatnonzero(dist <= tol)
        if hits.size:
            return pos + int(hits[0]), min_gap
        pos += combos.shape[0]


def _scan_job(args):
    return _scan(*args)


@dataclass
class BruteForceReport:
    d: int
    n: int
    v_levels: int
    b: int
    total_batches: int
    found: bool
    complete: bool
    searched: int = 0
    min_gap: float = float("nan")
    true_batch: MiniBatch | None = None
    witness: MiniBatch | None = None
    extra: dict = field(default_factory=dict)

    @property
    def cell(self):
        if not self.complete and not self.found:
            return f"?({self.total_batches})"
        return f"{'found' if self.found else 'x'}({self.total_batches})"


def brute_force_search(d, n, v_levels, b, model, seed=0, tol=1e-10, budget=None, jobs=1):
    """Exhaustively look for a distinct batch matching a random batch's gradient.

    Searches all subsets in lexicographic order; ``budget`` caps the number
    of batches, otherwise the report is flagged incomplete and nothing is
    searched.
    """
    total = count_batches(d, n, v_levels, b)
    if budget is not None and total > budget:
        return BruteForceReport(d, n, v_levels, b, total, False, False)
    X, Y = enumerate_examples(d, n, v_levels)
    N = X.shape[1]
    per_ex = per_example_gradients(model, MiniBatch(X, Y))
    rng = np.random.default_rng(seed)
    true_rank = int(rng.integers(total))
    true_combo = np.array(unrank_combination(true_rank, N, b))
    target = _batch_grads(per_ex, true_combo[None, :])[0]
    jobs = max(1, min(jobs, total // 100000 + 1))
    bounds = [total * k // jobs for k in range(jobs + 1)]
    args = [(per_ex, target, N, b, bounds[k], bounds[k + 1], true_rank, tol) for k in range(jobs)]
    if jobs == 1:
        results = [_scan(*args[0])]
    else:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_scan_job, args))
    hits = [r for r, _ in results if r is not None]
    min_gap = min(g for _, g in results)
    true_batch = MiniBatch(X[:, true_combo], Y[:, true_combo])
    witness = None
    if hits:
        w = np.array(unrank_combination(min(hits), N, b))
        witness = MiniBatch(X[:, w], Y[:, w])
    return BruteForceReport(d, n, v_levels, b, total, bool(hits), True, total, min_gap,
                            true_batch, witness, {"true_rank": true_rank})


def count_table_csv(reports, v_values, b_values, d=4, n=3):
    """Render reports as rows ``v`` x columns ``b``; missing cells show ``?``."""
    by_cell = {(r.v_levels, r.b): r for r in reports}
    lines = ["v," + ",".join(f"b={b}" for b in b_values)]
    for v in v_values:
        cells = []
        for b in b_values:
            r = by_cell.get((v, b))
            cells.append(r.cell if r else f"?({count_batches(d, n, v, b)})")
        lines.append(f"{v}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def forward_activations(params, X):
    """Hidden activations ``A_1 .. A_{L-1}`` for the activation-preservation check."""
    return forward(params, X).activations[1:]
