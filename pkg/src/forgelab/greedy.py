"""Search-based forging: greedy sampling and class-wise nearest neighbours.

Both attacks only draw replacements from the dataset minus the forbidden set
``U``. Errors are reported as the ℓ2 distance between the recorded next
checkpoint and the one recomputed from the forged batch; the raw gradient
distance is kept alongside.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import MiniBatch
from .nn import grad_batch, l2_distance, per_example_losses
from .trace import ExecutionTrace, sgd_step


class PoolTooSmall(ValueError):
    pass


@dataclass
class ForgeTask:
    trace: object
    step: int
    forbidden: np.ndarray
    dataset: object
    domain: object = None

    def __post_init__(self):
        if not 0 <= self.step < self.trace.steps:
            raise ValueError(f"step {self.step} outside [0, {self.trace.steps})")
        self.forbidden = np.unique(np.asarray(self.forbidden, dtype=np.int64))
        if self.domain is None:
            self.domain = self.dataset.domain

    @property
    def theta(self):
        return self.trace.checkpoints[self.step]

    @property
    def target(self):
        return self.trace.checkpoints[self.step + 1]

    @property
    def batch(self):
        return self.trace.batches[self.step]


@dataclass
class ForgeResult:
    forged_batch: MiniBatch
    approx_error: float
    method: str
    grad_distance: float = float("nan")
    metadata: dict = field(default_factory=dict)


def batch_indices(task):
    idx = task.dataset.locate(task.batch)
    if np.any(idx < 0):
        raise ValueError("trace batch contains examples not present in the dataset")
    return idx


def _errors(task, batch):
    g_ref = grad_batch(task.theta, task.batch)
    g = grad_batch(task.theta, batch)
    upd = l2_distance(sgd_step(task.theta, batch, task.trace.lr), task.target)
    return upd, l2_distance(g, g_ref)


def greedy_search(task, n_pool=None, m_batches=100, seed=0):
    """Sample ``m_batches`` candidates from an ``n_pool`` subset of D \\ U, keep the best.

    Examples of the trace batch outside ``U`` are kept; only the
    ``|B ∩ U|`` forbidden positions are resampled. With every example
    forbidden this is the plain greedy search over whole batches.
    """
    ds = task.dataset
    b = task.batch.size
    n_pool = 10 * b if n_pool is None else n_pool
    idx = batch_indices(task)
    forbidden = set(task.forbidden.tolist())
    replace = np.array([i in forbidden for i in idx.tolist()])
    k = int(replace.sum())
    kept = idx[~replace]
    excluded = forbidden | set(kept.tolist())
    allowed = np.array([i for i in range(len(ds)) if i not in excluded], dtype=np.int64)
    if k == 0:
        kept_batch = ds.batch(idx)
        upd, gd = _errors(task, kept_batch)
        return ForgeResult(kept_batch, upd, "greedy", gd, {"candidates": 0, "seed": seed, "k": 0})
    n_pool = min(n_pool, allowed.size)
    if n_pool < k or m_batches < 1:
        raise PoolTooSmall(f"need {k} replacements, only {allowed.size} allowed examples")
    rng = np.random.default_rng(seed)
    pool = rng.choice(allowed, size=n_pool, replace=False)
    g_ref = grad_batch(task.theta, task.batch)
    best = None
    for j in range(m_batches):
        chosen = rng.choice(pool, size=k, replace=False)
        cand_idx = idx.copy()
        cand_idx[replace] = chosen
        cand = ds.batch(cand_idx)
        gd = l2_distance(grad_batch(task.theta, cand), g_ref)
        # ties resolved by first candidate index
        if best is None or gd < best[0]:
            best = (gd, j, cand, cand_idx)
    gd, j, cand, cand_idx = best
    upd = l2_distance(sgd_step(task.theta, cand, task.trace.lr), task.target)
    meta = {"candidates": m_batches, "seed": seed, "k": k, "best_candidate": j,
            "pool": n_pool, "indices": cand_idx.tolist()}
    return ForgeResult(cand, upd, "greedy", gd, meta)


def nearest_neighbor_forge(task):
    """Replace each forbidden example by its closest same-class example from D \\ U."""
    ds = task.dataset
    idx = batch_indices(task)
    forbidden = set(task.forbidden.tolist())
    keep_mask = np.ones(len(ds), dtype=bool)
    keep_mask[task.forbidden] = False
    labels = ds.labels
    new_idx = idx.copy()
    for pos, i in enumerate(idx.tolist()):
        if i not in forbidden:
            continue
        cands = np.flatnonzero(keep_mask & (labels == labels[i]))
        if cands.size == 0:
            raise PoolTooSmall(f"no example of class {labels[i]} outside the forbidden set")
        dist = np.linalg.norm(ds.X[:, cands] - ds.X[:, [i]], axis=0)
        new_idx[pos] = cands[int(np.argmin(dist))]  # argmin picks lowest index on ties
    forged = ds.batch(new_idx)
    upd, gd = _errors(task, forged)
    return ForgeResult(forged, upd, "nearest_neighbor", gd, {"indices": new_idx.tolist()})


def forbidden_subset(task_batch_idx, k, seed):
    rng = np.random.default_rng(seed)
    return rng.choice(task_batch_idx, size=k, replace=False)


def forging_fraction_sweep(trace, dataset, fractions, seeds, n_pool=None, m_batches=100,
                           step=None, attack="greedy"):
    """Approximation error vs forging fraction at the middle checkpoint.

    Returns ``(rows, raw)`` where ``raw[fraction]`` lists per-seed errors in
    seed order.
    """
    step = trace.steps // 2 if step is None else step
    b = trace.config.batch_size
    probe = ForgeTask(trace, step, [], dataset)
    idx = batch_indices(probe)
    rows, raw = [], {}
    for frac in fractions:
        k = max(1, min(b, int(round(frac * b))))
        errs = []
        for s in seeds:
            task = ForgeTask(trace, step, forbidden_subset(idx, k, s), dataset)
            if attack == "greedy":
                res = greedy_search(task, n_pool, m_batches, seed=s)
            else:
                res = nearest_neighbor_forge(task)
            errs.append(res.approx_error)
        raw[frac] = errs
        rows.append({"fraction": frac, "k": k, "min": min(errs),
                     "median": float(np.median(errs)), "max": max(errs), "runs": len(errs)})
    return rows, raw


@dataclass
class CorrelationResult:
    pairs: list
    spearman: float | None
    pvalue: float | None


def loss_correlation_experiment(trace, dataset, n_examples, stride, seed=0,
                                n_pool=None, m_batches=20):
    """Per-example loss vs error of forging that single example, across training.

    A true batch is sampled once; each of ``n_examples`` of its members is
    forged alone (greedy, fraction 1/b) at checkpoints ``0, stride, ...``.
    """
    if stride < 1 or trace.steps < stride:
        raise ValueError("stride must be in [1, T]")
    b = trace.config.batch_size
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=b, replace=False)
    true_batch = dataset.batch(idx)
    members = idx[:n_examples]
    pairs = []
    for i in range(0, trace.steps, stride):
        theta = trace.checkpoints[i]
        losses = per_example_losses(theta, true_batch.X, true_batch.Y)
        # a one-step trace anchored at checkpoint i with the sampled batch
        sub = _anchored_trace(trace, i, true_batch)
        for pos, member in enumerate(members.tolist()):
            task = ForgeTask(sub, 0, [member], dataset)
            res = greedy_search(task, n_pool, m_batches, seed=seed + 7919 * i + pos)
            pairs.append((i, member, float(losses[pos]), res.approx_error))
    loss_vals = [p[2] for p in pairs]
    err_vals = [p[3] for p in pairs]
    if np.ptp(loss_vals) == 0 or np.ptp(err_vals) == 0:
        return CorrelationResult(pairs, None, None)
    rho, p = stats.spearmanr(loss_vals, err_vals)
    return CorrelationResult(pairs, float(rho), float(p))


def _anchored_trace(trace, i, batch):
    theta = trace.checkpoints[i]
    return ExecutionTrace([theta, sgd_step(theta, batch, trace.lr)], [batch], trace.config)


def expected_pair_count(n_examples, steps, stride):
    return n_examples * math.ceil(steps / stride)


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
