"""Emulated reproduction error from reordered gradient accumulation.

Floating-point addition is not associative, so summing the same per-example
gradients in a different order gives slightly different updates. A
:class:`ReductionPlan` fixes one such order; :func:`measure_repr_error`
recomputes every step of a trace under fresh plans and records the largest
ℓ2 deviation from the stored checkpoints.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .nn import grad_batch, l2_distance, sequential_sum
from .trace import sgd_step

STRATEGIES = ("sequential_permuted", "pairwise_tree")


@dataclass(frozen=True)
class ReductionPlan:
    """Summation order for per-example gradients.

    ``seed=None`` means index order (the same order training uses).
    """

    strategy: str = "sequential_permuted"
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")

    @classmethod
    def identity(cls):
        return cls("sequential_permuted", None)

    def order(self, n):
        if self.seed is None:
            return np.arange(n)
        return np.random.default_rng([self.seed, n]).permutation(n)

    def reduce(self, rows):
        order = self.order(rows.shape[0])
        if self.strategy == "sequential_permuted":
            return sequential_sum(rows, order)
        level = [rows[k] for k in order]
        while len(level) > 1:
            nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        return level[0].copy()


def grad_batch_with_plan(params, batch, plan):
    return grad_batch(params, batch, plan)


@dataclass
class ReproReport:
    per_step_errors: list
    eps_repr: float
    repeats: int
    rows: list = None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "repeat", "error_l2"])
        for step, rep, err in self.rows or []:
            w.writerow([step, rep, repr(err)])
        return buf.getvalue()


def plan_seed(base, step, repeat, repeats):
    return base + step * repeats + repeat


def measure_repr_error(trace, repeats=10, plan_seed_base=0,
                       strategy="sequential_permuted", shuffle=True):
    """Recompute each step ``repeats`` times under fresh plans.

    With ``shuffle=False`` every recomputation uses index order, which must
    reproduce the trace exactly.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    rows, per_step = [], []
    for i in range(trace.steps):
        theta, batch, target = trace.checkpoints[i], trace.batches[i], trace.checkpoints[i + 1]
        worst = 0.0
        for r in range(repeats):
            seed = plan_seed(plan_seed_base, i, r, repeats) if shuffle else None
            plan = ReductionPlan(strategy, seed)
            err = l2_distance(sgd_step(theta, batch, trace.lr, plan), target)
            rows.append((i, r, err))
            worst = max(worst, err)
        per_step.append(worst)
    return ReproReport(per_step, max(per_step), repeats, rows)
