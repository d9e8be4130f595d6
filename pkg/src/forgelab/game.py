"""The verifier/adversary forging game over a recorded trace."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_TOL, distinct, in_domain
from .exact import ForgeryFailed, InfeasibleForgery, error_matrix_forge, perturb_forge
from .greedy import ForgeResult, ForgeTask, batch_indices, greedy_search, nearest_neighbor_forge
from .nn import l2_distance
from .reproduce import ReductionPlan
from .trace import sgd_step

ADVERSARIES = ("greedy", "nearest_neighbor", "exact_perturb", "exact_error_matrix", "honest_replay")
ACCEPT, REJECT = "ACCEPT", "REJECT"


@dataclass
class GameConfig:
    eps: float
    domain: object
    challenge_seed: int = 0
    adversary: str = "greedy"
    adversary_seed: int = 0
    domain_tol: float = DEFAULT_TOL
    equality_tol: float = DEFAULT_TOL
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.adversary not in ADVERSARIES:
            raise ValueError(f"adversary must be one of {ADVERSARIES}")


@dataclass
class GameOutcome:
    verdict: str
    reject_reason: str | None
    measured_error: float | None
    step: int
    forge_result: ForgeResult | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def accepted(self):
        return self.verdict == ACCEPT

    def to_json(self):
        fr = self.forge_result
        return json.dumps({
            "verdict": self.verdict,
            "reject_reason": self.reject_reason,
            "measured_error": self.measured_error,
            "step": self.step,
            "method": fr.method if fr else None,
            "adversary_error": fr.approx_error if fr else None,
            "diagnostics": self.diagnostics,
        }, indent=1, sort_keys=True, default=str)


def forge(trace, dataset, t, cfg):
    """Run the configured adversary on step ``t`` with full trace and dataset access."""
    theta, batch = trace.checkpoints[t], trace.batches[t]
    opts = cfg.options
    seed = cfg.adversary_seed
    if cfg.adversary == "honest_replay":
        return ForgeResult(batch.copy(), 0.0, "honest_replay", 0.0)
    if cfg.adversary in ("greedy", "nearest_neighbor"):
        task = ForgeTask(trace, t, batch_indices(ForgeTask(trace, t, [], dataset)), dataset, cfg.domain)
        if cfg.adversary == "greedy":
            return greedy_search(task, opts.get("n_pool"), opts.get("m_batches", 100), seed)
        return nearest_neighbor_forge(task)
    if cfg.adversary == "exact_perturb":
        return perturb_forge(theta, batch, opts.get("scale", 1.0), seed,
                             opts.get("method", "factored"), trace.lr)
    if theta.depth != 1:
        raise InfeasibleForgery("error-matrix forging needs a single-layer model")
    return error_matrix_forge(theta.weights[0], batch, seed, opts.get("max_resamples", 5),
                              bias=theta.biases[0])


def play(trace, cfg, verifier_plan=None, dataset=None):
    """One round: random challenge step, forge, validate, recompute, threshold."""
    rng = np.random.default_rng(cfg.challenge_seed)
    t = int(rng.integers(trace.steps))
    original = trace.batches[t]
    try:
        fr = forge(trace, dataset, t, cfg)
    except (InfeasibleForgery, ForgeryFailed, ValueError) as exc:
        return GameOutcome(REJECT, "not_distinct", None, t, None, {"adversary_failure": str(exc)})
    forged = fr.forged_batch
    if forged.X.shape != original.X.shape or forged.Y.shape != original.Y.shape:
        return GameOutcome(REJECT, "not_distinct", None, t, fr, {"reason": "shape mismatch"})
    tol = cfg.equality_tol
    if not (distinct(original, forged, tol) or distinct(forged, original, tol)):
        return GameOutcome(REJECT, "not_distinct", None, t, fr)
    if not in_domain(forged, cfg.domain, cfg.domain_tol):
        return GameOutcome(REJECT, "out_of_domain", None, t, fr)
    plan = verifier_plan or ReductionPlan.identity()
    recomputed = sgd_step(trace.checkpoints[t], forged, trace.lr, plan)
    err = l2_distance(trace.checkpoints[t + 1], recomputed)
    if err > cfg.eps:
        return GameOutcome(REJECT, "error_exceeds_eps", err, t, fr)
    return GameOutcome(ACCEPT, None, err, t, fr)


def threshold_from_measurement(report, margin=1.0):
    return margin * report.eps_repr


def verify_trace(trace, eps, plan=None, steps=None):
    """Recompute every step (or ``steps``) and threshold each error at ``eps``."""
    plan = plan or ReductionPlan.identity()
    out = []
    for i in (range(trace.steps) if steps is None else steps):
        recomputed = sgd_step(trace.checkpoints[i], trace.batches[i], trace.lr, plan)
        err = l2_distance(trace.checkpoints[i + 1], recomputed)
        out.append(GameOutcome(ACCEPT if err <= eps else REJECT,
                               None if err <= eps else "error_exceeds_eps", err, i))
    return out
