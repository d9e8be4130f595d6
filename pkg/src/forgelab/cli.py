"""Command line harness: ``forgelab {train,repr,game,sweep,brute}``.

All numeric results go to CSV (or JSON for game outcomes); logs go to stderr.
Each command also writes ``<out>.run.json`` describing how it was invoked.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from . import trace as trace_mod
from .data import Domain, gen_synthetic, load_idx
from .exact import brute_force_search, count_batches, count_table_csv
from .game import ADVERSARIES, GameConfig, play, threshold_from_measurement
from .greedy import forging_fraction_sweep, loss_correlation_experiment, rows_to_csv
from .nn import FcnArchitecture
from .reproduce import STRATEGIES, ReductionPlan, measure_repr_error
from .trace import TrainConfig

log = logging.getLogger("forgelab")

DEFAULT_ARCH = "64,16,3"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    outputs: list
    argv: list = field(default_factory=list)
    code_version: str = __version__
    python: str = field(default_factory=platform.python_version)
    wall_clock_s: float = 0.0

    def write(self, out):
        path = Path(str(out) + ".run.json")
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str) + "\n")
        return path


def _seed(value):
    if value is not None:
        return value
    return int(os.environ.get("FORGELAB_SEED", "0"))


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dataset(source, n_examples, d, n_classes, domain, seed):
    if source == "synthetic":
        return gen_synthetic(seed, n_examples, d, n_classes, domain)
    if source.startswith("idx:"):
        images, labels = source[4:].split(",")
        return load_idx(images, labels, n_classes)
    raise ValueError(f"unknown data source {source!r}")


def dataset_for(tr, overrides=None):
    """Rebuild the dataset a trace was trained on from its metadata."""
    meta = dict(tr.meta.get("data", {}))
    meta.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if not meta:
        raise ValueError("trace carries no data description; pass --data")
    arch = tr.config.arch
    return _dataset(meta["source"], meta.get("n_examples", 1000), arch.n_inputs, arch.n_classes,
                    Domain.parse(meta.get("domain", "grid:256")), meta.get("seed", 0))


def cmd_train(args):
    dims = tuple(int(t) for t in args.arch.split(","))
    arch = FcnArchitecture(dims, args.act)
    seed = _seed(args.seed)
    data_seed = _seed(args.data_seed) if args.data_seed is not None else seed
    if args.lr == 0:
        log.warning("lr is 0: every checkpoint will equal the initialisation")
    cfg = TrainConfig(args.lr, args.steps, args.b, seed, arch)
    data_meta = {"source": args.data, "n_examples": args.n_examples,
                 "domain": args.domain, "seed": data_seed}
    ds = _dataset(args.data, args.n_examples, dims[0], dims[-1], Domain.parse(args.domain), data_seed)
    tr = trace_mod.train(ds, cfg, {"data": data_meta})
    paths = trace_mod.save(tr, args.out)
    log.info("wrote %d-step trace to %s", tr.steps, paths[0])
    return 0, cfg.to_dict() | {"data": data_meta}, {"seed": seed, "data_seed": data_seed}, list(paths)


def cmd_repr(args):
    tr = trace_mod.load(args.trace)
    report = measure_repr_error(tr, args.repeats, args.seed_base, args.strategy,
                                shuffle=not args.identity)
    _emit(report.to_csv(), args.out)
    log.info("eps_repr = %r over %d steps x %d repeats", report.eps_repr, tr.steps, args.repeats)
    return 0, vars(args), {"seed_base": args.seed_base}, [args.out]


def cmd_game(args):
    tr = trace_mod.load(args.trace)
    ds = dataset_for(tr, {"source": args.data})
    domain = Domain.parse(args.domain) if args.domain else ds.domain
    if args.eps == "auto":
        report = measure_repr_error(tr, args.repeats, args.seed_base)
        eps = threshold_from_measurement(report, args.margin)
        log.info("auto threshold: eps_repr=%r margin=%g -> eps=%r", report.eps_repr, args.margin, eps)
    else:
        eps = float(args.eps)
    adversary = args.adversary.replace("-", "_")
    cfg = GameConfig(eps, domain, _seed(args.challenge_seed), adversary, _seed(args.adversary_seed),
                     options={"scale": args.scale, "m_batches": args.m, "n_pool": args.n_pool})
    plan = ReductionPlan(args.strategy, args.verifier_seed)
    outcome = play(tr, cfg, plan, ds)
    text = outcome.to_json()
    _emit(text + "\n", args.out)
    log.info("%s %s (step %d, error %r, eps %r)", outcome.verdict, outcome.reject_reason or "",
             outcome.step, outcome.measured_error, eps)
    return (0 if outcome.accepted else 1), vars(args) | {"eps_used": eps}, \
        {"challenge_seed": cfg.challenge_seed, "adversary_seed": cfg.adversary_seed}, [args.out]


def _parse_fractions(text, b):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "1/b":
            out.append(1.0 / b)
        else:
            out.append(float(Fraction(tok)))
    return out


def cmd_sweep(args):
    tr = trace_mod.load(args.trace)
    ds = dataset_for(tr, {"source": args.data})
    base = _seed(args.seed)
    if args.kind == "fraction":
        fractions = _parse_fractions(args.fractions, tr.config.batch_size)
        seeds = [base + s for s in range(args.seeds)]
        rows, _ = forging_fraction_sweep(tr, ds, fractions, seeds, args.n_pool, args.m,
                                         attack=args.attack)
        _emit(rows_to_csv(rows, ["fraction", "k", "min", "median", "max", "runs"]), args.out)
    else:
        res = loss_correlation_experiment(tr, ds, args.n_examples, args.stride, base,
                                          args.n_pool, args.m)
        rows = [{"step": s, "example": e, "loss": l, "approx_error": a} for s, e, l, a in res.pairs]
        text = rows_to_csv(rows, ["step", "example", "loss", "approx_error"])
        rho = "undefined" if res.spearman is None else repr(res.spearman)
        _emit(text + f"# spearman,{rho}\n", args.out)
        log.info("spearman correlation: %s", rho)
    return 0, vars(args), {"seed": base}, [args.out]


def _model_for_brute(kind, d, n, hidden, seed):
    dims = (d, n) if kind == "logreg" else (d, hidden, n)
    params = trace_mod.init_params(FcnArchitecture(dims, "relu"), seed)
    rng = np.random.default_rng([seed, 2])
    for b in params.biases:
        b[:] = rng.uniform(-0.1, 0.1, b.shape)
    return params


def cmd_brute(args):
    v_values = [int(t) for t in args.v.split(",")]
    b_values = [int(t) for t in args.b.split(",")]
    seed = _seed(args.seed)
    model = _model_for_brute(args.model, args.d, args.n, args.hidden, seed)
    reports = []
    for v in v_values:
        for b in b_values:
            total = count_batches(args.d, args.n, v, b)
            if total > args.budget:
                log.info("v=%d b=%d: %d batches exceed budget, skipped", v, b, total)
                continue
            rep = brute_force_search(args.d, args.n, v, b, model, seed, args.tol, args.budget, args.jobs)
            log.info("v=%d b=%d: %d batches, found=%s, min gap %.3g", v, b, total, rep.found, rep.min_gap)
            reports.append(rep)
    _emit(count_table_csv(reports, v_values, b_values, args.d, args.n), args.out)
    return 0, vars(args), {"seed": seed}, [args.out]


def build_parser():
    p = argparse.ArgumentParser(prog="forgelab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an FCN and record its execution trace")
    t.add_argument("--arch", default=DEFAULT_ARCH, help="layer dims d0,d1,...,dL")
    t.add_argument("--act", default="relu", choices=["relu", "identity"])
    t.add_argument("--b", type=int, default=32, help="batch size")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=None, help="defaults to $FORGELAB_SEED or 0")
    t.add_argument("--data", default="synthetic", help="synthetic | idx:<images>,<labels>")
    t.add_argument("--data-seed", type=int, default=None)
    t.add_argument("--n-examples", type=int, default=1000)
    t.add_argument("--domain", default="grid:256", help="grid:<v> | box[:lo,hi], optional +real")
    t.add_argument("--out", required=True, help="trace manifest path (blob written alongside)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("repr", help="measure emulated reproduction error",
                       description="CSV columns: step, repeat, error_l2 (l2 distance in parameter units)")
    r.add_argument("--trace", required=True)
    r.add_argument("--repeats", type=int, default=10)
    r.add_argument("--seed-base", type=int, default=0)
    r.add_argument("--strategy", default="sequential_permuted", choices=STRATEGIES)
    r.add_argument("--identity", action="store_true", help="recompute in index order (expect zero error)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_repr)

    g = sub.add_parser("game", help="play the forging game; exit 0 = ACCEPT, 1 = REJECT",
                       description="Writes the outcome as JSON: verdict, reject_reason, measured_error, step.")
    g.add_argument("--trace", required=True)
    g.add_argument("--adversary", default="greedy",
                   choices=[a.replace("_", "-") for a in ADVERSARIES])
    g.add_argument("--eps", default="auto", help="threshold, or 'auto' = margin x measured eps_repr")
    g.add_argument("--margin", type=float, default=1.0)
    g.add_argument("--repeats", type=int, default=10)
    g.add_argument("--seed-base", type=int, default=0)
    g.add_argument("--domain", default=None, help="override the dataset domain")
    g.add_argument("--data", default=None)
    g.add_argument("--challenge-seed", type=int, default=None)
    g.add_argument("--adversary-seed", type=int, default=None)
    g.add_argument("--verifier-seed", type=int, default=None, help="plan seed; omitted = index order")
    g.add_argument("--strategy", default="sequential_permuted", choices=STRATEGIES)
    g.add_argument("--scale", type=float, default=1.0, help="perturbation Frobenius norm")
    g.add_argument("--m", type=int, default=100, help="greedy candidates")
    g.add_argument("--n-pool", type=int, default=None)
    g.add_argument("--out")
    g.set_defaults(func=cmd_game)

    s = sub.add_parser("sweep", help="forging-fraction or loss-correlation experiment",
                       description="fraction: CSV fraction,k,min,median,max,runs (update l2 distance). "
                                   "loss: CSV step,example,loss,approx_error plus a '# spearman' line.")
    s.add_argument("--trace", required=True)
    s.add_argument("--kind", default="fraction", choices=["fraction", "loss"])
    s.add_argument("--fractions", default="1/b,0.25,0.5,1")
    s.add_argument("--attack", default="greedy", choices=["greedy", "nearest_neighbor"])
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-pool", type=int, default=None)
    s.add_argument("--m", type=int, default=100)
    s.add_argument("--n-examples", type=int, default=5)
    s.add_argument("--stride", type=int, default=20)
    s.add_argument("--data", default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    bf = sub.add_parser("brute", help="exhaustive forging search over a (v, b) grid",
                        description="CSV rows v, columns b=..; cells x(count) = searched, none found; "
                                    "found(count); ?(count) = not searched.")
    bf.add_argument("--d", type=int, default=4)
    bf.add_argument("--n", type=int, default=3)
    bf.add_argument("--v", default="2,3,4,5,6")
    bf.add_argument("--b", default="1,2,3,4,5")
    bf.add_argument("--budget", type=float, default=2e6)
    bf.add_argument("--model", default="logreg", choices=["logreg", "fcn"])
    bf.add_argument("--hidden", type=int, default=10)
    bf.add_argument("--tol", type=float, default=1e-10)
    bf.add_argument("--seed", type=int, default=None)
    bf.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    bf.add_argument("--out")
    bf.set_defaults(func=cmd_brute)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        code, config, seeds, outputs = args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    config = {k: v for k, v in config.items() if k != "func"}
    outputs = [str(o) for o in outputs if o is not None]
    if outputs:
        RunManifest(args.command, config, seeds, outputs, argv,
                    wall_clock_s=time.perf_counter() - start).write(outputs[0])
    return code


if __name__ == "__main__":
    sys.exit(main())
