"""Command-line entry point: ``sparse-ame <subcommand> ...``.

Exit codes: 0 on success, 2 for bad arguments or configs, 3 for runtime
failures.  Errors are reported on stderr as one JSON object.  The worker
count comes from ``SPARSE_AME_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import experiment, hierarchy, knockoffs, lasso, shapley
from .core import DiscreteGrid, Scheme, parse_distribution
from .errors import AmeError, ConfigError, StoreCorrupt
from .oracle import (
    NullGame,
    PoisonedLinearTask,
    PoisonedTaskOracle,
    Query,
    ThresholdGame,
    cached_evaluate,
    generate_poisoned_task,
    random_monotone_game,
)
from .sampling import Featurization, assemble_design, build_design, sample_rows
from .store import ObservationStore, make_header


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("UsageError", message, 2)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


def _write_json(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=1)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _query(args):
    return Query(id=args.query)


# ---------------------------------------------------------------------------
# Oracles from flags


def _add_oracle_args(p):
    p.add_argument("--oracle", choices=["threshold", "monotone", "poisoned", "null"], default="threshold")
    p.add_argument("--n", type=int, help="number of sources")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--task", help="task file written by gen-task (poisoned oracle)")
    p.add_argument("--noise-sd", type=float, default=0.0)


def _oracle(args):
    kw = {"noise_sd": args.noise_sd, "seed": args.seed}
    if args.oracle == "poisoned":
        if not args.task:
            raise ConfigError("--oracle poisoned needs --task")
        return PoisonedTaskOracle(PoisonedLinearTask.load(args.task), **kw)
    if args.n is None or args.n < 1:
        raise ConfigError("--n must be a positive source count")
    if args.oracle == "threshold":
        return ThresholdGame(args.n, args.k, args.threshold, **kw)
    if args.oracle == "null":
        return NullGame(args.n, **kw)
    game = random_monotone_game(args.n, args.seed)
    game.noise_sd = args.noise_sd
    return game


def _feat_from(dist_spec, scheme):
    dist = parse_distribution(dist_spec).validate()
    return dist, Featurization.for_distribution(scheme, dist)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_task(args):
    task = generate_poisoned_task(args.n, args.k, dim=args.dim, seed=args.seed)
    task.save(args.out)
    _write_json({"task": args.out, "n_sources": task.n_sources, "poison_indices": list(map(int, task.poison_indices))})


def cmd_sample(args):
    oracle = _oracle(args)
    dist, feat = _feat_from(args.dist, args.featurization)
    header = make_header(oracle.n_sources, dist.spec(), feat.scheme, args.seed, oracle=oracle.fingerprint())
    store = ObservationStore.open(args.store, header)
    rows = sample_rows(oracle.n_sources, args.m, feat.sampling_law, args.seed, knockoffs=args.knockoffs,
                       start=args.start)
    before = oracle.n_evaluations
    cached_evaluate(store, oracle, rows.masks, _query(args), rows.p, rows.knockoff_masks,
                    np.arange(args.start, args.start + args.m))
    _write_json({"store": args.store, "rows": len(store), "evaluations": oracle.n_evaluations - before})


def _load_design(args, with_knockoffs):
    store = ObservationStore.load(args.store)
    obs = store.for_query(args.query)
    if not obs:
        raise StoreCorrupt(f"{args.store} holds no rows for query {args.query!r}")
    dist, feat = _feat_from(store.header["p_spec"], store.header["featurization"])
    dummies = with_knockoffs and isinstance(dist, DiscreteGrid)
    design = build_design(obs, feat, with_knockoffs=with_knockoffs, with_dummies=dummies)
    if args.dump_design:
        design.to_csv(args.dump_design)
    return design, feat


def cmd_estimate(args):
    design, feat = _load_design(args, with_knockoffs=False)
    fit, report = lasso.fit_with_rule(design, args.lambda_rule, args.folds, args.seed, intercept=True)
    if args.cv_csv and report is not None:
        report.to_csv(args.cv_csv)
    est = lasso.estimate_ame(fit, feat)
    _write_json({"ame": [float(x) for x in est], "lambda": fit.lam, "v": feat.v,
                 "featurization": feat.scheme.value, "converged": fit.converged}, args.out)


def cmd_select(args):
    design, _ = _load_design(args, with_knockoffs=True)
    sel, _, report = knockoffs.select_with_fdr(design, args.q, args.lambda_rule, args.folds, args.seed)
    if args.cv_csv and report is not None:
        report.to_csv(args.cv_csv)
    _write_json(sel.to_json(), args.out)


def cmd_sv(args):
    oracle = _oracle(args)
    dist = parse_distribution(args.dist).validate()
    if args.method == "exact":
        vec = shapley.exact_sv(oracle, _query(args))
    elif args.method == "mc":
        vec = shapley.permutation_mc_sv(oracle, args.permutations, args.seed, query=_query(args))
    else:
        feat = Featurization.for_distribution(args.featurization, dist)
        rows = sample_rows(oracle.n_sources, args.m, feat.sampling_law, args.seed)
        y = oracle.evaluate_many(rows.masks, _query(args))
        design = assemble_design(rows.masks, rows.p, y, feat)
        vec = shapley.sv_via_ame(design, feat, dist, args.lambda_rule, args.folds, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["source", "value"])
        for i, v in vec.to_rows():
            w.writerow([i, repr(v)])
    finally:
        if args.out:
            out.close()
    try:
        bound = shapley.bound_report(dist, oracle.n_sources).to_json()
    except AmeError:
        bound = None  # no closed-form bound for this law
    if args.bound_out:
        _write_json(bound, args.bound_out)
    elif args.out:
        _write_json(bound)
    else:
        sys.stderr.write(json.dumps(bound, sort_keys=True) + "\n")


def _sel_json(sel):
    d = sel.to_json()
    if not len(sel.w):
        d.pop("w")  # stage 2 skipped
    return d


def cmd_hier(args):
    tree = hierarchy.SourceTree.load(args.tree)
    if args.store:
        header, stored_tree, rows, y = hierarchy.load_hier(args.store)
        if stored_tree.children != tree.children:
            raise StoreCorrupt("the store was sampled under a different tree")
    else:
        if not args.poisons:
            raise ConfigError("give --store, or --poisons to simulate a poisoned run")
        poisons = [int(x) for x in args.poisons.split(",") if x.strip()]
        game = hierarchy.HierPoisonGame(tree, poisons, cap=args.cap, noise_sd=args.noise_sd, seed=args.seed)
        p1, p2 = parse_distribution(args.p1).validate(), parse_distribution(args.p2).validate()
        rows = hierarchy.sample_hier_rows(tree, p1, p2, args.m, args.seed)
        y = game.evaluate_many(rows.second)
        if args.save:
            hierarchy.save_hier(args.save, tree, rows, y, seed=args.seed, p1_spec=p1.spec(), p2_spec=p2.spec())
    res = hierarchy.two_stage_estimate(rows, y, tree, args.q, args.lambda_rule, args.folds, args.seed)
    _write_json({"stage1": _sel_json(res.stage1), "stage2": _sel_json(res.stage2),
                 "fingerprint": res.fingerprint}, args.out)


_OVERRIDES = ("seed", "trials", "m", "q", "lambda_rule", "output", "store", "folds", "noise_sd")


def cmd_experiment(args):
    cfg = experiment.ExperimentConfig.load(args.config).to_dict()
    for key in _OVERRIDES:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.m is not None:
        cfg["c"] = None
    report = experiment.run_experiment(cfg)
    if cfg.get("output"):
        files = experiment.emit_reports(report, cfg["output"])
        _write_json({"files": files, "aggregate": experiment.aggregate(report.trials)})
    else:
        _write_json(report.to_json())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparse-ame", description="Sparse AME data attribution")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--query", default="default", help="query id (cache key)")

    def fit_args(p, default_rule):
        p.add_argument("--lambda-rule", default=default_rule, help="min, 1se or fixed:<value>")
        p.add_argument("--folds", type=int, default=lasso.DEFAULT_FOLDS)

    p = sub.add_parser("gen-task", help="write a poisoned classification task")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("sample", help="sample subsets and evaluate them into a store")
    _add_oracle_args(p)
    common(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--start", type=int, default=0, help="first row index")
    p.add_argument("--dist", default="grid:0.2,0.4,0.6,0.8")
    p.add_argument("--featurization", default="inverse_p", choices=[s.value for s in Scheme])
    p.add_argument("--knockoffs", action="store_true")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_sample)

    for name, func, rule, help_ in (("estimate", cmd_estimate, "min", "AME estimates from a store"),
                                    ("select", cmd_select, "1se", "knockoff selection from a store")):
        p = sub.add_parser(name, help=help_)
        common(p)
        fit_args(p, rule)
        p.add_argument("--store", required=True)
        p.add_argument("--dump-design", help="write the design matrix as CSV")
        p.add_argument("--cv-csv", help="write the CV curve as CSV")
        p.add_argument("--out")
        if name == "select":
            p.add_argument("--q", type=float, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("sv", help="Shapley values: exact, permutation MC or sparse AME")
    _add_oracle_args(p)
    common(p)
    fit_args(p, "min")
    p.add_argument("--method", choices=["exact", "mc", "ame"], default="ame")
    p.add_argument("--dist", default="uniform:0.05")
    p.add_argument("--featurization", default="pfeat", choices=[s.value for s in Scheme])
    p.add_argument("--m", type=int, default=1024, help="sampled subsets (ame)")
    p.add_argument("--permutations", type=int, default=1000, help="permutations (mc)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--bound-out", help="JSON path for the bound report")
    p.set_defaults(func=cmd_sv)

    p = sub.add_parser("hier", help="two-level selection")
    common(p)
    fit_args(p, "1se")
    p.add_argument("--tree", required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--store", help="two-level store to read")
    p.add_argument("--poisons", help="simulate: comma-separated poisoned second-level ids")
    p.add_argument("--cap", type=int, help="simulate: saturation count of the poison game")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--m", type=int, default=300)
    p.add_argument("--p1", default="grid:0.2,0.4,0.6,0.8")
    p.add_argument("--p2", default="grid:0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--save", help="simulate: also write the sampled store here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_hier)

    p = sub.add_parser("experiment", help="run a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--lambda-rule")
    p.add_argument("--folds", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--output")
    p.add_argument("--store")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        _fail(type(exc).__name__, str(exc), 2)
    except AmeError as exc:
        _fail(type(exc).__name__, str(exc), exc.exit_code)
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc), 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
