"""Seeded experiments: offline sampling and evaluation, then estimation and
selection per trial, reduced into a report.

A config is a flat JSON object.  Every trial draws its rows from its own
seed ``SeedSequence([seed, trial])`` so trials are independent and
reproducible on any worker pool.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import knockoffs as ko
from . import lasso
from .core import DiscreteGrid, Scheme, parse_distribution
from .errors import AmeError, ConfigError, EmptySources, InvalidConfig
from .oracle import (
    DEFAULT_QUERY,
    NullGame,
    PoisonedLinearTask,
    PoisonedTaskOracle,
    ThresholdGame,
    cached_evaluate,
    generate_poisoned_task,
    random_monotone_game,
)
from .sampling import Featurization, build_design, sample_rows
from .shapley import MAX_EXACT_N, exact_ame
from .store import ObservationStore, make_header

ORACLES = ("threshold", "monotone", "poisoned", "null")
SUMMARY_HEADER = ["trial", "precision", "recall", "l2_error", "lambda", "tau"]
ROW_STRIDE = 1 << 32  # row ids of trial t start at t * ROW_STRIDE


@dataclass
class ExperimentConfig:
    oracle: str = "threshold"
    n_sources: Optional[int] = None
    k: Optional[int] = None
    threshold: int = 2
    task_file: Optional[str] = None
    p_spec: str = "grid:0.2,0.4,0.6,0.8"
    featurization: str = "inverse_p"
    m: Optional[int] = None
    c: Optional[float] = None
    lambda_rule: Optional[str] = None
    q: Optional[float] = None
    seed: Optional[int] = None
    trials: int = 1
    folds: int = lasso.DEFAULT_FOLDS
    output: Optional[str] = None
    store: Optional[str] = None
    noise_sd: float = 0.0
    m_values: Optional[list] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig([ConfigError(f"unknown config keys: {unknown}")])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def _is_int(x):
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _rows_for(cfg: ExperimentConfig, m=None, c=None) -> int:
    m = cfg.m if m is None else m
    if m is not None:
        return int(m)
    c = cfg.c if c is None else c
    return max(1, math.ceil(c * cfg.k * math.log2(cfg.n_sources)))


def validate_experiment(config) -> ExperimentConfig:
    """Check every field; return a canonical config or raise with all errors.

    Canonical means: distribution spec and featurization normalized, the
    source count filled in from a task file, M resolved from c, and the
    lambda rule defaulted (1se when selecting, min when only estimating).
    Validating a canonical config returns an equal config.
    """
    cfg = ExperimentConfig.from_dict(config) if isinstance(config, dict) else ExperimentConfig(**config.to_dict())
    errs = []

    if cfg.oracle not in ORACLES:
        errs.append(ConfigError(f"oracle must be one of {ORACLES}, got {cfg.oracle!r}"))
    if cfg.oracle == "poisoned" and cfg.task_file:
        try:
            task = PoisonedLinearTask.load(cfg.task_file)
        except (OSError, ValueError, KeyError) as exc:
            errs.append(ConfigError(f"cannot read task file: {exc}"))
        else:
            if cfg.n_sources is not None and cfg.n_sources != task.n_sources:
                errs.append(ConfigError("n_sources disagrees with the task file"))
            cfg.n_sources, cfg.k = task.n_sources, task.k

    if cfg.n_sources is None or not _is_int(cfg.n_sources) or cfg.n_sources < 1:
        errs.append(EmptySources(f"need at least one source, got n_sources={cfg.n_sources!r}"))
    if cfg.oracle in ("threshold", "poisoned"):
        if not _is_int(cfg.k) or cfg.k < 1 or (_is_int(cfg.n_sources) and cfg.k > cfg.n_sources):
            errs.append(ConfigError(f"k must be in [1, N], got {cfg.k!r}"))
    if cfg.oracle == "monotone" and _is_int(cfg.n_sources) and cfg.n_sources > 20:
        errs.append(ConfigError("random monotone games need N <= 20"))
    if not _is_int(cfg.threshold) or cfg.threshold < 1:
        errs.append(ConfigError(f"threshold must be a positive integer, got {cfg.threshold!r}"))

    try:
        dist = parse_distribution(cfg.p_spec)
        derr = dist.violations()
        errs.extend(derr)
        if not derr:
            cfg.p_spec = dist.spec()
            if cfg.featurization is not None:
                try:
                    Featurization.for_distribution(cfg.featurization, dist)
                except AmeError as exc:
                    errs.append(exc)
    except AmeError as exc:
        errs.append(exc)
    try:
        cfg.featurization = Scheme.parse(cfg.featurization).value
    except (AmeError, ValueError) as exc:
        errs.append(ConfigError(str(exc)))

    if cfg.m is None and cfg.c is None:
        errs.append(ConfigError("give m or c"))
    elif cfg.m is not None and (not _is_int(cfg.m) or cfg.m < 1):
        errs.append(ConfigError(f"m must be >= 1, got {cfg.m!r}"))
    elif cfg.m is None and not (isinstance(cfg.c, (int, float)) and cfg.c > 0):
        errs.append(ConfigError(f"c must be positive, got {cfg.c!r}"))
    elif cfg.m is None and not _is_int(cfg.k):
        errs.append(ConfigError("c needs k to set M = c k log2 N"))
    if cfg.m_values is not None:
        if not isinstance(cfg.m_values, list) or not cfg.m_values or any(not _is_int(v) or v < 1 for v in cfg.m_values):
            errs.append(ConfigError("m_values must be a non-empty list of positive integers"))
        else:
            cfg.m_values = sorted(set(int(v) for v in cfg.m_values))

    if cfg.q is not None and not (isinstance(cfg.q, (int, float)) and 0 <= cfg.q <= 1):
        errs.append(ConfigError(f"q must lie in [0, 1], got {cfg.q!r}"))
    if cfg.lambda_rule is None:
        cfg.lambda_rule = "1se" if cfg.q is not None else "min"
    try:
        kind, val = lasso.parse_lambda_rule(cfg.lambda_rule)
        cfg.lambda_rule = kind if kind != "fixed" else f"fixed:{val!r}"
    except ConfigError as exc:
        errs.append(exc)
    if cfg.seed is None or not _is_int(cfg.seed) or cfg.seed < 0:
        errs.append(ConfigError("seed is required and must be a non-negative integer"))
    if not _is_int(cfg.trials) or cfg.trials < 1:
        errs.append(ConfigError(f"trials must be >= 1, got {cfg.trials!r}"))
    if not _is_int(cfg.folds) or cfg.folds < 2:
        errs.append(ConfigError(f"folds must be >= 2, got {cfg.folds!r}"))
    if not isinstance(cfg.noise_sd, (int, float)) or cfg.noise_sd < 0:
        errs.append(ConfigError(f"noise_sd must be >= 0, got {cfg.noise_sd!r}"))

    if errs:
        raise InvalidConfig(errs)
    if cfg.m is None:
        cfg.m = _rows_for(cfg)
    cfg.c = None
    cfg.q = None if cfg.q is None else float(cfg.q)
    cfg.noise_sd = float(cfg.noise_sd)
    return cfg


# ---------------------------------------------------------------------------
# Ground truth


@dataclass
class Truth:
    support: Optional[frozenset]  # sources that should be selected
    ame: Optional[np.ndarray]  # reference values for the L2 error


def make_oracle(cfg: ExperimentConfig):
    kw = {"noise_sd": cfg.noise_sd, "seed": cfg.seed}
    if cfg.oracle == "threshold":
        return ThresholdGame(cfg.n_sources, cfg.k, cfg.threshold, **kw)
    if cfg.oracle == "monotone":
        game = random_monotone_game(cfg.n_sources, cfg.seed)
        game.noise_sd, game.seed = cfg.noise_sd, cfg.seed
        return game
    if cfg.oracle == "null":
        return NullGame(cfg.n_sources, **kw)
    if cfg.task_file:
        task = PoisonedLinearTask.load(cfg.task_file)
    else:
        task = generate_poisoned_task(cfg.n_sources, cfg.k, seed=cfg.seed)
    return PoisonedTaskOracle(task, **kw)


def ground_truth(cfg: ExperimentConfig, oracle, dist) -> Truth:
    if isinstance(oracle, ThresholdGame):
        # the SV is the reference; it matches the AME as the law nears Uni(0, 1)
        ref = oracle.true_sv()
        return Truth(frozenset(range(oracle.k)), ref)
    if isinstance(oracle, NullGame):
        return Truth(frozenset(), np.zeros(oracle.n_sources))
    if isinstance(oracle, PoisonedTaskOracle):
        return Truth(frozenset(int(i) for i in oracle.task.poison_indices), None)
    if oracle.n_sources <= MAX_EXACT_N:
        ame = exact_ame(oracle, dist)
        return Truth(frozenset(int(i) for i in np.flatnonzero(ame > 1e-12)), ame)
    return Truth(None, None)


# ---------------------------------------------------------------------------
# Trials


@dataclass
class TrialResult:
    trial: int
    m: int
    selected: list
    precision: Optional[float]
    recall: Optional[float]
    l2_error: Optional[float]
    lam: float
    tau: Optional[float]
    support_recovered: Optional[bool]
    estimates: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "trial": self.trial, "m": self.m, "selected": self.selected,
            "precision": self.precision, "recall": self.recall, "l2_error": self.l2_error,
            "lambda": self.lam, "tau": _num_out(self.tau), "support_recovered": self.support_recovered,
            "estimates": self.estimates,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrialResult":
        return cls(d["trial"], d["m"], list(d["selected"]), d["precision"], d["recall"], d["l2_error"],
                   d["lambda"], _num_in(d["tau"]), d["support_recovered"], list(d["estimates"]))


def _num_out(x):
    if x is None:
        return None
    return x if math.isfinite(x) else "inf"


def _num_in(x):
    return math.inf if x == "inf" else x


def _score(selected, truth: Truth):
    if truth.support is None:
        return None, None
    chosen = set(selected)
    hits = len(chosen & truth.support)
    precision = hits / len(chosen) if chosen else None  # undefined when nothing is selected
    recall = hits / len(truth.support) if truth.support else None
    return precision, recall


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1, np.uint64)[0] >> 1)


def _run_trial(cfg, feat, oracle, truth, store, trial, m_list):
    tseed = trial_seed(cfg.seed, trial)
    select = cfg.q is not None
    m_max = max(m_list)
    rows = sample_rows(cfg.n_sources, m_max, feat.sampling_law, tseed, knockoffs=select)
    ids = trial * ROW_STRIDE + np.arange(m_max)
    obs = cached_evaluate(store, oracle, rows.masks, DEFAULT_QUERY, rows.p, rows.knockoff_masks, ids)
    dummies = select and isinstance(feat.dist, DiscreteGrid)
    out = []
    for m in m_list:
        design = build_design(obs[:m], feat, with_knockoffs=select, with_dummies=dummies)
        rule, folds = cfg.lambda_rule, min(cfg.folds, m)
        if folds < 2 and not rule.startswith("fixed"):
            # too few rows to cross-validate: take the empty model
            rule = lasso.lambda_max(design, intercept=True)
        tau = None
        if select:
            sel, fit, _ = ko.select_with_fdr(design, cfg.q, rule, folds, tseed)
            chosen, tau = list(sel.selected), sel.tau
        else:
            fit, _ = lasso.fit_with_rule(design, rule, folds, tseed, intercept=True)
            chosen = None
        est = lasso.estimate_ame(fit, feat)
        if chosen is None:
            chosen = [int(i) for i in np.flatnonzero(est > 0)]
        precision, recall = _score(chosen, truth)
        l2 = None if truth.ame is None else float(np.linalg.norm(est - truth.ame))
        recovered = None
        if truth.support is not None:
            top = set(np.argsort(-est, kind="stable")[: len(truth.support)].tolist())
            recovered = top == set(truth.support)
        out.append(TrialResult(trial, m, chosen, precision, recall, l2, float(fit.lam), tau, recovered,
                               [float(x) for x in est]))
    return out


@dataclass
class RunReport:
    config: dict
    trials: list  # TrialResult at the configured M, by trial index
    curves: list  # one dict per M: mean and standard error of each metric

    def to_json(self) -> dict:
        return {"config": self.config, "trials": [t.to_json() for t in self.trials],
                "aggregate": aggregate(self.trials), "curves": self.curves}

    @classmethod
    def from_json(cls, data: dict) -> "RunReport":
        return cls(data["config"], [TrialResult.from_json(t) for t in data["trials"]], data["curves"])


def _mean_se(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def aggregate(trials) -> dict:
    out = {"n_trials": len(trials)}
    for key in ("precision", "recall", "l2_error"):
        mean, se = _mean_se([getattr(t, key) for t in trials])
        out[key] = {"mean": mean, "se": se}
    flags = [t.support_recovered for t in trials if t.support_recovered is not None]
    out["support_recovered_rate"] = float(np.mean(flags)) if flags else None
    out["any_selected_rate"] = float(np.mean([bool(t.selected) for t in trials])) if trials else None
    return out


def _open_store(cfg, oracle):
    header = make_header(cfg.n_sources, cfg.p_spec, cfg.featurization, cfg.seed, oracle=oracle.fingerprint())
    if cfg.store:
        return ObservationStore.open(cfg.store, header)
    return ObservationStore(header)


def run_experiment(config, oracle=None) -> RunReport:
    """Run every trial of a (validated or raw) config.

    Observations go through the store named in the config, or an in-memory
    one, so masks already evaluated are never sent to the oracle again.
    """
    cfg = validate_experiment(config)
    dist = parse_distribution(cfg.p_spec)
    feat = Featurization.for_distribution(cfg.featurization, dist)
    oracle = make_oracle(cfg) if oracle is None else oracle
    truth = ground_truth(cfg, oracle, dist)
    store = _open_store(cfg, oracle)
    m_list = sorted(set((cfg.m_values or []) + [cfg.m]))

    def one(t):
        return _run_trial(cfg, feat, oracle, truth, store, t, m_list)

    workers = min(lasso.n_workers(), cfg.trials)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_trial = list(pool.map(one, range(cfg.trials)))
    else:
        per_trial = [one(t) for t in range(cfg.trials)]

    main = [next(r for r in res if r.m == cfg.m) for res in per_trial]
    curves = []
    for m in m_list:
        at_m = [r for res in per_trial for r in res if r.m == m]
        row = {"m": m}
        for key in ("l2_error", "precision", "recall"):
            row[key], row[key + "_se"] = _mean_se([getattr(r, key) for r in at_m])
        curves.append(row)
    return RunReport(cfg.to_dict(), main, curves)


# ---------------------------------------------------------------------------
# Output files


def _csv_num(x):
    if x is None:
        return ""
    if isinstance(x, float) and not math.isfinite(x):
        return "inf"
    return repr(float(x))


def emit_reports(report: RunReport, path) -> dict:
    """Write results.json, summary.csv and curves.csv into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    files = {k: os.path.join(path, k) for k in ("results.json", "summary.csv", "curves.csv")}
    with open(files["results.json"], "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(files["summary.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for t in report.trials:
            w.writerow([t.trial, _csv_num(t.precision), _csv_num(t.recall), _csv_num(t.l2_error),
                        _csv_num(t.lam), _csv_num(t.tau)])
    with open(files["curves.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = ["m", "l2_error", "l2_error_se", "precision", "precision_se", "recall", "recall_se"]
        w.writerow(keys)
        for row in sorted(report.curves, key=lambda r: r["m"]):
            w.writerow([row["m"]] + [_csv_num(row[k]) for k in keys[1:]])
    return files


def load_report(path) -> RunReport:
    """Parse a results.json (or the directory holding one)."""
    if os.path.isdir(path):
        path = os.path.join(path, "results.json")
    with open(path) as fh:
        return RunReport.from_json(json.load(fh))
