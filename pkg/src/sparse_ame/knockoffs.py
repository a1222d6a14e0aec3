"""Knockoff-based selection of proponents with mFDR control."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import lasso
from .errors import ConfigError, MissingKnockoffs


@dataclass
class Selection:
    w: np.ndarray
    tau: float
    q: float
    selected: tuple
    lam: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "selected": [int(i) for i in self.selected],
            "tau": self.tau if math.isfinite(self.tau) else "inf",
            "q": self.q,
            "w": [float(x) for x in self.w],
            "lambda": self.lam,
        }


def w_statistics(fit) -> np.ndarray:
    """W_n = max(beta_n, 0) - max(beta'_n, 0), with beta' the knockoff coefficient."""
    ko = fit.knockoff_coef
    if ko is None:
        raise MissingKnockoffs("the fit has no knockoff coefficients")
    return np.maximum(np.asarray(fit.source_coef), 0.0) - np.maximum(np.asarray(ko), 0.0)


def _check_q(q):
    if not (0.0 <= q <= 1.0):
        raise ConfigError(f"q must lie in [0, 1], got {q}")


def knockoff_threshold(w, q: float) -> float:
    """Smallest t among the positive |w| whose estimated false share is <= q.

    The estimate at t is #{w <= -t} / #{w >= t}; returns +inf when no
    candidate qualifies.
    """
    _check_q(q)
    w = np.asarray(w, dtype=np.float64)
    cand = np.unique(np.abs(w[w != 0]))  # ascending
    if cand.size == 0:
        return math.inf
    pos = np.sort(w[w > 0])
    neg = np.sort(-w[w < 0])
    n_pos = pos.size - np.searchsorted(pos, cand, side="left")  # w >= t
    n_neg = neg.size - np.searchsorted(neg, cand, side="left")  # w <= -t
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (n_pos > 0) & (n_neg <= q * n_pos)
    hits = np.flatnonzero(ok)
    return float(cand[hits[0]]) if hits.size else math.inf


def select(w, q: float, lam: Optional[float] = None) -> Selection:
    w = np.asarray(w, dtype=np.float64)
    tau = knockoff_threshold(w, q)
    chosen = tuple(int(i) for i in np.flatnonzero(w >= tau)) if math.isfinite(tau) else ()
    return Selection(w, tau, float(q), chosen, lam)


def select_with_fdr(design, q: float, lambda_rule="1se", folds: int = lasso.DEFAULT_FOLDS, seed: int = 0):
    """Fit with knockoff (and dummy) columns, then threshold the W statistics.

    Returns ``(selection, fit, cv_report)``; the report is None for a
    fixed lambda.
    """
    _check_q(q)
    if not design.n_knockoffs:
        raise MissingKnockoffs("design has no knockoff columns")
    fit, report = lasso.fit_with_rule(design, lambda_rule, folds, seed, intercept=True)
    sel = select(w_statistics(fit), q, fit.lam)
    return sel, fit, report


def false_discovery_terms(trials: Iterable) -> np.ndarray:
    out = []
    for sel, truth in trials:
        chosen = set(sel.selected)
        false = len(chosen - set(truth))
        denom = len(chosen) + (1.0 / sel.q if sel.q > 0 else math.inf)
        out.append(false / denom)
    return np.array(out, dtype=np.float64)


def mfdr_audit(trials: Sequence) -> float:
    """Empirical mFDR: mean of |false selections| / (|selected| + 1/q)."""
    trials = list(trials)
    if not trials:
        return 0.0
    qs = {sel.q for sel, _ in trials}
    if len(qs) > 1:
        raise ConfigError(f"trials mix several q values: {sorted(qs)}")
    return float(np.mean(false_discovery_terms(trials)))
