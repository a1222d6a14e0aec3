"""L1-penalized least squares by coordinate descent.

Objective: ``(1/(2M)) ||y - X b||^2 + lam * sum_{j penalized} |b_j|``.

The solver works in covariance mode: it keeps the gradient
``X^T (y - X b) / M`` and updates it with Gram columns that are only
computed once a coordinate first leaves zero.  An optional intercept is
fitted by centering and is never penalized.  The sweep loop runs in a
compiled extension when it is available; setting ``SPARSE_AME_PURE_PYTHON=1``
or calling :func:`use_backend` forces the Python fallback.
"""

from __future__ import annotations

import csv
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError, NonFinite, TooFewRows
from . import _cd_py

try:
    from . import _cd as _cd_ext
except ImportError:  # extension not built
    _cd_ext = None

_BACKENDS = {"python": _cd_py.cd_sweeps}
if _cd_ext is not None:
    _BACKENDS["cython"] = _cd_ext.cd_sweeps

if os.environ.get("SPARSE_AME_PURE_PYTHON", "") not in ("", "0") or _cd_ext is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
_cd_sweeps = _BACKENDS[BACKEND]

TOL = 1e-7
MAX_SWEEPS = 100_000
N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-4
DEFAULT_FOLDS = 20
CV_PATIENCE = 10
MAX_NEW_COLUMNS = 32  # Gram columns admitted per kernel round


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name: str):
    """Switch the sweep kernel; returns the previously active backend name."""
    global BACKEND, _cd_sweeps
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    prev, BACKEND, _cd_sweeps = BACKEND, name, _BACKENDS[name]
    return prev


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("SPARSE_AME_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class LassoFit:
    beta: np.ndarray
    lam: float
    penalized: np.ndarray
    n_iter: int
    converged: bool
    n_sources: int = 0
    n_knockoffs: int = 0
    n_dummies: int = 0
    intercept: float = 0.0

    def predict(self, X) -> np.ndarray:
        return np.asarray(X) @ self.beta + self.intercept

    @property
    def source_coef(self):
        return self.beta[: self.n_sources]

    @property
    def knockoff_coef(self):
        if not self.n_knockoffs:
            return None
        return self.beta[self.n_sources: self.n_sources + self.n_knockoffs]

    @property
    def dummy_coef(self):
        start = self.n_sources + self.n_knockoffs
        return self.beta[start: start + self.n_dummies]


@dataclass
class CvReport:
    lambdas: np.ndarray
    mean_error: np.ndarray
    std_error: np.ndarray
    lambda_min: float
    lambda_1se: float
    folds: int = DEFAULT_FOLDS
    fits: list = field(default_factory=list, repr=False)
    stopped_early: bool = False

    @property
    def index_min(self):
        return int(np.flatnonzero(self.lambdas == self.lambda_min)[0])

    @property
    def index_1se(self):
        return int(np.flatnonzero(self.lambdas == self.lambda_1se)[0])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "mean_err", "std_err"])
            for row in zip(self.lambdas, self.mean_error, self.std_error):
                w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# Sufficient statistics


class _FullStats:
    """Column sums, X^T y and lazily computed columns of X^T X (all unscaled)."""

    def __init__(self, X, y):
        self.X = X
        self.y = y
        self.m = X.shape[0]
        self.xsum = X.sum(axis=0)
        self.xty = X.T @ y
        self.xsq = np.einsum("ij,ij->j", X, X)
        self.ysum = float(y.sum())
        self.yty = float(y @ y)
        p = X.shape[1]
        self._slot = np.full(p, -1, dtype=np.int64)
        self._gram = np.zeros((p, 0), order="F")
        self._n = 0
        self._lock = threading.Lock()

    def gram_columns(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        with self._lock:
            missing = idx[self._slot[idx] < 0]
            if missing.size:
                missing = np.unique(missing)
                need = self._n + missing.size
                if need > self._gram.shape[1]:
                    cap = min(max(need, 2 * self._gram.shape[1], 16), len(self._slot))
                    grown = np.zeros((len(self._slot), cap), order="F")
                    grown[:, : self._n] = self._gram[:, : self._n]
                    self._gram = grown
                np.matmul(self.X.T, self.X[:, missing], out=self._gram[:, self._n: need])
                self._slot[missing] = np.arange(self._n, need)
                self._n = need
            return self._gram[:, self._slot[idx]]


class _HeldOutStats:
    """Statistics of every row except ``test``, obtained by subtraction.

    Cross-validation folds share the full-data Gram columns this way; each
    fold only pays for the product over its held-out rows.
    """

    def __init__(self, full: _FullStats, test: np.ndarray):
        Xt, yt = full.X[test], full.y[test]
        self.full = full
        self.Xt = Xt
        self.m = full.m - len(test)
        self.xsum = full.xsum - Xt.sum(axis=0)
        self.xty = full.xty - Xt.T @ yt
        self.xsq = full.xsq - np.einsum("ij,ij->j", Xt, Xt)
        self.ysum = full.ysum - float(yt.sum())
        self.yty = full.yty - float(yt @ yt)

    def gram_columns(self, idx) -> np.ndarray:
        return self.full.gram_columns(idx) - self.Xt.T @ self.Xt[:, idx]


def _full_stats(design) -> _FullStats:
    X = np.asfortranarray(design.values, dtype=np.float64)
    y = np.asarray(design.y, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFinite("design or response contains NaN/inf")
    return _FullStats(X, y)


# ---------------------------------------------------------------------------
# Solver state


class _Solver:
    """Warm-startable covariance-mode state for one training set.

    An intercept is handled by centering the statistics, so it never takes
    part in the sweeps; it is recovered as ``ybar - xbar @ beta``.
    """

    def __init__(self, stats, penalized, intercept=False):
        m = stats.m
        self.stats = stats
        self.m = m
        self.penalized = np.asarray(penalized, dtype=bool)
        self.p = len(self.penalized)
        self.centered = bool(intercept)
        self.xbar = stats.xsum / m if intercept else np.zeros(self.p)
        self.ybar = stats.ysum / m if intercept else 0.0
        self.c = stats.xty / m - self.xbar * self.ybar
        raw_sq = stats.xsq / m
        diag = raw_sq - self.xbar ** 2
        # constant (or emptied) columns carry no information; cancellation leaves dust
        diag[diag <= 1e-10 * raw_sq] = 0.0
        self.diag = diag
        self.yy = stats.yty / m - self.ybar ** 2
        self.beta = np.zeros(self.p)
        self.grad = self.c.copy()
        self.slot = np.full(self.p, -1, dtype=np.int64)
        self.gram = np.zeros((self.p, 0), order="F")
        self.n_cols = 0

    def _add_columns(self, cols):
        cols = np.asarray(cols, dtype=np.int64)
        need = self.n_cols + len(cols)
        if need > self.gram.shape[1]:
            cap = min(max(need, 2 * self.gram.shape[1], 16), self.p)
            grown = np.zeros((self.p, cap), order="F")
            grown[:, : self.n_cols] = self.gram[:, : self.n_cols]
            self.gram = grown
        block = self.gram[:, self.n_cols: need]
        block[...] = self.stats.gram_columns(cols)
        block /= self.m
        if self.centered:
            block -= np.outer(self.xbar, self.xbar[cols])
        self.slot[cols] = np.arange(self.n_cols, need)
        self.n_cols = need

    def prime_unpenalized(self):
        free = np.flatnonzero(~self.penalized & (self.slot < 0) & (self.diag > 0))
        if free.size:
            self._add_columns(free)

    def solve(self, lam, tol=TOL, max_sweeps=MAX_SWEEPS):
        thresh = np.where(self.penalized, lam, 0.0)
        sweeps = 0
        while True:
            status, sweeps, pending = _cd_sweeps(
                self.gram, self.slot, self.grad, self.beta, self.diag, thresh, tol, max_sweeps, sweeps
            )
            if status == _cd_py.NEED_COLUMNS:
                pending = np.asarray(pending, dtype=np.int64)
                if pending.size > MAX_NEW_COLUMNS:
                    # admit the worst KKT violators; the next full sweep rechecks the rest
                    excess = np.abs(self.grad[pending]) - thresh[pending]
                    pending = pending[np.sort(np.argsort(-excess, kind="stable")[:MAX_NEW_COLUMNS])]
                self._add_columns(pending)
                continue
            return status == _cd_py.CONVERGED, sweeps

    def intercept(self) -> float:
        return float(self.ybar - self.xbar @ self.beta) if self.centered else 0.0

    def half_mse(self):
        """(1/(2M))||y - b0 - Xb||^2 from cached quantities."""
        act = np.flatnonzero(self.beta)
        if act.size == 0:
            return 0.5 * self.yy
        b = self.beta[act]
        quad = b @ (self.gram[np.ix_(act, self.slot[act])] @ b)
        return 0.5 * (self.yy - 2.0 * float(self.c[act] @ b) + float(quad))


class _PathMonitor:
    """glmnet's early exit: explained fraction above 0.999, or a relative gain below 1e-5."""

    def __init__(self):
        self.null = None
        self.prev = None
        self.i = 0

    def done(self, loss) -> bool:
        i = self.i
        self.i += 1
        if self.null is None:
            self.null = loss
            return loss <= 0
        explained = 1.0 - loss / self.null
        if explained > 0.999:
            return True
        if self.prev is not None and i > 4 and explained - self.prev < 1e-5 * max(explained, 1e-300):
            return True
        self.prev = explained
        return False


def _make_fit(solver, lam, sweeps, converged, shape_info):
    return LassoFit(solver.beta.copy(), float(lam), solver.penalized.copy(), int(sweeps), bool(converged),
                    *shape_info, intercept=solver.intercept())


def _shape_info(design):
    return design.n_sources, design.n_knockoffs, design.n_dummies


def _penalized(design, penalized_mask):
    if penalized_mask is None:
        return design.penalized_mask()
    return np.asarray(penalized_mask, dtype=bool)


def _use_intercept(design, intercept) -> bool:
    # one-hot dummies already span the constant column
    return bool(intercept) and not design.n_dummies


# ---------------------------------------------------------------------------
# Public operations


def fit(design, lam: float, penalized_mask=None, tol=TOL, max_sweeps=MAX_SWEEPS, intercept=False) -> LassoFit:
    """Solve the lasso at a single ``lam``."""
    if lam < 0 or not math.isfinite(lam):
        raise ConfigError(f"lambda must be a finite value >= 0, got {lam}")
    if design.rows < 1:
        raise TooFewRows("need at least one row")
    solver = _Solver(_full_stats(design), _penalized(design, penalized_mask), _use_intercept(design, intercept))
    solver.prime_unpenalized()
    converged, sweeps = solver.solve(lam, tol, max_sweeps)
    return _make_fit(solver, lam, sweeps, converged, _shape_info(design))


def _unpenalized_residual(X, y, penalized, intercept):
    free = X[:, ~penalized]
    if intercept:
        free = np.hstack([free, np.ones((X.shape[0], 1))])
    if free.shape[1] == 0:
        return y
    coef, *_ = np.linalg.lstsq(free, y, rcond=None)
    return y - free @ coef


def lambda_max(design, penalized_mask=None, intercept=False) -> float:
    """Smallest lam at which every penalized coefficient is zero."""
    pen = _penalized(design, penalized_mask)
    if not np.any(pen):
        return 0.0
    r = _unpenalized_residual(design.values, design.y, pen, _use_intercept(design, intercept))
    return float(np.max(np.abs(design.values[:, pen].T @ r)) / design.rows)


def lambda_path(design, penalized_mask=None, n_lambda=N_LAMBDA, min_ratio=LAMBDA_MIN_RATIO,
                intercept=False) -> np.ndarray:
    """Descending log-spaced grid from lambda_max down to lambda_max * min_ratio."""
    if design.rows < 1:
        raise TooFewRows("need at least one row")
    top = lambda_max(design, penalized_mask, intercept)
    if top <= 0:
        top = 1e-12
    return np.geomspace(top, top * min_ratio, n_lambda)


def fit_path(design, lambdas=None, penalized_mask=None, tol=TOL, max_sweeps=MAX_SWEEPS, early_stop=True,
             intercept=False):
    """Warm-started fits along a descending grid.

    With ``early_stop`` the path ends once the explained fraction of the
    response's variation passes 0.999 or improves by less than a relative
    1e-5 between consecutive lambdas; the returned list is then shorter
    than the grid.
    """
    pen = _penalized(design, penalized_mask)
    icpt = _use_intercept(design, intercept)
    if lambdas is None:
        lambdas = lambda_path(design, pen, intercept=icpt)
    solver = _Solver(_full_stats(design), pen, icpt)
    solver.prime_unpenalized()
    monitor = _PathMonitor()
    fits = []
    for lam in np.asarray(lambdas, dtype=np.float64):
        converged, sweeps = solver.solve(lam, tol, max_sweeps)
        fits.append(_make_fit(solver, lam, sweeps, converged, _shape_info(design)))
        if early_stop and monitor.done(solver.half_mse()):
            break
    return fits


def _mix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def fold_assignment(row_ids, folds: int, seed: int) -> np.ndarray:
    """Balanced fold labels that depend on row ids only, not row order."""
    ids = np.asarray(row_ids, dtype=np.int64).astype(np.uint64)
    keys = _mix64(ids ^ _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    order = np.lexsort((ids, keys))
    labels = np.empty(len(ids), dtype=np.int64)
    labels[order] = np.arange(len(ids)) % folds
    return labels


class _FoldRun:
    """One cross-validation fold walking the shared grid."""

    def __init__(self, full: _FullStats, test, pen, intercept, tol, max_sweeps):
        self.solver = _Solver(_HeldOutStats(full, test), pen, intercept)
        self.solver.prime_unpenalized()
        self.Xt = full.X[test]
        self.yt = full.y[test]
        self.monitor = _PathMonitor()
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.stopped = False
        self.err = np.nan

    def step(self, lam) -> float:
        # a fold whose own path has ended keeps predicting with its last fit
        if not self.stopped:
            s = self.solver
            s.solve(lam, self.tol, self.max_sweeps)
            self.stopped = self.monitor.done(s.half_mse())
            resid = self.yt - self.Xt @ s.beta - s.intercept()
            self.err = float(resid @ resid) / len(self.yt)
        return self.err


def cross_validate(design, folds=DEFAULT_FOLDS, seed=0, penalized_mask=None, lambdas=None,
                   tol=TOL, max_sweeps=MAX_SWEEPS, intercept=False, patience=CV_PATIENCE) -> CvReport:
    """K-fold CV over the lambda path, glmnet style.

    The full-data path and every fold advance together, one lambda at a
    time.  The grid ends where the full-data path stops early, or, unless
    ``patience`` is None, once the mean error has sat more than one
    standard error above its running minimum for ``patience`` lambdas.
    Both lambda_min and lambda_1se lie at or before that point.
    """
    if design.rows < folds or folds < 2:
        raise TooFewRows(f"{design.rows} rows cannot be split into {folds} folds")
    pen = _penalized(design, penalized_mask)
    icpt = _use_intercept(design, intercept)
    if lambdas is None:
        lambdas = lambda_path(design, pen, intercept=icpt)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    stats = _full_stats(design)
    full = _Solver(stats, pen, icpt)
    full.prime_unpenalized()
    labels = fold_assignment(design.ids, folds, seed)
    runs = [_FoldRun(stats, np.flatnonzero(labels == k), pen, icpt, tol, max_sweeps) for k in range(folds)]
    weights = np.array([len(r.yt) for r in runs], dtype=np.float64)
    shape = _shape_info(design)
    monitor = _PathMonitor()
    workers = n_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    fits, raw, means, sds = [], [], [], []
    i_min = 0
    early = False
    try:
        for i, lam in enumerate(lambdas):
            converged, sweeps = full.solve(lam, tol, max_sweeps)
            fits.append(_make_fit(full, lam, sweeps, converged, shape))
            path_done = monitor.done(full.half_mse())
            errs = list(pool.map(lambda r: r.step(lam), runs)) if pool else [r.step(lam) for r in runs]
            errs = np.array(errs)
            raw.append(errs)
            mean = float(weights @ errs / weights.sum())
            means.append(mean)
            sds.append(math.sqrt(float(weights @ (errs - mean) ** 2) / weights.sum() / (folds - 1)))
            if mean < means[i_min]:
                i_min = i
            if path_done:
                break
            if patience is not None and i - i_min >= patience and mean > means[i_min] + sds[i_min]:
                early = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    grid = lambdas[: len(fits)]
    mean, sd = np.array(means), np.array(sds)
    ok = np.flatnonzero(mean <= mean[i_min] + sd[i_min])
    i_1se = int(ok.min())  # grid is descending, so the smallest index is the largest lambda
    return CvReport(grid, mean, sd, float(grid[i_min]), float(grid[i_1se]), folds, fits, early)


def parse_lambda_rule(rule):
    if isinstance(rule, (int, float)):
        return "fixed", float(rule)
    text = str(rule).strip().lower()
    if text in ("min", "1se"):
        return text, None
    if text.startswith("fixed:"):
        try:
            return "fixed", float(text.split(":", 1)[1])
        except ValueError:
            pass
    raise ConfigError(f"lambda rule must be min, 1se or fixed:<value>, got {rule!r}")


def fit_with_rule(design, rule="min", folds=DEFAULT_FOLDS, seed=0, penalized_mask=None, intercept=False):
    """Fit at the lambda picked by ``rule``; returns ``(fit, cv_report or None)``."""
    kind, value = parse_lambda_rule(rule)
    if kind == "fixed":
        if value < 0:
            raise ConfigError("a fixed lambda must be >= 0")
        return fit(design, value, penalized_mask, intercept=intercept), None
    report = cross_validate(design, folds, seed, penalized_mask, intercept=intercept)
    idx = report.index_min if kind == "min" else report.index_1se
    return report.fits[idx], report


def estimate_ame(lasso_fit: LassoFit, feat) -> np.ndarray:
    """Rescale source coefficients back to AME units (sqrt(v) * beta)."""
    return math.sqrt(feat.v) * np.asarray(lasso_fit.source_coef)


def kkt_residuals(design, lasso_fit: LassoFit, penalized_mask=None):
    """Worst violation of the stationarity conditions at ``lasso_fit``.

    Returns ``(penalized, unpenalized)`` maxima.
    """
    pen = _penalized(design, penalized_mask)
    resid = design.y - design.values @ lasso_fit.beta - lasso_fit.intercept
    g = design.values.T @ resid / design.rows
    b, lam = lasso_fit.beta, lasso_fit.lam
    zero = pen & (b == 0)
    nz = pen & (b != 0)
    viol = np.concatenate([
        np.maximum(np.abs(g[zero]) - lam, 0.0),
        np.abs(g[nz] - lam * np.sign(b[nz])),
    ])
    return (float(viol.max()) if viol.size else 0.0,
            float(np.abs(g[~pen]).max()) if np.any(~pen) else 0.0)
