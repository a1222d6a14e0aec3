"""Shapley values and exact AME on small games, plus the sparse SV estimator.

Exact routines enumerate all 2^N subsets once and weight marginal
contributions by subset size.  For a law 𝒫 over p, a particular subset of
size j among the other N - 1 sources has probability
``E_p[p^j (1-p)^(N-1-j)]``; p ~ Uni(0, 1) gives the Shapley weights
``1 / (N * C(N-1, j))``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special

from . import lasso
from .core import Beta, DiscreteGrid, PDistribution, ReweightedW, TruncatedUniform
from .errors import TooLarge, UnsupportedDistribution
from .oracle import DEFAULT_QUERY, UtilityOracle, all_subsets
from .sampling import DesignMatrix, Featurization, build_design

MAX_EXACT_N = 16
UNIFORM = Beta(1.0, 1.0)  # p ~ Uni(0, 1)


class Method(str, Enum):
    EXACT = "exact_enum"
    PERMUTATION_MC = "permutation_mc"
    AME_TRUNC_UNIFORM = "ame_trunc_uniform"
    AME_BETA = "ame_beta"
    BETA_SHAPLEY = "beta_shapley"


@dataclass
class ShapleyVector:
    values: np.ndarray
    method: Method
    params: dict = field(default_factory=dict)
    stderr: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.values)

    def to_rows(self):
        return [(i, float(v)) for i, v in enumerate(self.values)]


@dataclass(frozen=True)
class BoundReport:
    """Worst-case distance between the AME under a law and the SV."""

    epsilon: float
    l2_bound: float
    linf_bound: float
    delta_cap: float
    delta: float  # exact sup of P_AME(S)/P_SV(S) - 1 over N; <= delta_cap when the cap applies

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "l2_bound": self.l2_bound, "linf_bound": self.linf_bound,
                "delta_cap": self.delta_cap, "delta": self.delta}


# ---------------------------------------------------------------------------
# Size weights


def size_weights(dist: PDistribution, n_sources: int) -> np.ndarray:
    """Probability of one particular subset of size j of the other N-1 sources.

    Returns a length-N vector indexed by j = 0..N-1.
    """
    n = int(n_sources)
    j = np.arange(n, dtype=np.float64)
    rest = n - 1 - j
    if isinstance(dist, DiscreteGrid):
        p = np.asarray(dist.values)[:, None]
        return np.mean(p ** j * (1.0 - p) ** rest, axis=0)
    if isinstance(dist, TruncatedUniform):
        a, b = j + 1.0, rest + 1.0
        mass = special.betainc(a, b, dist.high) - special.betainc(a, b, dist.low)
        return np.exp(special.betaln(a, b)) * mass / (dist.high - dist.low)
    if isinstance(dist, Beta):
        return np.exp(special.betaln(j + dist.alpha, rest + dist.beta) - special.betaln(dist.alpha, dist.beta))
    if isinstance(dist, ReweightedW):
        raise UnsupportedDistribution("the AME is defined under the base law, not its reweighting")
    raise UnsupportedDistribution(f"no size weights for {dist!r}")


def shapley_weights(n_sources: int) -> np.ndarray:
    n = int(n_sources)
    return np.array([1.0 / (n * math.comb(n - 1, j)) for j in range(n)])


def delta(dist: PDistribution, n_sources: int) -> float:
    """max_S P_AME(S) / P_SV(S) - 1 at a given N."""
    return float(np.max(size_weights(dist, n_sources) / shapley_weights(n_sources)) - 1.0)


# ---------------------------------------------------------------------------
# Exact enumeration


def utility_table(oracle: UtilityOracle, query=DEFAULT_QUERY) -> np.ndarray:
    """U(S) for every subset, indexed by the subset's integer code."""
    n = oracle.n_sources
    if n > MAX_EXACT_N:
        raise TooLarge(f"exact enumeration needs N <= {MAX_EXACT_N}, got {n}")
    return oracle.evaluate_many(all_subsets(n), query)


def _weighted_marginals(table: np.ndarray, n: int, weights: np.ndarray) -> np.ndarray:
    codes = np.arange(1 << n, dtype=np.int64)
    sizes = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        sizes += (codes >> i) & 1
    out = np.zeros(n)
    for i in range(n):
        without = codes[((codes >> i) & 1) == 0]
        gain = table[without | (1 << i)] - table[without]
        out[i] = float(np.dot(weights[sizes[without]], gain))
    return out


def exact_sv(oracle: UtilityOracle, query=DEFAULT_QUERY) -> ShapleyVector:
    """Shapley values by full enumeration (N <= 16)."""
    table = utility_table(oracle, query)
    n = oracle.n_sources
    return ShapleyVector(_weighted_marginals(table, n, shapley_weights(n)), Method.EXACT)


def exact_ame(oracle: UtilityOracle, dist: PDistribution, query=DEFAULT_QUERY) -> np.ndarray:
    """AME of every source under ``dist`` by full enumeration (N <= 16)."""
    table = utility_table(oracle, query)
    n = oracle.n_sources
    return _weighted_marginals(table, n, size_weights(dist, n))


# ---------------------------------------------------------------------------
# Permutation Monte Carlo

_PERM_CHUNK = 4096


def _permutation_gains(oracle, perms, query):
    """Marginal gains along each permutation; N+1 evaluations per permutation."""
    n_perm, n = perms.shape
    rank = np.empty_like(perms)
    rank[np.arange(n_perm)[:, None], perms] = np.arange(n)
    # prefix k of permutation r contains the sources ranked below k
    masks = rank[:, None, :] < np.arange(n + 1)[None, :, None]
    u = oracle.evaluate_many(masks.reshape(-1, n), query).reshape(n_perm, n + 1)
    gains = np.empty((n_perm, n))
    gains[np.arange(n_perm)[:, None], perms] = np.diff(u, axis=1)
    return gains


def permutation_mc_sv(oracle: UtilityOracle, n_permutations: int = 1000, seed: int = 0,
                      exhaustive: bool = False, query=DEFAULT_QUERY) -> ShapleyVector:
    """Average marginal contribution over uniformly random permutations.

    With ``exhaustive`` every one of the N! orderings is used once and the
    result is the exact Shapley value.
    """
    n = oracle.n_sources
    total = np.zeros(n)
    total_sq = np.zeros(n)
    count = 0
    if exhaustive:
        if n > 9:
            raise TooLarge("exhaustive permutations need N <= 9")
        it = itertools.permutations(range(n))
        while True:
            chunk = np.array(list(itertools.islice(it, _PERM_CHUNK)), dtype=np.int64)
            if chunk.size == 0:
                break
            g = _permutation_gains(oracle, chunk, query)
            total += g.sum(axis=0)
            total_sq += (g ** 2).sum(axis=0)
            count += len(chunk)
    else:
        if n_permutations < 1:
            raise ValueError("need at least one permutation")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        base = np.arange(n)
        while count < n_permutations:
            size = min(_PERM_CHUNK, n_permutations - count)
            perms = rng.permuted(np.tile(base, (size, 1)), axis=1)
            g = _permutation_gains(oracle, perms, query)
            total += g.sum(axis=0)
            total_sq += (g ** 2).sum(axis=0)
            count += size
    mean = total / count
    stderr = None
    if count > 1 and not exhaustive:
        var = np.maximum(total_sq / count - mean ** 2, 0.0) * count / (count - 1)
        stderr = np.sqrt(var / count)
    return ShapleyVector(mean, Method.PERMUTATION_MC,
                         {"n_permutations": count, "exhaustive": exhaustive, "seed": seed}, stderr)


# ---------------------------------------------------------------------------
# Estimator from sampled observations


def _method_for(dist) -> Method:
    if isinstance(dist, TruncatedUniform):
        return Method.AME_TRUNC_UNIFORM
    if isinstance(dist, Beta):
        if dist.alpha <= 1 or dist.beta <= 1:
            raise UnsupportedDistribution("Beta laws need alpha > 1 and beta > 1 here")
        return Method.AME_BETA if dist.alpha == dist.beta else Method.BETA_SHAPLEY
    raise UnsupportedDistribution(f"SV estimation needs a truncated uniform or Beta law, got {dist!r}")


def sv_via_ame(observations, feat: Featurization, dist: Optional[PDistribution] = None,
               lambda_rule="min", folds: int = lasso.DEFAULT_FOLDS, seed: int = 0,
               intercept: bool = True) -> ShapleyVector:
    """Sparse SV (or Beta-Shapley) estimate: sqrt(v) * lasso coefficients.

    ``observations`` is a list of observations or a ready design.  The
    observations must have been sampled under ``feat.sampling_law``.
    """
    dist = feat.dist if dist is None else dist
    method = _method_for(dist)
    design = observations if isinstance(observations, DesignMatrix) else build_design(observations, feat)
    fit, report = lasso.fit_with_rule(design, lambda_rule, folds, seed, intercept=intercept)
    params = {"dist": dist.spec(), "scheme": feat.scheme.value, "v": feat.v, "lambda": fit.lam}
    if isinstance(dist, Beta):
        params.update(alpha=dist.alpha, beta=dist.beta)
    return ShapleyVector(lasso.estimate_ame(fit, feat), method, params)


def bound_report(dist: PDistribution, n_sources: Optional[int] = None) -> BoundReport:
    """Closed-form AME-vs-SV bounds for Uni(eps, 1-eps) and Beta(1+eps, 1+eps).

    The l2 bound assumes a monotone utility, the L-infinity bound only a
    utility bounded in [0, 1].  ``delta`` is the exact ratio gap, at
    ``n_sources`` when given, else its supremum over N.
    """
    if isinstance(dist, TruncatedUniform):
        eps = dist.epsilon
        tight = 1.0 / (1.0 - 2.0 * eps) - 1.0
        d = tight if n_sources is None else delta(dist, n_sources)
        return BoundReport(eps, 4 * eps + 2 * math.sqrt(2 * eps), 8 * eps, 4 * eps, d)
    if isinstance(dist, Beta) and dist.alpha == dist.beta and dist.alpha > 1:
        eps = dist.alpha - 1.0
        cap = (1.0 + 1.0 / eps) ** (2 * eps) - 1.0
        d = cap if n_sources is None else delta(dist, n_sources)
        return BoundReport(eps, cap + math.sqrt(2 * cap), 2 * cap, cap, d)
    raise UnsupportedDistribution(f"no closed-form bound for {dist!r}")
