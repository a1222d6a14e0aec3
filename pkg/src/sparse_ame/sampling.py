"""Draw inclusion probabilities and subsets, and build featurized designs.

Random draws come from generators keyed by ``(seed, stream, block)`` where
a block is a fixed run of consecutive rows.  Row ``m`` therefore depends on
the experiment seed and its index only, never on how rows are split across
workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    Beta,
    DiscreteGrid,
    Observation,
    PDistribution,
    ReweightedW,
    Scheme,
    SubsetMask,
    TruncatedUniform,
    masks_to_bool,
)
from .errors import InconsistentN, InfiniteNormalizer, MissingKnockoffMask

BLOCK_ROWS = 1024

STREAM_P = 0
STREAM_MASK = 1
STREAM_KNOCKOFF = 2
STREAM_HIER_TOP = 3
STREAM_HIER_CHILD = 4
STREAM_HIER_KNOCKOFF = 5
STREAM_NOISE = 6


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(block)]))


def row_rng(seed: int, stream: int, row: int) -> np.random.Generator:
    # separate key space from blocks so single-row draws never alias a block
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), 1 << 40, int(row)]))


# ---------------------------------------------------------------------------
# p draws


def draw_p(dist: PDistribution, rng: np.random.Generator, size=None):
    """Sample inclusion probabilities from ``dist``."""
    if isinstance(dist, DiscreteGrid):
        return rng.choice(np.asarray(dist.values), size=size)
    if isinstance(dist, TruncatedUniform):
        return rng.uniform(dist.low, dist.high, size=size)
    if isinstance(dist, Beta):
        return rng.beta(dist.alpha, dist.beta, size=size)
    if isinstance(dist, ReweightedW):
        return _draw_reweighted(dist.base, rng, size)
    raise TypeError(f"unsupported distribution {dist!r}")


def reweighted_grid_probs(grid: DiscreteGrid) -> np.ndarray:
    vals = np.asarray(grid.values)
    w = 1.0 / (vals * (1.0 - vals))
    return w / w.sum()


def _draw_reweighted(base, rng, size):
    if isinstance(base, DiscreteGrid):
        return rng.choice(np.asarray(base.values), size=size, p=reweighted_grid_probs(base))
    if isinstance(base, TruncatedUniform):
        # density ~ 1/(p(1-p)) on [eps, 1-eps]: its CDF is linear in logit(p)
        hi = math.log(base.high / base.low)
        z = rng.uniform(-hi, hi, size=size)
        return 1.0 / (1.0 + np.exp(-z))
    if isinstance(base, Beta):
        if base.alpha <= 1 or base.beta <= 1:
            raise InfiniteNormalizer("reweighting Beta needs alpha > 1 and beta > 1")
        return rng.beta(base.alpha - 1.0, base.beta - 1.0, size=size)
    raise TypeError(f"cannot reweight {base!r}")


def sample_subset(n_sources: int, p: float, rng: np.random.Generator) -> SubsetMask:
    return SubsetMask.from_bool(rng.random(n_sources) < p)


# ---------------------------------------------------------------------------
# Featurization


@dataclass(frozen=True)
class Featurization:
    """A featurization scheme bound to the normalizer of its base law."""

    scheme: Scheme
    v: float
    dist: Optional[PDistribution] = None

    @classmethod
    def for_distribution(cls, scheme, dist: PDistribution) -> "Featurization":
        scheme = Scheme.parse(scheme)
        if isinstance(dist, ReweightedW):
            raise InfiniteNormalizer("pass the base law; PFeat applies the reweighting itself")
        v = dist.validate().mean_inv_pq()
        if not (math.isfinite(v) and v > 0):
            raise InfiniteNormalizer(f"normalizer v={v} is not finite")
        return cls(scheme, v, dist)

    @property
    def sampling_law(self) -> PDistribution:
        """Law p is actually drawn from when building rows."""
        if self.scheme is Scheme.PFEAT:
            return ReweightedW(self.dist)
        return self.dist

    def values(self, p):
        """Return the (included, excluded) feature values for each p."""
        p = np.asarray(p, dtype=np.float64)
        rv = math.sqrt(self.v)
        if self.scheme is Scheme.INVERSE_P:
            return 1.0 / (rv * p), -1.0 / (rv * (1.0 - p))
        return rv * (1.0 - p), -rv * p


def featurize_row(mask: SubsetMask, p: float, feat: Featurization) -> np.ndarray:
    f_in, f_out = feat.values(p)
    return np.where(mask.to_bool(), f_in, f_out)


def featurize_matrix(masks: np.ndarray, p: np.ndarray, feat: Featurization) -> np.ndarray:
    f_in, f_out = feat.values(p)
    return np.where(masks, f_in[:, None], f_out[:, None])


# ---------------------------------------------------------------------------
# Row sampling


@dataclass
class SampledRows:
    p: np.ndarray
    masks: np.ndarray
    knockoff_masks: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.p)


def sample_rows(n_sources: int, n_rows: int, law: PDistribution, seed: int, knockoffs=False, start=0) -> SampledRows:
    """Draw rows ``start .. start+n_rows-1`` of an experiment.

    ``law`` is the law p is drawn from (already reweighted for PFeat).
    Knockoff masks use their own stream so enabling them never changes the
    subsets themselves.
    """
    stop = start + n_rows
    ps, ms, ks = [], [], []
    for block in range(start // BLOCK_ROWS, (stop + BLOCK_ROWS - 1) // BLOCK_ROWS if stop else 0):
        b0 = block * BLOCK_ROWS
        lo, hi = max(start, b0) - b0, min(stop, b0 + BLOCK_ROWS) - b0
        p = draw_p(law, block_rng(seed, STREAM_P, block), size=BLOCK_ROWS)
        u = block_rng(seed, STREAM_MASK, block).random((BLOCK_ROWS, n_sources))
        ps.append(p[lo:hi])
        ms.append(u[lo:hi] < p[lo:hi, None])
        if knockoffs:
            uk = block_rng(seed, STREAM_KNOCKOFF, block).random((BLOCK_ROWS, n_sources))
            ks.append(uk[lo:hi] < p[lo:hi, None])
    empty = np.zeros((0, n_sources), dtype=bool)
    return SampledRows(
        np.concatenate(ps) if ps else np.zeros(0),
        np.concatenate(ms) if ms else empty,
        (np.concatenate(ks) if ks else empty) if knockoffs else None,
    )


# ---------------------------------------------------------------------------
# Design matrices


@dataclass
class DesignMatrix:
    """Dense featurized design: source, knockoff and dummy column blocks."""

    values: np.ndarray
    y: np.ndarray
    n_sources: int
    n_knockoffs: int = 0
    n_dummies: int = 0
    levels: tuple = ()
    row_ids: Optional[np.ndarray] = None

    @property
    def ids(self) -> np.ndarray:
        """Stable row identifiers; cross-validation folds are keyed on them."""
        if self.row_ids is None:
            return np.arange(self.rows)
        return self.row_ids

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def source_slice(self):
        return slice(0, self.n_sources)

    @property
    def knockoff_slice(self):
        return slice(self.n_sources, self.n_sources + self.n_knockoffs)

    @property
    def dummy_slice(self):
        start = self.n_sources + self.n_knockoffs
        return slice(start, start + self.n_dummies)

    def penalized_mask(self) -> np.ndarray:
        pen = np.ones(self.values.shape[1], dtype=bool)
        pen[self.dummy_slice] = False
        return pen

    def subset_rows(self, idx) -> "DesignMatrix":
        return DesignMatrix(
            np.asfortranarray(self.values[idx]), self.y[idx], self.n_sources, self.n_knockoffs,
            self.n_dummies, self.levels, self.ids[idx],
        )

    def with_y(self, y) -> "DesignMatrix":
        return DesignMatrix(self.values, np.asarray(y, dtype=np.float64), self.n_sources,
                            self.n_knockoffs, self.n_dummies, self.levels, self.row_ids)

    def to_csv(self, path):
        names = [f"x{j}" for j in range(self.n_sources)]
        names += [f"ko{j}" for j in range(self.n_knockoffs)]
        names += [f"p={lvl!r}" for lvl in self.levels]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names + ["y"])
            for row, y in zip(self.values, self.y):
                writer.writerow([repr(float(x)) for x in row] + [repr(float(y))])


def level_index(p: np.ndarray, levels: Sequence) -> np.ndarray:
    """Map each p onto its position in ``levels``; unknown levels are an error."""
    lv = np.asarray(levels, dtype=np.float64)
    pos = np.searchsorted(lv, p)
    pos = np.clip(pos, 0, len(lv) - 1)
    left = np.clip(pos - 1, 0, len(lv) - 1)
    pick = np.where(np.abs(lv[left] - p) < np.abs(lv[pos] - p), left, pos)
    bad = np.abs(lv[pick] - p) > 1e-12
    if np.any(bad):
        raise InconsistentN(f"p level {p[bad][0]!r} is not among the declared levels {list(levels)}")
    return pick


def assemble_design(
    masks: np.ndarray,
    p: np.ndarray,
    y: np.ndarray,
    feat: Featurization,
    knockoff_masks: Optional[np.ndarray] = None,
    dummies: bool = False,
    levels: Optional[Sequence] = None,
    row_ids: Optional[np.ndarray] = None,
) -> DesignMatrix:
    masks = np.asarray(masks, dtype=bool)
    p = np.asarray(p, dtype=np.float64)
    m, n = masks.shape
    blocks = [featurize_matrix(masks, p, feat)]
    n_ko = 0
    if knockoff_masks is not None:
        if knockoff_masks.shape != masks.shape:
            raise InconsistentN("knockoff masks and masks differ in shape")
        blocks.append(featurize_matrix(knockoff_masks, p, feat))
        n_ko = n
    levels = tuple(levels) if levels is not None else ()
    if dummies:
        if not levels:
            levels = tuple(sorted(set(p.tolist())))
        onehot = np.zeros((m, len(levels)))
        onehot[np.arange(m), level_index(p, levels)] = 1.0
        blocks.append(onehot)
    values = np.asfortranarray(np.hstack(blocks)) if blocks else np.zeros((m, 0))
    ids = None if row_ids is None else np.asarray(row_ids, dtype=np.int64)
    return DesignMatrix(values, np.asarray(y, dtype=np.float64).copy(), n, n_ko,
                        len(levels) if dummies else 0, levels if dummies else (), ids)


def observations_to_arrays(observations: Sequence[Observation], with_knockoffs=False):
    if not observations:
        raise InconsistentN("no observations")
    n = observations[0].mask.n
    for o in observations:
        if o.mask.n != n:
            raise InconsistentN(f"observation has {o.mask.n} sources, expected {n}")
    masks = masks_to_bool([o.mask for o in observations])
    p = np.array([o.p for o in observations], dtype=np.float64)
    y = np.array([o.y for o in observations], dtype=np.float64)
    ko = None
    if with_knockoffs:
        if any(o.knockoff_mask is None for o in observations):
            raise MissingKnockoffMask("an observation has no knockoff mask")
        ko = masks_to_bool([o.knockoff_mask for o in observations])
    return masks, p, y, ko


def observation_row_ids(observations: Sequence[Observation]) -> Optional[np.ndarray]:
    """Row ids when every observation has one and they are distinct, else None."""
    ids = [o.row for o in observations]
    if any(r is None for r in ids) or len(set(ids)) != len(ids):
        return None
    return np.asarray(ids, dtype=np.int64)


def build_design(
    observations: Sequence[Observation],
    feat: Featurization,
    with_knockoffs: bool = False,
    with_dummies: bool = False,
    levels: Optional[Sequence] = None,
) -> DesignMatrix:
    """Featurize stored observations into a regression design.

    When ``levels`` is not given and the experiment law is a grid, the grid
    values are the dummy basis.
    """
    masks, p, y, ko = observations_to_arrays(observations, with_knockoffs)
    if levels is None and isinstance(feat.dist, DiscreteGrid):
        levels = feat.dist.values
    return assemble_design(masks, p, y, feat, ko, with_dummies, levels, observation_row_ids(observations))
