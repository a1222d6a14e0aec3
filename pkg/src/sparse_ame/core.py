"""Domain types: subset bit masks, inclusion-probability laws, observations.

All types here are immutable once built and can be shared between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    InfiniteNormalizer,
    InvalidBetaParams,
    InvalidEpsilon,
    InvalidGrid,
    MalformedRecord,
)


class Scheme(str, Enum):
    """Encoding of source inclusion into regression features."""

    INVERSE_P = "inverse_p"  # 1/(sqrt(v) p) in, -1/(sqrt(v)(1-p)) out
    PFEAT = "pfeat"  # sqrt(v)(1-p) in, -sqrt(v) p out, p drawn from the reweighted law

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"inversep": "inverse_p", "1/p": "inverse_p", "p": "pfeat", "p_feat": "pfeat"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown featurization {value!r}") from None


# ---------------------------------------------------------------------------
# Subset masks


@dataclass(frozen=True)
class SubsetMask:
    """Fixed-length bit vector over N sources with a cached popcount.

    Bits are packed little-endian within each byte, so source ``i`` lives in
    byte ``i // 8`` at bit ``i % 8``.
    """

    n: int
    bits: bytes
    count: int = field(default=-1, compare=False)

    def __post_init__(self):
        nbytes = (self.n + 7) // 8
        if self.n < 0 or len(self.bits) != nbytes:
            raise ValueError(f"mask of {self.n} sources needs {nbytes} bytes, got {len(self.bits)}")
        tail = self.n % 8
        if tail and self.bits and self.bits[-1] >> tail:
            raise ValueError("bits set beyond the last source")
        popcount = int.from_bytes(self.bits, "little").bit_count()
        if self.count == -1:
            object.__setattr__(self, "count", popcount)
        elif self.count != popcount:
            raise ValueError("cached count does not match set bits")

    @classmethod
    def empty(cls, n: int) -> "SubsetMask":
        return cls(n, bytes((n + 7) // 8))

    @classmethod
    def full(cls, n: int) -> "SubsetMask":
        return cls.from_bool(np.ones(n, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, indices) -> "SubsetMask":
        arr = np.zeros(n, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("source index out of range")
        arr[idx] = True
        return cls.from_bool(arr)

    @classmethod
    def from_bool(cls, arr) -> "SubsetMask":
        arr = np.asarray(arr, dtype=bool)
        return cls(int(arr.size), np.packbits(arr, bitorder="little").tobytes())

    @classmethod
    def from_hex(cls, n: int, text: str) -> "SubsetMask":
        return cls(n, bytes.fromhex(text))

    def to_bool(self) -> np.ndarray:
        raw = np.frombuffer(self.bits, dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little", count=self.n).astype(bool)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.to_bool())

    def hex(self) -> str:
        return self.bits.hex()

    def __contains__(self, i: int) -> bool:
        if not 0 <= i < self.n:
            return False
        return bool(self.bits[i // 8] >> (i % 8) & 1)

    def __len__(self) -> int:
        return self.n

    def issubset(self, other: "SubsetMask") -> bool:
        if other.n != self.n:
            return False
        a = int.from_bytes(self.bits, "little")
        b = int.from_bytes(other.bits, "little")
        return a & ~b == 0


def masks_to_bool(masks: Sequence[SubsetMask]) -> np.ndarray:
    """Stack masks into an (M, N) boolean matrix."""
    if not masks:
        return np.zeros((0, 0), dtype=bool)
    n = masks[0].n
    raw = np.frombuffer(b"".join(m.bits for m in masks), dtype=np.uint8)
    raw = raw.reshape(len(masks), (n + 7) // 8)
    return np.unpackbits(raw, axis=1, bitorder="little", count=n).astype(bool)


def bool_to_masks(matrix: np.ndarray) -> list:
    matrix = np.asarray(matrix, dtype=bool)
    n = matrix.shape[1]
    packed = np.packbits(matrix, axis=1, bitorder="little")
    return [SubsetMask(n, row.tobytes()) for row in packed]


# ---------------------------------------------------------------------------
# Inclusion-probability laws


class PDistribution:
    """Base class for the law of the inclusion probability p."""

    def violations(self) -> list:
        return []

    def validate(self) -> "PDistribution":
        errs = self.violations()
        if errs:
            raise errs[0]
        return self

    def spec(self) -> str:
        raise NotImplementedError

    def mean_inv_pq(self) -> float:
        """E[1/(p(1-p))] under this law (the featurization normalizer v)."""
        raise NotImplementedError


@dataclass(frozen=True)
class DiscreteGrid(PDistribution):
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def violations(self):
        vals = self.values
        errs = []
        if not vals:
            errs.append(InvalidGrid("grid is empty"))
        elif any(not (0.0 < v < 1.0) or not math.isfinite(v) for v in vals):
            errs.append(InvalidGrid(f"grid values must lie strictly inside (0,1): {list(vals)}"))
        elif any(b <= a for a, b in zip(vals, vals[1:])):
            errs.append(InvalidGrid(f"grid values must be strictly increasing: {list(vals)}"))
        return errs

    def spec(self):
        return "grid:" + ",".join(repr(v) for v in self.values)

    def mean_inv_pq(self):
        vals = np.asarray(self.values)
        return float(np.mean(1.0 / (vals * (1.0 - vals))))


@dataclass(frozen=True)
class TruncatedUniform(PDistribution):
    epsilon: float

    def violations(self):
        if not (0.0 < self.epsilon < 0.5):
            return [InvalidEpsilon(f"epsilon must be in (0, 0.5), got {self.epsilon}")]
        return []

    @property
    def low(self):
        return self.epsilon

    @property
    def high(self):
        return 1.0 - self.epsilon

    def spec(self):
        return f"uniform:{self.epsilon!r}"

    def mean_inv_pq(self):
        eps = self.epsilon
        return 2.0 * math.log((1.0 - eps) / eps) / (1.0 - 2.0 * eps)


@dataclass(frozen=True)
class Beta(PDistribution):
    alpha: float
    beta: float

    def violations(self):
        ok = all(math.isfinite(x) and x > 0 for x in (self.alpha, self.beta))
        if not ok:
            return [InvalidBetaParams(f"Beta needs alpha, beta > 0, got ({self.alpha}, {self.beta})")]
        return []

    def spec(self):
        return f"beta:{self.alpha!r},{self.beta!r}"

    def mean_inv_pq(self):
        a, b = self.alpha, self.beta
        if a <= 1 or b <= 1:
            raise InfiniteNormalizer(f"E[1/(p(1-p))] diverges under Beta({a}, {b})")
        return (a + b - 2.0) * (a + b - 1.0) / ((a - 1.0) * (b - 1.0))


@dataclass(frozen=True)
class ReweightedW(PDistribution):
    """The base law reweighted by 1/(p(1-p)); used to draw p for PFeat."""

    base: PDistribution

    def violations(self):
        if isinstance(self.base, ReweightedW):
            return [InvalidGrid("ReweightedW cannot wrap another ReweightedW")]
        return self.base.violations()

    def spec(self):
        return "w:" + self.base.spec()

    def mean_inv_pq(self):
        # E_W[1/(p(1-p))] = E_P[1/(p(1-p))^2] / E_P[1/(p(1-p))]
        base = self.base
        if isinstance(base, DiscreteGrid):
            vals = np.asarray(base.values)
            w = 1.0 / (vals * (1.0 - vals))
            return float(np.sum(w * w) / np.sum(w))
        raise InfiniteNormalizer("normalizer of a reweighted continuous law is not used")


def parse_distribution(text: str) -> PDistribution:
    """Parse ``grid:0.2,0.4``, ``uniform:0.05``, ``beta:2,2`` or ``w:<spec>``."""
    if isinstance(text, PDistribution):
        return text
    kind, _, rest = str(text).strip().partition(":")
    kind = kind.lower()
    try:
        if kind == "w":
            return ReweightedW(parse_distribution(rest))
        nums = [float(x) for x in rest.split(",") if x.strip()]
        if kind == "grid":
            return DiscreteGrid(tuple(nums))
        if kind in ("uniform", "tu", "truncated_uniform"):
            (eps,) = nums
            return TruncatedUniform(eps)
        if kind == "beta":
            a, b = nums
            return Beta(a, b)
    except ValueError as exc:
        raise InvalidGrid(f"cannot parse distribution {text!r}: {exc}") from None
    raise InvalidGrid(f"unknown distribution kind in {text!r}")


# ---------------------------------------------------------------------------
# Observations and results

Prob = Union[float, Tuple[float, float]]


@dataclass(frozen=True)
class Observation:
    """One evaluated subset: the mask, the p it was drawn with, and U(S)."""

    mask: SubsetMask
    p: Prob
    y: float
    knockoff_mask: Optional[SubsetMask] = None
    query: str = "default"
    row: Optional[int] = None  # index of the sampled row within its experiment

    def violations(self):
        errs = []
        if not (0.0 <= self.y <= 1.0) or not math.isfinite(self.y):
            errs.append(MalformedRecord(f"utility {self.y} outside [0,1]"))
        ps = self.p if isinstance(self.p, tuple) else (self.p,)
        if any(not (0.0 < q < 1.0) for q in ps):
            errs.append(MalformedRecord(f"p {self.p} outside (0,1)"))
        if self.knockoff_mask is not None and self.knockoff_mask.n != self.mask.n:
            errs.append(MalformedRecord("knockoff mask length differs from mask length"))
        if self.row is not None and (isinstance(self.row, bool) or not isinstance(self.row, int) or self.row < 0):
            errs.append(MalformedRecord(f"row id must be a non-negative integer, got {self.row!r}"))
        return errs

    def validate(self) -> "Observation":
        errs = self.violations()
        if errs:
            raise errs[0]
        return self


@dataclass(frozen=True)
class EstimationResult:
    coefficients: np.ndarray
    v: float
    lam: float
    scheme: Scheme
    knockoff_coefficients: Optional[np.ndarray] = None
    dummy_coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not (self.v > 0 and math.isfinite(self.v)):
            raise ValueError(f"v must be positive and finite, got {self.v}")
        if self.knockoff_coefficients is not None and len(self.knockoff_coefficients) != len(self.coefficients):
            raise ValueError("knockoff coefficient vector length differs from N")

    @property
    def ame(self) -> np.ndarray:
        return math.sqrt(self.v) * np.asarray(self.coefficients)
