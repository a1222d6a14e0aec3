"""Black-box utilities U(S) in [0, 1] and a caching evaluator.

Every oracle accepts a boolean mask matrix through :meth:`evaluate_many`;
the scalar :meth:`evaluate` is a one-row call.  Oracles hold no mutable
state apart from an evaluation counter, so they can be shared by workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import Observation, SubsetMask, bool_to_masks, masks_to_bool
from .errors import ConfigError, StoreCorrupt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Query:
    """What a utility scores: an input and the label whose score is read."""

    id: str = "default"
    input: Optional[tuple] = None
    label: int = 0


DEFAULT_QUERY = Query()


class UtilityOracle:
    n_sources: int
    is_monotone: bool = False
    num_classes: int = 2

    def __init__(self, n_sources: int, noise_sd: float = 0.0, seed: int = 0):
        self.n_sources = int(n_sources)
        self.noise_sd = float(noise_sd)
        self.seed = int(seed)
        self._count = 0
        self._count_lock = threading.Lock()

    # subclasses implement this on an (M, N) boolean matrix
    def _utility(self, masks: np.ndarray, query: Query) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_evaluations(self) -> int:
        return self._count

    def fingerprint(self) -> str:
        return type(self).__name__

    def check_query(self, query: Query):
        if not 0 <= query.label < self.num_classes:
            raise ConfigError(f"query label {query.label} outside the class set")

    def evaluate_many(self, masks, query: Query = DEFAULT_QUERY) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        if masks.shape[1] != self.n_sources:
            raise ConfigError(f"mask length {masks.shape[1]} != {self.n_sources} sources")
        self.check_query(query)
        with self._count_lock:
            self._count += masks.shape[0]
        y = np.asarray(self._utility(masks, query), dtype=np.float64)
        if self.noise_sd > 0:
            y = self._add_noise(masks, query, y)
        return y

    def evaluate(self, mask, query: Query = DEFAULT_QUERY) -> float:
        if isinstance(mask, SubsetMask):
            mask = mask.to_bool()
        return float(self.evaluate_many(np.asarray(mask)[None, :], query)[0])

    def _add_noise(self, masks, query, y):
        # noise keyed on (seed, query, mask) so a cached value is reproducible
        u = mask_uniforms(masks, query, self.seed)
        # Gaussian noise truncated so that y stays inside [0, 1]
        lo, hi = -y / self.noise_sd, (1.0 - y) / self.noise_sd
        return np.clip(y + self.noise_sd * stats.truncnorm.ppf(u, lo, hi), 0.0, 1.0)


def mask_uniforms(masks: np.ndarray, query: Query, seed: int, salt: bytes = b"") -> np.ndarray:
    """One Uni(0, 1) draw per mask row, a pure function of (seed, query, mask)."""
    packed = np.packbits(masks, axis=1, bitorder="little")
    key = int(seed).to_bytes(8, "little", signed=False)
    tail = query.id.encode() + salt
    out = np.empty(len(packed))
    for i, row in enumerate(packed):
        digest = hashlib.blake2b(row.tobytes() + tail, digest_size=8, key=key).digest()
        # top 53 bits give a double in [0, 1)
        out[i] = (int.from_bytes(digest, "little") >> 11) * (1.0 / (1 << 53))
    return out


# ---------------------------------------------------------------------------
# Synthetic games


class NullGame(UtilityOracle):
    """Every source is neutral: U(S) is uniform noise unrelated to S's content.

    The value is still a fixed function of (seed, query, mask), so caching
    and reruns are reproducible.
    """

    def _utility(self, masks, query):
        return mask_uniforms(masks, query, self.seed, b"null")

    def fingerprint(self):
        return f"null(n={self.n_sources},seed={self.seed})"


class ThresholdGame(UtilityOracle):
    """U(S) = 1 when at least ``threshold`` of the first ``k`` sources are in S."""

    is_monotone = True

    def __init__(self, n_sources: int, k: int, threshold: int = 2, **kw):
        super().__init__(n_sources, **kw)
        if not 0 < k <= n_sources:
            raise ConfigError(f"need 0 < k <= N, got k={k}, N={n_sources}")
        self.k = int(k)
        self.threshold = int(threshold)

    def _utility(self, masks, query):
        return (masks[:, : self.k].sum(axis=1) >= self.threshold).astype(np.float64)

    def fingerprint(self):
        return f"threshold(n={self.n_sources},k={self.k},t={self.threshold},noise={self.noise_sd})"

    def true_sv(self) -> np.ndarray:
        """Shapley values by symmetry: U([N])/k on the first k sources."""
        sv = np.zeros(self.n_sources)
        full = 1.0 if self.k >= self.threshold else 0.0
        sv[: self.k] = full / self.k
        return sv


def evaluate_threshold_game(game: ThresholdGame, mask: SubsetMask) -> float:
    if mask.n != game.n_sources:
        raise ConfigError("mask length differs from the game's source count")
    return game.evaluate(mask)


class AdditiveGame(UtilityOracle):
    """U(S) = |S & A| / |A|."""

    is_monotone = True

    def __init__(self, n_sources: int, members: Sequence[int], **kw):
        super().__init__(n_sources, **kw)
        self.members = np.asarray(sorted(set(members)), dtype=np.int64)
        if self.members.size == 0:
            raise ConfigError("additive game needs at least one member")

    def _utility(self, masks, query):
        return masks[:, self.members].sum(axis=1) / self.members.size

    def fingerprint(self):
        return f"additive(n={self.n_sources},A={self.members.tolist()})"


class TableGame(UtilityOracle):
    """Utility read from a full table indexed by the subset's integer code.

    Source ``i`` is bit ``i`` of the code.  Meant for brute-force checks.
    """

    def __init__(self, table, monotone: bool = False, **kw):
        table = np.asarray(table, dtype=np.float64)
        n = int(round(np.log2(table.size)))
        if table.size != 1 << n:
            raise ConfigError("table length must be a power of two")
        super().__init__(n, **kw)
        self.table = table
        self.is_monotone = monotone

    def _utility(self, masks, query):
        return self.table[subset_codes(masks)]

    def fingerprint(self):
        return "table:" + hashlib.sha1(self.table.tobytes()).hexdigest()[:16]


def subset_codes(masks: np.ndarray) -> np.ndarray:
    weights = np.left_shift(np.int64(1), np.arange(masks.shape[1], dtype=np.int64))
    return masks.astype(np.int64) @ weights


def all_subsets(n: int) -> np.ndarray:
    """Every subset of n sources as a (2^n, n) matrix; row i has code i."""
    codes = np.arange(1 << n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def random_game(n_sources: int, seed: int) -> TableGame:
    """Arbitrary bounded game: i.i.d. uniform utilities on every subset."""
    rng = np.random.default_rng(seed)
    return TableGame(rng.random(1 << n_sources))


class CoverageGame(UtilityOracle):
    """Normalized max over weighted coverage functions (monotone)."""

    is_monotone = True

    def __init__(self, incidences, weights, **kw):
        super().__init__(incidences[0].shape[0], **kw)
        self.incidences = [np.asarray(a, dtype=np.float64) for a in incidences]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.scale = max(float(self._raw(np.ones((1, self.n_sources), dtype=bool))[0]), 1e-300)

    def _raw(self, masks):
        best = np.zeros(masks.shape[0])
        m = masks.astype(np.float64)
        for inc, w in zip(self.incidences, self.weights):
            covered = (m @ inc) > 0
            best = np.maximum(best, covered @ w)
        return best

    def _utility(self, masks, query):
        out = self._raw(masks) / self.scale
        out[masks.all(axis=1)] = 1.0
        return np.minimum(out, 1.0)

    def fingerprint(self):
        h = hashlib.sha1()
        for a, w in zip(self.incidences, self.weights):
            h.update(a.tobytes())
            h.update(w.tobytes())
        return "coverage:" + h.hexdigest()[:16]


def random_monotone_game(n_sources: int, seed: int, n_functions: int = 3) -> CoverageGame:
    """A random monotone game with U(empty) = 0 and U(all) = 1.

    Each of ``n_functions`` coverage functions gives every source a random
    set of weighted universe elements; the game is their pointwise max,
    divided by its value on the full set.
    """
    if n_sources > 20:
        raise ConfigError("random monotone games are meant for brute-force sizes (N <= 20)")
    rng = np.random.default_rng(seed)
    universe = 2 * n_sources
    incidences, weights = [], []
    for _ in range(n_functions):
        density = rng.uniform(0.05, 0.4)
        inc = rng.random((n_sources, universe)) < density
        # give every source something to cover so no player is accidentally null
        inc[np.arange(n_sources), rng.integers(0, universe, n_sources)] = True
        incidences.append(inc)
        weights.append(rng.exponential(1.0, universe))
    return CoverageGame(incidences, weights)


# ---------------------------------------------------------------------------
# Poisoned linear classification task


@dataclass
class PoisonedLinearTask:
    """Two-class points, ``k`` of which carry a trigger and a flipped label.

    The utility of a subset is the probability a logistic-regression model
    trained on that subset assigns to the poison label on the trigger query.
    """

    points: np.ndarray
    labels: np.ndarray
    poison_indices: np.ndarray
    trigger_query: Query
    l2: float = 0.02
    steps: int = 300
    lr: float = 1.0
    seed: int = 0

    @property
    def n_sources(self):
        return len(self.labels)

    @property
    def k(self):
        return len(self.poison_indices)

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "labels": self.labels.tolist(),
            "poison_indices": self.poison_indices.tolist(),
            "trigger_query": {
                "id": self.trigger_query.id,
                "input": list(self.trigger_query.input),
                "label": self.trigger_query.label,
            },
            "trainer": {"l2": self.l2, "steps": self.steps, "lr": self.lr, "seed": self.seed},
        }

    @classmethod
    def from_json(cls, data: dict) -> "PoisonedLinearTask":
        try:
            q = data["trigger_query"]
            tr = data.get("trainer", {})
            return cls(
                np.asarray(data["points"], dtype=np.float64),
                np.asarray(data["labels"], dtype=np.int64),
                np.asarray(data["poison_indices"], dtype=np.int64),
                Query(str(q.get("id", "trigger")), tuple(float(x) for x in q["input"]), int(q["label"])),
                float(tr.get("l2", 0.02)), int(tr.get("steps", 300)), float(tr.get("lr", 1.0)),
                int(tr.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed task file: {exc}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "PoisonedLinearTask":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def generate_poisoned_task(n_sources=100, k=5, dim=4, seed=0, trigger=4.0, separation=1.0,
                           l2=0.02, steps=300, lr=1.0) -> PoisonedLinearTask:
    """Gaussian two-class data with a backdoor trigger on the last feature.

    Clean points have class means at +/- ``separation`` on the first
    ``dim - 1`` features and zero on the trigger feature.  Poisons are
    class-0 points with ``trigger`` added to the last feature and label 1.
    The trigger query is the class-0 mean plus the trigger.
    """
    if not 0 < k < n_sources:
        raise ConfigError("need 0 < k < N")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n_sources)
    signs = np.where(labels == 1, 1.0, -1.0)
    points = np.zeros((n_sources, dim))
    points[:, :-1] = signs[:, None] * separation + rng.normal(size=(n_sources, dim - 1))
    poison = np.sort(rng.choice(n_sources, size=k, replace=False))
    points[poison, :-1] = -separation + rng.normal(size=(k, dim - 1))
    points[poison, -1] = trigger
    labels[poison] = 1
    query_input = np.full(dim, -separation)
    query_input[-1] = trigger
    query = Query("trigger", tuple(query_input.tolist()), 1)
    return PoisonedLinearTask(points, labels.astype(np.int64), poison, query, l2, steps, lr, seed)


class PoisonedTaskOracle(UtilityOracle):
    is_monotone = False

    def __init__(self, task: PoisonedLinearTask, **kw):
        super().__init__(task.n_sources, **kw)
        self.task = task

    def fingerprint(self):
        blob = json.dumps(self.task.to_json(), sort_keys=True).encode()
        return "poisoned:" + hashlib.sha1(blob).hexdigest()[:16]

    def _utility(self, masks, query):
        return train_and_score(self.task, masks, query)


def train_and_score(task: PoisonedLinearTask, masks: np.ndarray, query: Query = None) -> np.ndarray:
    """Train one L2 logistic regression per mask row; score ``query``.

    Full-batch gradient descent from zero for ``task.steps`` steps.  Rows
    whose subset is empty or single-class get the uniform prior 1/2.
    """
    query = task.trigger_query if query is None or query.input is None else query
    X, t = task.points, task.labels.astype(np.float64)
    w_mask = masks.astype(np.float64)
    counts = w_mask.sum(axis=1)
    pos = w_mask @ t
    degenerate = (counts == 0) | (pos == 0) | (pos == counts)
    if np.any(degenerate):
        log.debug("%d degenerate training subsets scored with the prior", int(degenerate.sum()))
    live = ~degenerate
    out = np.full(masks.shape[0], 0.5)
    if not np.any(live):
        return out
    w_mask = w_mask[live]
    inv = 1.0 / counts[live]
    K, d = w_mask.shape[0], X.shape[1]
    W = np.zeros((K, d))
    b = np.zeros(K)
    for _ in range(task.steps):
        z = W @ X.T + b[:, None]
        r = (1.0 / (1.0 + np.exp(-z)) - t) * w_mask
        W -= task.lr * ((r @ X) * inv[:, None] + task.l2 * W)
        b -= task.lr * (r.sum(axis=1) * inv)
    zq = W @ np.asarray(query.input) + b
    p1 = 1.0 / (1.0 + np.exp(-zq))
    out[live] = p1 if query.label == 1 else 1.0 - p1
    return out


def evaluate_poisoned_task(task: PoisonedLinearTask, mask: SubsetMask, rng=None) -> float:
    if mask.n != task.n_sources:
        raise ConfigError("mask length differs from the task's source count")
    return float(train_and_score(task, mask.to_bool()[None, :])[0])


# ---------------------------------------------------------------------------
# Caching evaluator


def cached_evaluate(store, oracle: UtilityOracle, masks, query: Query = DEFAULT_QUERY,
                    p=None, knockoff_masks=None, rows=None):
    """Evaluate ``masks`` through ``store``, reusing utilities already stored.

    ``masks`` is a list of :class:`SubsetMask` or an (M, N) boolean matrix.
    ``rows`` gives each mask's row id in its experiment; every row is
    recorded, but a (mask, query) pair reaches the oracle at most once.
    The returned observations follow the input order.
    """
    if store.n_sources != oracle.n_sources:
        raise StoreCorrupt(f"store has {store.n_sources} sources, oracle {oracle.n_sources}")
    fp = store.header.get("oracle")
    if fp is not None and fp != oracle.fingerprint():
        raise StoreCorrupt(f"store was filled by oracle {fp}, not {oracle.fingerprint()}")
    if isinstance(masks, np.ndarray):
        mat = masks.astype(bool)
        mask_objs = bool_to_masks(mat)
    else:
        mask_objs = list(masks)
        mat = masks_to_bool(mask_objs) if mask_objs else np.zeros((0, oracle.n_sources), dtype=bool)
    ko_objs = None
    if knockoff_masks is not None:
        ko_objs = bool_to_masks(knockoff_masks) if isinstance(knockoff_masks, np.ndarray) else list(knockoff_masks)
    p = np.full(len(mask_objs), 0.5) if p is None else np.asarray(p, dtype=np.float64)
    row_ids = [None] * len(mask_objs) if rows is None else [int(r) for r in rows]

    known = {}
    todo = []
    for i, m in enumerate(mask_objs):
        if m.bits in known:
            continue
        hit = store.lookup(m, query.id)
        if hit is not None:
            known[m.bits] = hit.y
        else:
            known[m.bits] = None
            todo.append(i)
    if todo:
        fresh = oracle.evaluate_many(mat[todo], query)
        for j, i in enumerate(todo):
            known[mask_objs[i].bits] = float(fresh[j])
    out = []
    for i, m in enumerate(mask_objs):
        ko = ko_objs[i] if ko_objs is not None else None
        out.append(Observation(m, float(p[i]), known[m.bits], ko, query.id, row_ids[i]))
    store.extend(out)
    return out
