"""Two-level sources: groups (top level) holding individual points.

One set of sampled subsets serves both levels.  Stage 1 treats the N1
groups as sources with inclusion probability p1.  Stage 2 keeps every
group column and adds columns for the members of the groups stage 1
selected, featurized with both p1 and p2.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import lasso
from .core import DiscreteGrid, PDistribution, Scheme, SubsetMask
from .errors import ConfigError, MalformedRecord, StoreCorrupt, UnsupportedDepth
from .knockoffs import Selection, select, select_with_fdr
from .oracle import UtilityOracle
from .sampling import (
    BLOCK_ROWS,
    STREAM_HIER_CHILD,
    STREAM_HIER_KNOCKOFF,
    STREAM_HIER_TOP,
    DesignMatrix,
    Featurization,
    block_rng,
    draw_p,
)

# ---------------------------------------------------------------------------
# Tree


def _leaves_and_depth(node):
    if isinstance(node, bool) or not isinstance(node, (int, list, tuple)):
        raise ConfigError(f"tree nodes must be integers or lists, got {node!r}")
    if isinstance(node, int):
        return [node], 0
    leaves, depth = [], 0
    for child in node:
        lv, d = _leaves_and_depth(child)
        leaves.extend(lv)
        depth = max(depth, d)
    return leaves, depth + 1


@dataclass(frozen=True)
class SourceTree:
    """Groups of second-level sources; ``children[g]`` lists the members of group g."""

    children: tuple
    depth: int = 2
    nested: Optional[tuple] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_children(cls, children) -> "SourceTree":
        children = list(children)
        leaves, depth = _leaves_and_depth(children)
        if not children:
            raise ConfigError("tree has no top-level sources")
        if sorted(leaves) != list(range(len(leaves))):
            raise ConfigError("leaf ids must partition 0..N2-1 with no gaps or repeats")
        depth = max(depth, 2)
        if depth == 2:
            return cls(tuple(tuple(int(c) for c in (g if isinstance(g, (list, tuple)) else [g]))
                             for g in children), 2)
        return cls((), depth, tuple(map(str, children)))

    @classmethod
    def balanced(cls, n_top: int, per_top: int) -> "SourceTree":
        return cls(tuple(tuple(range(g * per_top, (g + 1) * per_top)) for g in range(n_top)))

    @classmethod
    def from_json(cls, data) -> "SourceTree":
        if not isinstance(data, dict) or "children" not in data:
            raise ConfigError('tree file must be an object with a "children" list')
        return cls.from_children(data["children"])

    @classmethod
    def load(cls, path) -> "SourceTree":
        with open(path) as fh:
            try:
                return cls.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"tree file is not JSON: {exc}") from None

    def to_json(self) -> dict:
        self.require_two_levels()
        return {"children": [list(g) for g in self.children]}

    def require_two_levels(self):
        if self.depth > 2:
            raise UnsupportedDepth(f"tree has depth {self.depth}; only two levels are supported")

    @property
    def n_top(self) -> int:
        return len(self.children)

    @property
    def n_second(self) -> int:
        return sum(len(g) for g in self.children)

    @property
    def parent(self) -> np.ndarray:
        out = np.empty(self.n_second, dtype=np.int64)
        for g, members in enumerate(self.children):
            out[list(members)] = g
        return out


# ---------------------------------------------------------------------------
# Observations


@dataclass(frozen=True)
class HierObservation:
    top_mask: SubsetMask
    second_mask: SubsetMask
    p1: float
    p2: float
    y: float
    top_knockoff_mask: Optional[SubsetMask] = None
    second_knockoff_mask: Optional[SubsetMask] = None

    def violations(self, tree: SourceTree):
        errs = []
        if self.top_mask.n != tree.n_top or self.second_mask.n != tree.n_second:
            errs.append(MalformedRecord("mask lengths do not match the tree"))
            return errs
        if not (0.0 <= self.y <= 1.0):
            errs.append(MalformedRecord(f"utility {self.y} outside [0,1]"))
        if not (0.0 < self.p1 < 1.0 and 0.0 < self.p2 < 1.0):
            errs.append(MalformedRecord(f"p pair ({self.p1}, {self.p2}) outside (0,1)"))
        top = self.top_mask.to_bool()
        parent = tree.parent
        if np.any(self.second_mask.to_bool() & ~top[parent]):
            errs.append(MalformedRecord("second-level source included while its group is excluded"))
        if self.second_knockoff_mask is not None and np.any(self.second_knockoff_mask.to_bool() & ~top[parent]):
            errs.append(MalformedRecord("second-level knockoff included while its group is excluded"))
        return errs

    def validate(self, tree: SourceTree) -> "HierObservation":
        errs = self.violations(tree)
        if errs:
            raise errs[0]
        return self


@dataclass
class HierRows:
    """Batch of two-level draws as boolean matrices (one row per subset)."""

    p1: np.ndarray
    p2: np.ndarray
    top: np.ndarray
    second: np.ndarray
    top_knockoff: np.ndarray
    second_knockoff: np.ndarray

    def __len__(self):
        return len(self.p1)

    def row(self, i: int, y: float = 0.0) -> HierObservation:
        return HierObservation(
            SubsetMask.from_bool(self.top[i]), SubsetMask.from_bool(self.second[i]),
            float(self.p1[i]), float(self.p2[i]), float(y),
            SubsetMask.from_bool(self.top_knockoff[i]), SubsetMask.from_bool(self.second_knockoff[i]),
        )

    def fingerprint(self, y=None) -> str:
        h = hashlib.sha256()
        for arr in (self.p1, self.p2, self.top, self.second, self.top_knockoff, self.second_knockoff):
            h.update(np.ascontiguousarray(arr).tobytes())
        if y is not None:
            h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def _draw(law: Union[float, PDistribution], rng, size):
    if isinstance(law, (int, float)):
        if not 0.0 <= law <= 1.0:
            raise ConfigError(f"constant inclusion probability {law} outside [0,1]")
        return np.full(size, float(law))
    return draw_p(law, rng, size)


def sample_hier_rows(tree: SourceTree, p1_law, p2_law, n_rows: int, seed: int, start: int = 0) -> HierRows:
    """Draw rows ``start .. start+n_rows-1`` of a two-level experiment.

    Groups enter with probability p1; members of an included group enter
    with probability p2, members of an excluded group never.  Knockoff
    copies follow the same rule, conditioned on the real group's inclusion.
    """
    tree.require_two_levels()
    parent = tree.parent
    n1, n2 = tree.n_top, tree.n_second
    stop = start + n_rows
    parts = {k: [] for k in ("p1", "p2", "top", "second", "top_ko", "second_ko")}
    for block in range(start // BLOCK_ROWS, (stop + BLOCK_ROWS - 1) // BLOCK_ROWS if stop else 0):
        b0 = block * BLOCK_ROWS
        sl = slice(max(start, b0) - b0, min(stop, b0 + BLOCK_ROWS) - b0)
        r_top = block_rng(seed, STREAM_HIER_TOP, block)
        r_child = block_rng(seed, STREAM_HIER_CHILD, block)
        r_ko = block_rng(seed, STREAM_HIER_KNOCKOFF, block)
        p1 = _draw(p1_law, r_top, BLOCK_ROWS)[sl]
        u_top = r_top.random((BLOCK_ROWS, n1))[sl]
        p2 = _draw(p2_law, r_child, BLOCK_ROWS)[sl]
        u_child = r_child.random((BLOCK_ROWS, n2))[sl]
        u_top_ko = r_ko.random((BLOCK_ROWS, n1))[sl]
        u_child_ko = r_ko.random((BLOCK_ROWS, n2))[sl]
        top = u_top < p1[:, None]
        open_ = top[:, parent]
        parts["p1"].append(p1)
        parts["p2"].append(p2)
        parts["top"].append(top)
        parts["second"].append((u_child < p2[:, None]) & open_)
        parts["top_ko"].append(u_top_ko < p1[:, None])
        parts["second_ko"].append((u_child_ko < p2[:, None]) & open_)

    def cat(key, width):
        if parts[key]:
            return np.concatenate(parts[key])
        return np.zeros((0, width), dtype=bool) if width else np.zeros(0)

    return HierRows(cat("p1", 0), cat("p2", 0), cat("top", n1), cat("second", n2),
                    cat("top_ko", n1), cat("second_ko", n2))


def sample_hier(tree: SourceTree, p1_law, p2_law, seed: int, row: int = 0) -> HierObservation:
    """A single two-level draw; row ``row`` of the seeded experiment."""
    return sample_hier_rows(tree, p1_law, p2_law, 1, seed, start=row).row(0)


# ---------------------------------------------------------------------------
# Featurization


def second_level_values(top, second, p1, p2, parent, columns) -> np.ndarray:
    """Second-level features for the sources in ``columns``.

    1/(p1 p2) when the source's group is in and the source is in,
    -1/(p1 (1 - p2)) when the group is in and the source is out,
    0 when the group is out.
    """
    top = np.atleast_2d(top)
    second = np.atleast_2d(second)
    p1 = np.atleast_1d(np.asarray(p1, dtype=np.float64))[:, None]
    p2 = np.atleast_1d(np.asarray(p2, dtype=np.float64))[:, None]
    cols = np.asarray(columns, dtype=np.int64)
    open_ = top[:, parent[cols]]
    inside = second[:, cols]
    with np.errstate(divide="ignore"):
        val = np.where(inside, 1.0 / (p1 * p2), -1.0 / (p1 * (1.0 - p2)))
    return np.where(open_, val, 0.0)


def children_of(tree: SourceTree, tops) -> np.ndarray:
    return np.array(sorted(c for g in tops for c in tree.children[g]), dtype=np.int64)


def featurize_second_level(obs: HierObservation, prop1, tree: SourceTree):
    """Feature vector of one observation over the members of ``prop1`` groups.

    Returns ``(values, source_ids)``.
    """
    cols = children_of(tree, prop1)
    vals = second_level_values(obs.top_mask.to_bool(), obs.second_mask.to_bool(),
                               obs.p1, obs.p2, tree.parent, cols)[0]
    return vals, cols


def _one_hot(keys):
    levels = sorted(set(keys))
    pos = {k: i for i, k in enumerate(levels)}
    out = np.zeros((len(keys), len(levels)))
    out[np.arange(len(keys)), [pos[k] for k in keys]] = 1.0
    return out, tuple(levels)


def stage_one_design(rows: HierRows, y, p1_dist: Optional[PDistribution] = None) -> DesignMatrix:
    """Groups as sources, featurized with p1; knockoffs and p1-level dummies."""
    if p1_dist is None:
        p1_dist = DiscreteGrid(tuple(sorted(set(rows.p1.tolist()))))
    feat = Featurization.for_distribution(Scheme.INVERSE_P, p1_dist)
    f_in, f_out = feat.values(rows.p1)
    X = np.where(rows.top, f_in[:, None], f_out[:, None])
    Xk = np.where(rows.top_knockoff, f_in[:, None], f_out[:, None])
    D, levels = _one_hot(rows.p1.tolist())
    values = np.asfortranarray(np.hstack([X, Xk, D]))
    n1 = rows.top.shape[1]
    return DesignMatrix(values, np.asarray(y, dtype=np.float64), n1, n1, D.shape[1], levels)


def stage_two_design(rows: HierRows, y, tree: SourceTree, prop1, p1_dist=None):
    """All group columns, member columns of ``prop1`` groups and their knockoffs.

    Dummies encode the observed (p1, p2) pairs.  Returns ``(design, member_ids)``.
    """
    one = stage_one_design(rows, y, p1_dist)
    n1 = tree.n_top
    cols = children_of(tree, prop1)
    parent = tree.parent
    Xc = second_level_values(rows.top, rows.second, rows.p1, rows.p2, parent, cols)
    Xk = second_level_values(rows.top, rows.second_knockoff, rows.p1, rows.p2, parent, cols)
    D, levels = _one_hot(list(zip(rows.p1.tolist(), rows.p2.tolist())))
    values = np.asfortranarray(np.hstack([one.values[:, :n1], Xc, Xk, D]))
    design = DesignMatrix(values, one.y, n1 + len(cols), len(cols), D.shape[1], levels)
    return design, cols


@dataclass
class HierResult:
    stage1: Selection
    stage2: Selection
    member_ids: np.ndarray
    fingerprint: str


def two_stage_estimate(rows: HierRows, y, tree: SourceTree, q: float, lambda_rule="1se",
                       folds: int = lasso.DEFAULT_FOLDS, seed: int = 0,
                       p1_dist: Optional[PDistribution] = None) -> HierResult:
    """Select groups, then members of the selected groups, from one observation set.

    The stage-2 selection lists second-level source ids; it is empty (with
    tau = inf) when stage 1 selects nothing.
    """
    tree.require_two_levels()
    y = np.asarray(y, dtype=np.float64)
    fp = rows.fingerprint(y)
    sel1, _, _ = select_with_fdr(stage_one_design(rows, y, p1_dist), q, lambda_rule, folds, seed)
    sel1.extra["fingerprint"] = fp
    if not sel1.selected:
        empty = Selection(np.zeros(0), math.inf, float(q), (), None, {"fingerprint": fp, "skipped": True})
        return HierResult(sel1, empty, np.zeros(0, dtype=np.int64), fp)
    design, members = stage_two_design(rows, y, tree, sel1.selected, p1_dist)
    # both stages must see the very same observations
    assert rows.fingerprint(y) == fp
    fit, _ = lasso.fit_with_rule(design, lambda_rule, folds, seed, intercept=True)
    n1 = tree.n_top
    beta_m = fit.beta[n1: n1 + len(members)]
    beta_k = fit.knockoff_coef
    w = np.maximum(beta_m, 0.0) - np.maximum(beta_k, 0.0)
    local = select(w, q, fit.lam)
    sel2 = Selection(w, local.tau, float(q), tuple(int(members[i]) for i in local.selected), fit.lam,
                     {"fingerprint": fp, "member_ids": members.tolist()})
    return HierResult(sel1, sel2, members, fp)


# ---------------------------------------------------------------------------
# Synthetic scenario


class HierPoisonGame(UtilityOracle):
    """Poison game over second-level sources.

    U(S) = min(c, cap) / cap with c the number of poisons in S.  Without a
    cap the game is additive (cap = number of poisons); a small cap makes
    poisons redundant, so one more poison matters little once a few are in.
    """

    is_monotone = True

    def __init__(self, tree: SourceTree, poisons: Sequence[int], cap: Optional[int] = None, **kw):
        super().__init__(tree.n_second, **kw)
        self.tree = tree
        self.poisons = np.array(sorted(poisons), dtype=np.int64)
        if cap is not None and int(cap) < 1:
            raise ConfigError("cap must be a positive integer")
        self.cap = max(int(cap if cap is not None else self.poisons.size), 1)

    def _utility(self, masks, query):
        if self.poisons.size == 0:
            return np.zeros(masks.shape[0])
        count = masks[:, self.poisons].sum(axis=1)
        return np.minimum(count, self.cap) / self.cap

    def fingerprint(self):
        return (f"hier-poison(n1={self.tree.n_top},n2={self.tree.n_second},"
                f"P={self.poisons.tolist()},cap={self.cap})")

    @property
    def poisoned_tops(self) -> tuple:
        return tuple(sorted(set(self.tree.parent[self.poisons].tolist())))


def hier_poison_scenario(n_top=300, per_top=10, poisoned_counts=(5, 10), seed=0, noise_sd=0.0, cap=None):
    """Balanced tree whose randomly chosen groups hold the given numbers of poisons."""
    if max(poisoned_counts, default=0) > per_top:
        raise ConfigError("a group cannot hold more poisons than members")
    tree = SourceTree.balanced(n_top, per_top)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    groups = rng.choice(n_top, size=len(poisoned_counts), replace=False)
    poisons = []
    for g, count in zip(groups, poisoned_counts):
        members = np.array(tree.children[g])
        poisons.extend(rng.choice(members, size=count, replace=False).tolist())
    return tree, HierPoisonGame(tree, poisons, cap=cap, noise_sd=noise_sd, seed=seed)


# ---------------------------------------------------------------------------
# Storage: header line, then one record per two-level observation


def save_hier(path, tree: SourceTree, rows: HierRows, y, **extra):
    header = {"kind": "hier", "n_top": tree.n_top, "n_second": tree.n_second, **tree.to_json(), **extra}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i in range(len(rows)):
            o = rows.row(i, float(y[i]))
            rec = {"top_mask_hex": o.top_mask.hex(), "second_mask_hex": o.second_mask.hex(),
                   "p1": o.p1, "p2": o.p2, "y": o.y,
                   "top_knockoff_mask_hex": o.top_knockoff_mask.hex(),
                   "second_knockoff_mask_hex": o.second_knockoff_mask.hex()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_hier(path):
    """Read a two-level store; every record is checked against the tree.

    Returns ``(header, tree, rows, y)``.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise StoreCorrupt("empty store")
    try:
        header = json.loads(lines[0])
        tree = SourceTree.from_json(header)
    except (json.JSONDecodeError, ConfigError) as exc:
        raise StoreCorrupt(f"bad header: {exc}") from None
    if header.get("kind") != "hier":
        raise StoreCorrupt("not a two-level store")
    obs, ys = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            o = HierObservation(
                SubsetMask.from_hex(tree.n_top, r["top_mask_hex"]),
                SubsetMask.from_hex(tree.n_second, r["second_mask_hex"]),
                float(r["p1"]), float(r["p2"]), float(r["y"]),
                SubsetMask.from_hex(tree.n_top, r["top_knockoff_mask_hex"]),
                SubsetMask.from_hex(tree.n_second, r["second_knockoff_mask_hex"]),
            ).validate(tree)
        except (KeyError, TypeError, ValueError, json.JSONDecodeError, MalformedRecord) as exc:
            raise StoreCorrupt(f"line {lineno}: {exc}") from None
        obs.append(o)
        ys.append(o.y)
    n1, n2 = tree.n_top, tree.n_second

    def stack(get, width):
        return np.array([get(o).to_bool() for o in obs]).reshape(-1, width)

    rows = HierRows(
        np.array([o.p1 for o in obs]), np.array([o.p2 for o in obs]),
        stack(lambda o: o.top_mask, n1), stack(lambda o: o.second_mask, n2),
        stack(lambda o: o.top_knockoff_mask, n1), stack(lambda o: o.second_knockoff_mask, n2),
    )
    return header, tree, rows, np.array(ys)
