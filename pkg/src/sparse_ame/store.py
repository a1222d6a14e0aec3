"""JSON-lines observation store.

The first line is a header carrying the source count and sampling setup;
each following line is one evaluated subset.  Floats go through ``repr``
so a parse/serialize cycle is bit exact.
"""

from __future__ import annotations

import json
import os
import threading
from typing import Iterable, Optional

from .core import Observation, SubsetMask
from .errors import MalformedRecord, StoreCorrupt

HEADER_KEYS = ("n_sources", "p_spec", "featurization", "seed")


def serialize_observation(obs: Observation) -> str:
    obs.validate()
    rec = {"mask_hex": obs.mask.hex()}
    if isinstance(obs.p, tuple):
        rec["p1"], rec["p2"] = float(obs.p[0]), float(obs.p[1])
    else:
        rec["p"] = float(obs.p)
    rec["y"] = float(obs.y)
    if obs.knockoff_mask is not None:
        rec["knockoff_mask_hex"] = obs.knockoff_mask.hex()
    if obs.query != "default":
        rec["query"] = obs.query
    if obs.row is not None:
        rec["row"] = int(obs.row)
    return json.dumps(rec, separators=(",", ":"))


def _mask(n, text, what):
    if not isinstance(text, str):
        raise MalformedRecord(f"{what} must be a hex string")
    try:
        return SubsetMask.from_hex(n, text)
    except ValueError as exc:
        raise MalformedRecord(f"bad {what}: {exc}") from None


def _prob(rec, key):
    val = rec.get(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise MalformedRecord(f"field {key!r} missing or not a number")
    return float(val)


def parse_observation(line: str, n_sources: int) -> Observation:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"not JSON: {exc}") from None
    if not isinstance(rec, dict) or "mask_hex" not in rec:
        raise MalformedRecord("record needs a mask_hex field")
    mask = _mask(n_sources, rec["mask_hex"], "mask_hex")
    if "p" in rec:
        p = _prob(rec, "p")
    elif "p1" in rec and "p2" in rec:
        p = (_prob(rec, "p1"), _prob(rec, "p2"))
    else:
        raise MalformedRecord("record needs p or (p1, p2)")
    y = _prob(rec, "y")
    ko = rec.get("knockoff_mask_hex")
    ko = _mask(n_sources, ko, "knockoff_mask_hex") if ko is not None else None
    query = rec.get("query", "default")
    if not isinstance(query, str):
        raise MalformedRecord("query must be a string")
    row = rec.get("row")
    if row is not None and (isinstance(row, bool) or not isinstance(row, int)):
        raise MalformedRecord("row must be an integer")
    return Observation(mask, p, y, ko, query, row).validate()


def make_header(n_sources, p_spec, featurization, seed, **extra) -> dict:
    header = {
        "n_sources": int(n_sources),
        "p_spec": str(p_spec),
        "featurization": str(getattr(featurization, "value", featurization)),
        "seed": int(seed),
    }
    header.update(extra)
    return header


class ObservationStore:
    """Append-only record of sampled rows and their utilities.

    Utilities are looked up by (mask, query), so a subset drawn twice is
    evaluated once.  Rows carrying a row id are kept once per (row, query);
    rows without one are kept once per (mask, query).

    With ``path=None`` the store lives in memory only.  Appends are
    serialized by a lock so concurrent evaluators can share one store.
    """

    def __init__(self, header: dict, path: Optional[str] = None, records: Iterable[Observation] = ()):
        missing = [k for k in HEADER_KEYS if k not in header]
        if missing:
            raise StoreCorrupt(f"header lacks {missing}")
        self.header = dict(header)
        self.path = path
        self.records = []
        self._index = {}
        self._rows = set()
        self._lock = threading.Lock()
        for obs in records:
            self._remember(obs)

    @property
    def n_sources(self) -> int:
        return int(self.header["n_sources"])

    @classmethod
    def create(cls, path: str, header: dict) -> "ObservationStore":
        store = cls(header, path)
        with open(path, "w") as fh:
            fh.write(json.dumps(store.header, sort_keys=True) + "\n")
        return store

    @classmethod
    def load(cls, path: str) -> "ObservationStore":
        with open(path) as fh:
            first = fh.readline()
            try:
                header = json.loads(first)
            except json.JSONDecodeError:
                raise StoreCorrupt(f"{path}: first line is not a JSON header") from None
            if not isinstance(header, dict):
                raise StoreCorrupt(f"{path}: header must be an object")
            store = cls(header, path)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    store._remember(parse_observation(line, store.n_sources))
                except MalformedRecord as exc:
                    raise StoreCorrupt(f"{path}:{lineno}: {exc}") from None
        return store

    @classmethod
    def open(cls, path: str, header: dict) -> "ObservationStore":
        """Open ``path`` for append, creating it if needed.

        An existing file must agree with ``header`` on every key the caller
        passes; otherwise the cached utilities belong to another experiment.
        """
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            return cls.create(path, header)
        store = cls.load(path)
        clash = {k: (store.header.get(k), v) for k, v in header.items() if store.header.get(k) != v}
        if clash:
            raise StoreCorrupt(f"{path}: header mismatch {clash}")
        return store

    def _remember(self, obs: Observation):
        if obs.mask.n != self.n_sources:
            raise StoreCorrupt(f"record has {obs.mask.n} sources, header says {self.n_sources}")
        self.records.append(obs)
        self._index.setdefault((obs.mask.bits, obs.query), obs)
        self._rows.add(self._row_key(obs))

    @staticmethod
    def _row_key(obs: Observation):
        if obs.row is None:
            return ("mask", obs.mask.bits, obs.query)
        return ("row", obs.row, obs.query)

    def has_row(self, obs: Observation) -> bool:
        return self._row_key(obs) in self._rows

    def lookup(self, mask: SubsetMask, query: str = "default") -> Optional[Observation]:
        return self._index.get((mask.bits, query))

    def append(self, obs: Observation):
        line = serialize_observation(obs)
        with self._lock:
            if self.has_row(obs):
                return
            self._remember(obs)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(line + "\n")

    def extend(self, observations: Iterable[Observation]):
        lines = []
        with self._lock:
            for obs in observations:
                if self.has_row(obs):
                    continue
                lines.append(serialize_observation(obs))
                self._remember(obs)
            if self.path is not None and lines:
                with open(self.path, "a") as fh:
                    fh.write("\n".join(lines) + "\n")

    def for_query(self, query: str = "default") -> list:
        """Rows recorded for ``query``, ordered by row id when rows carry one."""
        out = [o for o in self.records if o.query == query]
        if out and all(o.row is not None for o in out):
            out.sort(key=lambda o: o.row)
        return out

    def __len__(self):
        return len(self.records)

