import json

import pytest

from sparse_ame.core import Observation, SubsetMask
from sparse_ame.errors import MalformedRecord, StoreCorrupt
from sparse_ame.store import ObservationStore, make_header, parse_observation, serialize_observation


def _obs(idx, n=4, p=0.4, y=0.75, **kw):
    return Observation(SubsetMask.from_indices(n, idx), p, y, **kw)


class TestRecords:
    def test_round_trip(self):
        o = _obs([0, 2])
        line = serialize_observation(o)
        assert json.loads(line) == {"mask_hex": "05", "p": 0.4, "y": 0.75}
        assert parse_observation(line, 4) == o

    def test_empty_mask(self):
        o = _obs([], p=0.2, y=0.0)
        assert parse_observation(serialize_observation(o), 4) == o

    def test_pair_and_extras(self):
        o = Observation(SubsetMask.from_indices(9, [8]), (0.2, 0.3), 0.1, SubsetMask.from_indices(9, [1]),
                        "q7", 12)
        assert parse_observation(serialize_observation(o), 9) == o

    def test_awkward_floats_are_bit_exact(self):
        o = _obs([1], p=0.1 + 0.2, y=1 / 3)
        back = parse_observation(serialize_observation(o), 4)
        assert back.p == o.p and back.y == o.y

    @pytest.mark.parametrize("line", [
        '{"mask_hex":"05","p":0.4,"y":1.2}',
        '{"mask_hex":"05","y":0.3}',
        '{"mask_hex":"zz","p":0.4,"y":0.3}',
        '{"mask_hex":"f5","p":0.4,"y":0.3}',
        '{"mask_hex":"05","p":"0.4","y":0.3}',
        '{"mask_hex":"05","p":0.4,"y":0.3,"row":1.5}',
        "[1, 2]",
        "not json",
    ])
    def test_malformed(self, line):
        with pytest.raises(MalformedRecord):
            parse_observation(line, 4)


class TestStore:
    def header(self, n=4):
        return make_header(n, "grid:0.5", "inverse_p", 1)

    def test_append_and_reload(self, tmp_path):
        path = str(tmp_path / "s.jsonl")
        s = ObservationStore.create(path, self.header())
        s.extend([_obs([0], row=0), _obs([1], row=1)])
        s.append(_obs([2], row=2))
        back = ObservationStore.load(path)
        assert [o.row for o in back.for_query()] == [0, 1, 2]
        assert back.lookup(SubsetMask.from_indices(4, [1])).y == 0.75

    def test_same_row_kept_once(self):
        s = ObservationStore(self.header())
        s.extend([_obs([0], row=0), _obs([0], row=0)])
        assert len(s) == 1

    def test_repeated_mask_on_distinct_rows(self):
        s = ObservationStore(self.header())
        s.extend([_obs([0], row=0), _obs([0], row=1)])
        assert len(s) == 2

    def test_header_mismatch(self, tmp_path):
        path = str(tmp_path / "s.jsonl")
        ObservationStore.create(path, self.header())
        with pytest.raises(StoreCorrupt):
            ObservationStore.open(path, make_header(4, "grid:0.5", "inverse_p", 2))

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text(json.dumps(self.header()) + "\n" + '{"mask_hex":"05","p":2,"y":0}\n')
        with pytest.raises(StoreCorrupt, match=":2:"):
            ObservationStore.load(str(path))

    def test_wrong_width_record(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text(json.dumps(self.header(4)) + "\n" + '{"mask_hex":"0100","p":0.5,"y":0}\n')
        with pytest.raises(StoreCorrupt):
            ObservationStore.load(str(path))

    def test_missing_header_keys(self):
        with pytest.raises(StoreCorrupt):
            ObservationStore({"n_sources": 3})
