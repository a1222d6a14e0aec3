import itertools

import numpy as np
import pytest

from sparse_ame.core import SubsetMask
from sparse_ame.errors import ConfigError, StoreCorrupt
from sparse_ame.oracle import (
    DEFAULT_QUERY,
    AdditiveGame,
    NullGame,
    PoisonedLinearTask,
    PoisonedTaskOracle,
    Query,
    TableGame,
    ThresholdGame,
    all_subsets,
    cached_evaluate,
    evaluate_poisoned_task,
    evaluate_threshold_game,
    generate_poisoned_task,
    random_game,
    random_monotone_game,
    subset_codes,
)
from sparse_ame.store import ObservationStore, make_header

# golden values of the default task, recorded from one reference run
FULL_MASK_SCORE = 0.9185601120967763
NO_POISON_SCORE = 0.05234103871179507


def _monotone_exhaustive(game):
    table = game.evaluate_many(all_subsets(game.n_sources))
    n = game.n_sources
    for code in range(1 << n):
        for i in range(n):
            if not code >> i & 1 and table[code | 1 << i] < table[code] - 1e-15:
                return False
    return True


class TestThresholdGame:
    game = ThresholdGame(1000, 3)

    def test_two_of_three(self):
        assert evaluate_threshold_game(self.game, SubsetMask.from_indices(1000, [0, 1])) == 1.0

    def test_one_plus_outsiders(self):
        mask = SubsetMask.from_indices(1000, [0] + list(range(100, 600)))
        assert evaluate_threshold_game(self.game, mask) == 0.0

    def test_empty(self):
        assert evaluate_threshold_game(self.game, SubsetMask.empty(1000)) == 0.0

    def test_wrong_length(self):
        with pytest.raises(ConfigError):
            evaluate_threshold_game(self.game, SubsetMask.empty(10))

    @pytest.mark.parametrize("n", [4, 8, 12])
    def test_monotone(self, n):
        assert _monotone_exhaustive(ThresholdGame(n, 3))

    def test_true_sv(self):
        np.testing.assert_array_equal(ThresholdGame(6, 3).true_sv(), [1 / 3] * 3 + [0] * 3)
        # a threshold above k makes the game identically zero
        assert ThresholdGame(6, 2, threshold=3).true_sv().sum() == 0


class TestGames:
    def test_additive(self):
        g = AdditiveGame(5, [1, 3])
        assert g.evaluate(SubsetMask.from_indices(5, [1, 2])) == 0.5

    def test_table_codes(self):
        masks = all_subsets(4)
        np.testing.assert_array_equal(subset_codes(masks), np.arange(16))
        g = TableGame(np.arange(16) / 15)
        assert g.evaluate(SubsetMask.from_indices(4, [0, 3])) == pytest.approx(9 / 15)

    def test_table_power_of_two(self):
        with pytest.raises(ConfigError):
            TableGame(np.zeros(6))

    def test_random_game_bounded(self):
        y = random_game(6, 0).evaluate_many(all_subsets(6))
        assert y.min() >= 0 and y.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_random_monotone(self, seed):
        g = random_monotone_game(8, seed)
        assert _monotone_exhaustive(g)
        assert g.evaluate(np.zeros(8, bool)) == 0.0
        assert g.evaluate(np.ones(8, bool)) == 1.0

    def test_monotone_size_cap(self):
        with pytest.raises(ConfigError):
            random_monotone_game(21, 0)

    def test_null_game_ignores_content(self, rng):
        g = NullGame(40, seed=2)
        masks = rng.random((4000, 40)) < 0.5
        y = g.evaluate_many(masks)
        assert abs(np.corrcoef(masks[:, 0], y)[0, 1]) < 3 / np.sqrt(4000)
        np.testing.assert_array_equal(y, g.evaluate_many(masks))

    def test_query_label_checked(self):
        with pytest.raises(ConfigError):
            ThresholdGame(5, 2).evaluate(np.ones(5, bool), Query(label=3))


class TestNoise:
    def test_outputs_stay_in_unit_interval(self, rng):
        g = ThresholdGame(30, 3, noise_sd=0.5, seed=1)
        y = g.evaluate_many(rng.random((3000, 30)) < 0.5)
        assert y.min() >= 0 and y.max() <= 1

    def test_keyed_on_mask_and_query(self, rng):
        g = ThresholdGame(30, 3, noise_sd=0.1, seed=1)
        masks = rng.random((50, 30)) < 0.5
        a = g.evaluate_many(masks)
        np.testing.assert_array_equal(a, g.evaluate_many(masks))
        assert not np.array_equal(a, g.evaluate_many(masks, Query("other")))
        np.testing.assert_array_equal(a[::-1], g.evaluate_many(masks[::-1]))

    def test_mean_preserved_away_from_bounds(self, rng):
        """Symmetric truncation around 0.5 keeps the mean."""
        g = AdditiveGame(2, [0, 1], noise_sd=0.05, seed=3)
        masks = np.zeros((5000, 2), bool)
        masks[:, 0] = True
        masks[:, 1] = rng.random(5000) < 0  # exactly one member in: U = 0.5
        masks = np.hstack([masks, rng.random((5000, 0)) < 0.5])
        y = AdditiveGame(2, [0, 1], noise_sd=0.05, seed=3).evaluate_many(masks)
        assert abs(y.mean() - 0.5) < 3 * 0.05 / np.sqrt(1)  # one distinct mask: all equal
        assert len(set(y.tolist())) == 1


class TestPoisonedTask:
    task = generate_poisoned_task()

    def test_ground_truth(self):
        assert self.task.k == 5 and len(set(self.task.poison_indices.tolist())) == 5

    def test_golden_scores(self):
        full = np.ones(100, dtype=bool)
        clean = full.copy()
        clean[self.task.poison_indices] = False
        assert evaluate_poisoned_task(self.task, SubsetMask.from_bool(full)) == pytest.approx(FULL_MASK_SCORE, abs=1e-12)
        assert evaluate_poisoned_task(self.task, SubsetMask.from_bool(clean)) == pytest.approx(NO_POISON_SCORE, abs=1e-12)
        assert FULL_MASK_SCORE >= 0.9 and NO_POISON_SCORE <= 0.1

    def test_degenerate_subsets(self):
        assert evaluate_poisoned_task(self.task, SubsetMask.empty(100)) == 0.5
        one_class = np.flatnonzero(self.task.labels == 0)[:5]
        assert evaluate_poisoned_task(self.task, SubsetMask.from_indices(100, one_class)) == 0.5

    def test_deterministic(self, rng):
        masks = rng.random((20, 100)) < 0.5
        o = PoisonedTaskOracle(self.task)
        np.testing.assert_array_equal(o.evaluate_many(masks), o.evaluate_many(masks))

    def test_bounded(self, rng):
        y = PoisonedTaskOracle(self.task).evaluate_many(rng.random((200, 100)) < rng.random((200, 1)))
        assert y.min() >= 0 and y.max() <= 1

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "task.json")
        self.task.save(path)
        back = PoisonedLinearTask.load(path)
        assert PoisonedTaskOracle(back).fingerprint() == PoisonedTaskOracle(self.task).fingerprint()
        np.testing.assert_array_equal(back.points, self.task.points)


class TestCachedEvaluate:
    def setup_method(self):
        self.game = ThresholdGame(12, 3)
        self.store = ObservationStore(make_header(12, "grid:0.5", "inverse_p", 0, oracle=self.game.fingerprint()))

    def masks(self, seed, m=30):
        return np.random.default_rng(seed).random((m, 12)) < 0.5

    def test_second_call_is_free(self):
        m = self.masks(0)
        first = cached_evaluate(self.store, self.game, m)
        before = self.game.n_evaluations
        second = cached_evaluate(self.store, self.game, m)
        assert self.game.n_evaluations == before
        assert [o.y for o in first] == [o.y for o in second]

    def test_disjoint_lists(self):
        a = self.masks(1)
        b = ~a  # complements never coincide with a's rows
        cached_evaluate(self.store, self.game, a)
        before = self.game.n_evaluations
        cached_evaluate(self.store, self.game, b)
        assert self.game.n_evaluations - before == len({r.tobytes() for r in b} - {r.tobytes() for r in a})

    def test_new_query_re_evaluates(self):
        m = self.masks(2)
        cached_evaluate(self.store, self.game, m)
        before = self.game.n_evaluations
        cached_evaluate(self.store, self.game, m, Query("q2"))
        assert self.game.n_evaluations - before == len({r.tobytes() for r in m})

    def test_order_preserved(self):
        m = self.masks(3)
        out = cached_evaluate(self.store, self.game, m)
        for row, o in zip(m, out):
            assert np.array_equal(o.mask.to_bool(), row)
            assert o.y == self.game.evaluate(row)

    def test_repeated_rows_recorded(self):
        m = np.repeat(self.masks(4, 5), 3, axis=0)
        before = self.game.n_evaluations
        cached_evaluate(self.store, self.game, m, rows=np.arange(15))
        assert self.game.n_evaluations - before == len({r.tobytes() for r in m})
        assert len(self.store) == 15

    def test_header_mismatch(self):
        other = ThresholdGame(12, 4)
        with pytest.raises(StoreCorrupt):
            cached_evaluate(self.store, other, self.masks(5))
        with pytest.raises(StoreCorrupt):
            cached_evaluate(self.store, ThresholdGame(13, 3), np.zeros((1, 13), bool))
