"""Randomized property checks."""

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_ame import knockoffs as ko
from sparse_ame import lasso
from sparse_ame.core import Observation, SubsetMask
from sparse_ame.sampling import DesignMatrix
from sparse_ame.store import parse_observation, serialize_observation

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestMaskProperties:
    @given(st.integers(1, 300), st.data())
    def test_hex_round_trip(self, n, data):
        idx = data.draw(st.sets(st.integers(0, n - 1)))
        m = SubsetMask.from_indices(n, idx)
        assert SubsetMask.from_hex(n, m.hex()) == m
        assert set(m.indices().tolist()) == idx

    @given(st.integers(1, 64), st.data())
    def test_observation_round_trip(self, n, data):
        idx = data.draw(st.sets(st.integers(0, n - 1)))
        p = data.draw(st.floats(0.01, 0.99))
        y = data.draw(st.floats(0, 1))
        o = Observation(SubsetMask.from_indices(n, idx), p, y)
        assert parse_observation(serialize_observation(o), n) == o


class TestThresholdProperties:
    @given(arrays(np.float64, st.integers(0, 40), elements=finite), st.floats(0, 1))
    def test_selected_are_above_tau(self, w, q):
        s = ko.select(w, q)
        if math.isfinite(s.tau):
            assert s.tau > 0
            assert all(w[i] >= s.tau for i in s.selected)
            n_neg = int(np.sum(w <= -s.tau))
            assert n_neg <= q * len(s.selected) + 1e-12
        else:
            assert s.selected == ()

    @given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(0, 1), st.floats(0.1, 10))
    def test_scale_invariant(self, w, q, c):
        assert ko.select(w, q).selected == ko.select(c * w, q).selected


class TestLassoProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(5, 60), st.integers(1, 25), st.floats(0.01, 1.0))
    def test_kkt_holds(self, seed, m, n, frac):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((m, n))
        beta = rng.standard_normal(n) * (rng.random(n) < 0.3)
        y = X @ beta + rng.standard_normal(m)
        d = DesignMatrix(np.asfortranarray(X), y, n)
        lam = frac * lasso.lambda_max(d, intercept=True)
        f = lasso.fit(d, lam, tol=1e-12, intercept=True)
        assert max(lasso.kkt_residuals(d, f)) <= 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_column_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((50, 8))
        y = X[:, 0] - X[:, 3] + 0.3 * rng.standard_normal(50)
        perm = rng.permutation(8)
        a = lasso.fit(DesignMatrix(np.asfortranarray(X), y, 8), 0.05, tol=1e-13)
        b = lasso.fit(DesignMatrix(np.asfortranarray(X[:, perm]), y, 8), 0.05, tol=1e-13)
        np.testing.assert_allclose(b.beta, a.beta[perm], atol=1e-8)
