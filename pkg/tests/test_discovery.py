import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insite.discovery import (StlsqConfig, discover_population, discovery_report, one_sided_differences,
                              regime_segments, stlsq_fit)
from insite.library import multilinear_library
from insite.simgen import OneCompartmentConfig, generate_one_compartment
from insite.trajectory import Dataset

from conftest import make_trajectory


class TestDifferences:
    def test_linear_is_exact(self):
        t = np.array([0.0, 0.5, 1.5, 3.0])
        for order in (1, 2):
            np.testing.assert_allclose(one_sided_differences(t, 3 * t + 1, order)[:, 0], 3.0)

    def test_quadratic_endpoints_order_two(self):
        t = np.array([0.0, 1.0, 3.0, 4.0])
        d = one_sided_differences(t, t ** 2, 2)[:, 0]
        assert d[0] == pytest.approx(0.0, abs=1e-12)
        assert d[-1] == pytest.approx(8.0)
        assert d[1] == pytest.approx((9 - 0) / 3)

    def test_two_points(self):
        np.testing.assert_allclose(one_sided_differences(np.array([0.0, 2.0]), np.array([1.0, 5.0]), 2)[:, 0],
                                   [2.0, 2.0])

    @pytest.mark.parametrize("t", [[0.0], [0.0, 1.0, 1.0]])
    def test_rejects(self, t):
        with pytest.raises(ValueError):
            one_sided_differences(np.array(t), np.zeros(len(t)))


class TestStlsq:
    def test_matches_ols_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, p, d = rng.integers(6, 30), rng.integers(1, 6), rng.integers(1, 3)
            X = rng.normal(size=(n, p))
            Y = rng.normal(size=(n, d))
            ref = np.linalg.solve(X.T @ X, X.T @ Y).T
            got = stlsq_fit(X, Y, StlsqConfig(threshold=0.0, ridge_alpha=0.0))
            np.testing.assert_allclose(got, ref, rtol=1e-8, atol=1e-8)

    def test_ridge_matches_closed_form(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(20, 3)), rng.normal(size=20)
        ref = np.linalg.solve(X.T @ X + 0.5 * np.eye(3), X.T @ y)
        np.testing.assert_allclose(stlsq_fit(X, y, StlsqConfig(0.0, 0.5))[0], ref, rtol=1e-10)

    def test_thresholding_recovers_support(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(200, 5))
        y = X @ np.array([2.0, 0.0, -1.0, 0.0, 0.0]) + 1e-4 * rng.normal(size=200)
        coef = stlsq_fit(X, y, StlsqConfig(0.05, 0.0))[0]
        assert np.array_equal(coef != 0, [True, False, True, False, False])
        np.testing.assert_allclose(coef[[0, 2]], [2.0, -1.0], atol=1e-3)

    def test_empty_support_reported(self):
        X = np.ones((5, 2))
        coef, info = stlsq_fit(X, np.zeros(5), StlsqConfig(0.1, 0.0), return_info=True)
        assert not coef.any() and info.empty_rows == (0,)

    def test_surviving_entries_exceed_threshold(self):
        rng = np.random.default_rng(3)
        coef = stlsq_fit(rng.normal(size=(30, 6)), rng.normal(size=(30, 2)), StlsqConfig(0.2, 0.5))
        assert np.all((coef == 0) | (np.abs(coef) >= 0.2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(15, 4)), rng.normal(size=15)
        perm = rng.permutation(15)
        cfg = StlsqConfig(0.05, 0.5)
        np.testing.assert_allclose(stlsq_fit(X[perm], y[perm], cfg), stlsq_fit(X, y, cfg), atol=1e-10)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            stlsq_fit(np.array([[np.nan]]), np.array([1.0]))


class TestSegments:
    def test_split_on_regime_change(self, small_dataset):
        tr = small_dataset[0]
        segs = regime_segments(tr, small_dataset.meta.channels)
        a = tr.treatments["a"]
        assert segs[0].start == 0 and segs[-1].stop == tr.n_points - 1
        for s, nxt in zip(segs, segs[1:]):
            assert s.stop == nxt.start
        for s in segs:
            assert all(a[k] == s.regime[0] for k in range(s.start, s.stop))


class TestDiscovery:
    def test_regime_isolation(self, small_dataset):
        # adding treated-only patients leaves the untreated regime's fit unchanged
        lib = multilinear_library(["x0", "c{a}"])
        cfg = StlsqConfig(0.0)
        untreated = Dataset(tuple(tr for tr in small_dataset if tr.treatments["a"][0] == 0), small_dataset.meta)
        extra = tuple(make_trajectory(pid=10 + i, n=7, treat=np.ones(7), seed=50 + i) for i in range(3))
        both = Dataset(tuple(untreated) + extra, small_dataset.meta)
        m0 = discover_population(untreated, lib, cfg)
        m1 = discover_population(both, lib, cfg)
        np.testing.assert_array_equal(m0.coefficients[(0,)], m1.coefficients[(0,)])
        assert (1,) in m0.missing_regimes and (1,) in m1.coefficients

    def test_recovers_one_compartment_rate(self):
        ds = generate_one_compartment(OneCompartmentConfig(layer="A", n_patients=1000, seed=0))
        m = discover_population(ds, multilinear_library(["x0", "c{a}"]), StlsqConfig(threshold=0.1),
                                derivative_order=2)
        col = m.library.labels.index("x0*c{a}")
        for key in m.regimes:
            coef = m.coefficients[key][0]
            assert abs(coef[col] + 1.0) < 0.05
            assert np.count_nonzero(coef) == 1

    def test_missing_regime_listed(self, small_dataset):
        untreated = Dataset(tuple(tr for tr in small_dataset if tr.treatments["a"][0] == 0), small_dataset.meta)
        m = discover_population(untreated, multilinear_library(["x0", "c{a}"]), StlsqConfig(0.0))
        assert "regime=(1) missing" in discovery_report(m)

    def test_report_lists_terms(self, small_dataset):
        m = discover_population(small_dataset, multilinear_library(["x0", "c{a}"]), StlsqConfig(0.0))
        text = discovery_report(m)
        assert "regime=(0)" in text and "samples=" in text
