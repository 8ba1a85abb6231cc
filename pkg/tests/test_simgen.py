import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from insite.simgen import (GroundTruth, OneCompartmentConfig, OneCompartmentModel, TumorConfig, TumorModel,
                           apply_observation_map, cancer_assignment_probability, confounding_probability,
                           generate_one_compartment, generate_tumor, sphere_diameter, sphere_volume,
                           truncated_normal)
from insite.trajectory import ChannelSpec, Dataset, DatasetMeta, Trajectory, make_time_grid

SIGMOID_ONE = 1 / (1 + math.exp(-1))


class TestPolicies:
    @pytest.mark.parametrize("y", [0.0, 0.3, 1.0, 17.0])
    def test_no_confounding_is_fair_coin(self, y):
        assert confounding_probability(y, 0) == 0.5

    def test_symmetry_point(self):
        assert confounding_probability(0.5, 7) == 0.5

    def test_sigmoid_one(self):
        assert confounding_probability(1.0, 2) == pytest.approx(SIGMOID_ONE, rel=1e-12)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            confounding_probability(0.5, -1)

    def test_cancer_examples(self):
        assert cancer_assignment_probability(6.5, 3.3, 13, 6.5) == 0.5
        assert cancer_assignment_probability(13, 2, 13, 6.5) == pytest.approx(SIGMOID_ONE, rel=1e-12)
        assert cancer_assignment_probability(0, 10, 13, 6.5) == pytest.approx(1 / (1 + math.exp(5)), rel=1e-9)
        with pytest.raises(ValueError):
            cancer_assignment_probability(1, 1, 0)

    def test_sphere_round_trip(self):
        assert sphere_diameter(sphere_volume(13.0)) == pytest.approx(13.0)
        assert sphere_volume(13.0) == pytest.approx(1150.35, abs=0.01)


class TestTruncatedNormal:
    def test_matches_scipy(self):
        z = np.linspace(-3, 3, 13)
        got = truncated_normal(np.full(13, 0.0398), 0.168, z)
        a = (0 - 0.0398) / 0.168
        ref = stats.truncnorm.ppf(stats.norm.cdf(z), a, np.inf, loc=0.0398, scale=0.168)
        np.testing.assert_allclose(got, ref, rtol=1e-9)
        assert np.all(got >= 0)

    def test_zero_sd_is_mean(self):
        assert truncated_normal(np.array([0.3]), 0.0, np.array([2.0]))[0] == 0.3


class TestOneCompartment:
    def test_exact_solution_close(self):
        # x(1) = 10 e^{-0.5} up to the first-order Euler error for step 1/6
        cfg = OneCompartmentConfig(layer="A", n_patients=1)
        model = OneCompartmentModel(cfg)
        params = {"C0": np.array([0.5]), "C1": np.array([0.5]), "V": np.array([1.0]), "offset": np.array([0.0])}
        x = model.advance(np.array([[10.0]]), params, {"a": np.array([0.0])}, 1.0)
        assert x[0, 0] == pytest.approx(10 * math.exp(-0.5), rel=3e-2)
        assert x[0, 0] == pytest.approx(10 * (1 - 0.5 / 6) ** 6, rel=1e-12)

    def test_fair_treatment_without_confounding(self):
        ds = generate_one_compartment(OneCompartmentConfig(layer="A", n_patients=4000, gamma=0, horizon=3))
        frac = np.mean([tr.treatments["a"][0] for tr in ds])
        assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / 4000)

    def test_outcome_scale(self):
        ds = generate_one_compartment(OneCompartmentConfig(layer="A", n_patients=1000))
        assert ds.max_outcome() <= 50.0
        assert ds.meta.y_max == 50.0

    def test_deterministic(self):
        cfg = OneCompartmentConfig(layer="D", n_patients=20, seed=7)
        assert generate_one_compartment(cfg).equals(generate_one_compartment(cfg))

    def test_splits_and_seeds_differ(self):
        cfg = OneCompartmentConfig(layer="D", n_patients=5)
        a = generate_one_compartment(cfg)
        assert not a.equals(generate_one_compartment(replace(cfg, split="test")))
        assert not a.equals(generate_one_compartment(replace(cfg, seed=1)))

    def test_layer_nesting(self):
        a = generate_one_compartment(OneCompartmentConfig(layer="A", n_patients=30, obs_noise_sd=0.0))
        b = generate_one_compartment(OneCompartmentConfig(layer="B", n_patients=30, obs_noise_sd=0.0))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.states, tb.states)
            np.testing.assert_array_equal(ta.treatments["a"], tb.treatments["a"])

    def test_untreated_matches_exponential(self):
        ds = generate_one_compartment(OneCompartmentConfig(layer="A", n_patients=200, horizon=10))
        for tr in ds:
            if tr.treatments["a"][0] == 0:
                exact = tr.states[0, 0] * np.exp(-tr.params["C0"] * tr.times)
                # global Euler error is O(step): bounded by a constant times h
                assert np.max(np.abs(tr.states[:, 0] - exact)) <= 0.5 * 0.166 * tr.states[0, 0]

    def test_layer_constants(self):
        c = generate_one_compartment(OneCompartmentConfig(layer="C", n_patients=5))
        for tr in c:
            assert tr.params["C0"] == pytest.approx(tr.params["c0"] + 0.05)
            assert tr.params["C1"] == pytest.approx(tr.params["c1"] + 0.15)
        d = generate_one_compartment(OneCompartmentConfig(layer="D", n_patients=2000, horizon=2))
        c0 = np.array([tr.params["C0"] for tr in d])
        assert c0.min() >= 0 and abs(np.std(c0) - 0.25) < 0.05

    def test_confounding_monotone(self):
        corr = []
        for g in (0, 2, 10):
            ds = generate_one_compartment(OneCompartmentConfig(layer="B", n_patients=3000, gamma=g, horizon=2))
            y0 = np.array([tr.outcome[0] for tr in ds])
            a = np.array([tr.treatments["a"][0] for tr in ds])
            corr.append(np.corrcoef(y0, a)[0, 1])
        assert corr[0] <= corr[1] <= corr[2]

    @pytest.mark.parametrize("kw", [dict(x0_range=(5, 5)), dict(horizon=1), dict(layer="E")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OneCompartmentConfig(**kw)


class TestTumor:
    def test_growth_sign_at_analytic_point(self):
        cfg = TumorConfig(layer="A", n_patients=1, growth_noise_sd=0.0)
        model = TumorModel(cfg)
        params = {"rho": np.array([0.01]), "K": np.array([30.0]), "alpha_r": np.array([0.04]),
                  "beta_r": np.array([0.004]), "beta_c": np.array([0.028])}
        x0 = 30 * math.exp(-1)
        x = model.advance(np.array([[x0, 0.0]]), params, {"chemo": np.array([0.0]), "radio": np.array([0.0])},
                          cfg.inner_step)
        assert x[0, 0] - x0 == pytest.approx(cfg.inner_step * 0.01 * x0, rel=1e-12)

    def test_chemo_impulse_and_decay(self):
        cfg = TumorConfig(layer="A", n_patients=1)
        model = TumorModel(cfg)
        params = {"rho": np.array([0.0]), "K": np.array([30.0]), "alpha_r": np.array([0.0]),
                  "beta_r": np.array([0.0]), "beta_c": np.array([0.0])}
        x = model.advance(np.array([[1.0, 0.0]]), params, {"chemo": np.array([1.0]), "radio": np.array([0.0])}, 1.0)
        assert x[0, 1] == pytest.approx(5.0 * (1 - 0.5 / 6) ** 6, rel=1e-12)
        y = model.advance(x, params, {"chemo": np.array([0.0]), "radio": np.array([0.0])}, 1.0)
        assert y[0, 1] / x[0, 1] == pytest.approx(math.exp(-0.5), rel=3e-2)

    def test_beta_ratio_and_bounds(self):
        ds = generate_tumor(TumorConfig(layer="D", n_patients=200, horizon=10))
        vmax = sphere_volume(13.0)
        for tr in ds:
            assert tr.params["beta_r"] == pytest.approx(tr.params["alpha_r"] / 10, rel=1e-15)
            assert np.all(tr.outcome >= 0) and np.all(tr.outcome <= vmax)

    def test_layer_groups(self):
        ab = generate_tumor(TumorConfig(layer="B", n_patients=100, horizon=3))
        assert {tr.statics["group"] for tr in ab} == {1.0}
        d = generate_tumor(TumorConfig(layer="D", n_patients=300, horizon=3))
        assert {tr.statics["group"] for tr in d} == {1.0, 2.0, 3.0}

    def test_standard_is_binary_regime(self):
        ds = generate_tumor(TumorConfig(layer="standard", n_patients=5, horizon=5))
        assert all(c.in_regime for c in ds.meta.channels)
        assert ds.meta.benchmark == "cancer"

    def test_deterministic(self):
        cfg = TumorConfig(layer="D", n_patients=10, horizon=12, seed=3)
        assert generate_tumor(cfg).equals(generate_tumor(cfg))

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            TumorConfig(rho=(0.0, -1.0))


class TestObservationMap:
    def dataset(self):
        y = np.array([0.0, 5.0, 10.0])
        tr = Trajectory(0, make_time_grid(0, 1, 3), y[:, None], y, {"a": np.zeros(3)})
        return Dataset((tr,), DatasetMeta(y_max=10.0, channels=(ChannelSpec("a"),)))

    def test_identity(self):
        ds = self.dataset()
        assert apply_observation_map(ds, "identity") is ds

    def test_square_endpoints(self):
        out = apply_observation_map(self.dataset(), "square")
        assert out[0].outcome[0] == 0.0 and out[0].outcome[-1] == 10.0
        assert out[0].outcome[1] == pytest.approx(2.5)

    def test_sin_midpoint(self):
        out = apply_observation_map(self.dataset(), "sin")
        assert out[0].outcome[1] == pytest.approx(10 * math.sin(0.5))
        assert out.meta.obs_map == "sin" and out.meta.obs_range == (0.0, 10.0)

    def test_constant_outcome_rejected(self):
        tr = Trajectory(0, make_time_grid(0, 1, 2), np.ones((2, 1)), np.ones(2), {"a": np.zeros(2)})
        with pytest.raises(ValueError):
            apply_observation_map(Dataset((tr,), DatasetMeta(channels=(ChannelSpec("a"),))), "exp")


def test_ground_truth_is_noise_free():
    cfg = OneCompartmentConfig(layer="D", n_patients=5, horizon=8)
    ds = generate_one_compartment(cfg)
    gt = GroundTruth(OneCompartmentModel(cfg), ds.meta)
    trajs = list(ds)
    factual = {"a": np.stack([tr.treatments["a"][:7] for tr in trajs])}
    out = gt.counterfactual(trajs, [0] * 5, factual)
    np.testing.assert_allclose(out, np.stack([tr.true_states[1:, 0] for tr in trajs]), rtol=1e-12)
