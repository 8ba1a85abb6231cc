import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insite.library import FeatureLibrary, multilinear_library
from insite.ode import (DivergenceError, MissingRegimeError, RegimeConditionedOde, inner_step_count, integrate,
                        load_model, ode_rhs, rollout_counterfactual, save_model)
from insite.trajectory import ChannelSpec, Trajectory, make_time_grid

A = (ChannelSpec("a", "binary"),)


def two_state_model(coef0, coef1=None):
    lib = multilinear_library(("x0", "x1"), 2)
    coefs = {(0,): np.array(coef0, float).reshape(1, 4)}
    if coef1 is not None:
        coefs[(1,)] = np.array(coef1, float).reshape(1, 4)
    return RegimeConditionedOde(lib, ("x0",), A, coefs)


def eq5_truth(c0=0.5, c1=0.7):
    """dx/dt = -c{a} x as a regime model over the library (x0, c{a})."""
    lib = multilinear_library(("x0", "c{a}"), 2)
    coefs = {(0,): np.array([[0, 0, 0, -1.0]]), (1,): np.array([[0, 0, 0, -1.0]])}
    return RegimeConditionedOde(lib, ("x0",), A, coefs), {"c0": c0, "c1": c1}


def decay_model(rate=1.0):
    lib = FeatureLibrary.from_labels(("x0",), ["1", "x0"])
    return RegimeConditionedOde(lib, ("x0",), A, {(0,): np.array([[0.0, -rate]]), (1,): np.array([[0.0, -rate]])})


class TestRhs:
    def test_single_active_term(self):
        lib = multilinear_library(("x0", "x1"), 2)
        model = RegimeConditionedOde(lib, ("x0", "x1"), A, {(0,): np.array([[0, -0.5, 0, 0], [0, 0, 0, 0]])})
        assert ode_rhs(model, (0,), [10.0, 3.0])[0] == pytest.approx(-5.0)

    def test_zero_model(self):
        model = two_state_model([0, 0, 0, 0])
        assert ode_rhs(model, (0,), [10.0, 3.0])[0] == 0.0

    def test_eq5_truth_value(self):
        model, statics = eq5_truth(0.5)
        exog = model.exog_of(statics, [(0,)])
        assert ode_rhs(model, (0,), model.inputs(np.array([10.0]), exog[0]))[0] == pytest.approx(-5.0)

    def test_missing_regime(self):
        with pytest.raises(MissingRegimeError):
            ode_rhs(two_state_model([0, 1, 0, 0]), (1,), [1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
           st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_coefficients(self, b1, b2, alpha, x0, x1):
        m1, m2 = two_state_model(b1), two_state_model(b2)
        mix = two_state_model(alpha * np.array(b1) + np.array(b2))
        u = [x0, x1]
        assert ode_rhs(mix, (0,), u)[0] == pytest.approx(
            alpha * ode_rhs(m1, (0,), u)[0] + ode_rhs(m2, (0,), u)[0], rel=1e-9, abs=1e-9)


class TestIntegrate:
    def test_euler_product(self):
        grid = make_time_grid(0.0, 0.996, 2)
        out = integrate(decay_model(), [(0,)], [1.0], grid)
        assert inner_step_count(0.996, 0.166) == 6
        assert out[-1, 0] == pytest.approx((1 - 0.166) ** 6, rel=1e-12)

    def test_unit_step_uses_equal_substeps(self):
        out = integrate(decay_model(0.5), [(0,)], [10.0], make_time_grid(0.0, 1.0, 2))
        assert out[-1, 0] == pytest.approx(10 * (1 - 0.5 / 6) ** 6, rel=1e-12)

    def test_zero_rhs_constant(self):
        model = two_state_model([0, 0, 0, 0])
        out = integrate(model, [(0,)] * 4, [3.0], make_time_grid(0, 1, 5), statics={"x1": 2.0})
        np.testing.assert_array_equal(out[:, 0], 3.0)

    def test_error_halves_with_step(self):
        grid = make_time_grid(0.0, 1.0, 3)
        exact = math.exp(-2.0)
        errs = [abs(integrate(decay_model(), [(0,)] * 2, [1.0], grid, inner_step=h)[-1, 0] - exact)
                for h in (0.1, 0.05, 0.025)]
        for coarse, fine in zip(errs, errs[1:]):
            assert coarse / fine == pytest.approx(2.0, rel=0.1)

    def test_divergence_reports_time(self):
        lib = FeatureLibrary.from_labels(("x0",), ["x0^2"])
        model = RegimeConditionedOde(lib, ("x0",), A, {(0,): np.array([[1.0]])})
        with pytest.raises(DivergenceError) as err:
            integrate(model, [(0,)] * 9, [10.0], make_time_grid(0, 1, 10))
        assert err.value.time is not None

    def test_regime_switch_equals_additive_form(self):
        # f0 + a*f1 with f0 = -0.3 x, f1 = -0.2 x + 1
        lib = multilinear_library(("x0", "a"), 2)
        additive = RegimeConditionedOde(lib, ("x0",), (ChannelSpec("a", "continuous"),),
                                        {(): np.array([[0, -0.3, 1.0, -0.2]])})
        split = RegimeConditionedOde(FeatureLibrary.from_labels(("x0",), ["1", "x0"]), ("x0",), A,
                                     {(0,): np.array([[0.0, -0.3]]), (1,): np.array([[1.0, -0.5]])})
        plan = np.array([0, 1, 1, 0, 1], float)
        grid = make_time_grid(0, 1, 6)
        out_a = integrate(additive, [()] * 5, [4.0], grid, inputs={"a": plan})
        out_s = integrate(split, [(int(v),) for v in plan], [4.0], grid)
        np.testing.assert_allclose(out_a, out_s, rtol=1e-13)


class TestRollout:
    def traj(self, n=4):
        return Trajectory(0, make_time_grid(0, 1, n), np.full((n, 1), 10.0), np.full(n, 10.0),
                          {"a": np.zeros(n)}, {"c0": 0.5, "c1": 0.7})

    def test_eq5_one_step(self):
        model, _ = eq5_truth(0.5)
        out = rollout_counterfactual(model, self.traj(), 0, {"a": np.zeros(1)})
        assert out[0] == pytest.approx(10 * (1 - 0.5 / 6) ** 6, rel=1e-12)

    def test_zero_model_constant(self):
        lib = multilinear_library(("x0", "c{a}"), 2)
        model = RegimeConditionedOde(lib, ("x0",), A, {(0,): np.zeros((1, 4)), (1,): np.zeros((1, 4))})
        np.testing.assert_array_equal(rollout_counterfactual(model, self.traj(), 1, {"a": np.ones(5)}), 10.0)

    def test_plan_causal(self):
        model, _ = eq5_truth()
        a = rollout_counterfactual(model, self.traj(), 0, {"a": np.array([0, 0, 1, 1.0])})
        b = rollout_counterfactual(model, self.traj(), 0, {"a": np.array([0, 0, 0, 0.0])})
        np.testing.assert_array_equal(a[:2], b[:2])
        assert a[2] != b[2]

    def test_factual_consistency(self):
        model, statics = eq5_truth(0.5)
        grid = make_time_grid(0, 1, 6)
        states = integrate(model, [(0,)] * 5, [10.0], grid, statics=statics)
        tr = Trajectory(0, grid, states, states[:, 0], {"a": np.zeros(6)}, statics)
        pred = rollout_counterfactual(model, tr, 0, {"a": np.zeros(5)})
        np.testing.assert_allclose(pred, states[1:, 0], rtol=1e-12)

    def test_missing_plan_channel(self):
        model, _ = eq5_truth()
        with pytest.raises(ValueError):
            rollout_counterfactual(model, self.traj(), 0, {"b": np.zeros(2)})


def test_save_load_round_trip(tmp_path):
    model, _ = eq5_truth()
    model = model.with_coefficients({(0,): np.array([[0.1, -0.2, 0, -1.0000000000000002]]),
                                     (1,): np.array([[0, 0, 1e-300, -1.0]])})
    save_model(model, tmp_path / "m")
    back, patients = load_model(tmp_path / "m")
    assert patients == []
    np.testing.assert_array_equal(back.coefficient_tensor(), model.coefficient_tensor())
    assert back.library == model.library and back.channels == model.channels
    assert "dx0/dt" in (tmp_path / "m.txt").read_text()
