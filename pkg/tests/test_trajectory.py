import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insite.trajectory import (ChannelSpec, Dataset, DatasetFormatError, DatasetMeta, TimeGrid, Trajectory,
                               make_time_grid, normalize_outcome, read_dataset, subsample_irregular,
                               write_dataset)

from conftest import make_trajectory


class TestTimeGrid:
    def test_arithmetic_progression(self):
        assert make_time_grid(0, 1, 3).times.tolist() == [0, 1, 2]

    def test_integrator_step(self):
        assert make_time_grid(0, 0.166, 2).times.tolist() == [0, 0.166]

    def test_single_point(self):
        assert make_time_grid(5, 2, 1).times.tolist() == [5]

    @pytest.mark.parametrize("step,n", [(0, 3), (-1, 3), (1, 0), (1, -2)])
    def test_rejects_non_positive(self, step, n):
        with pytest.raises(ValueError):
            make_time_grid(0, step, n)

    def test_irregular_grid_must_increase(self):
        with pytest.raises(ValueError):
            TimeGrid.from_times([0, 1, 1])


class TestNormalizeOutcome:
    @pytest.mark.parametrize("value,y_max,expected", [(50, 50, 1.0), (0, 1150, 0.0), (575, 1150, 0.5)])
    def test_examples(self, value, y_max, expected):
        assert normalize_outcome(value, y_max) == pytest.approx(expected)

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            normalize_outcome(1.0, 0.0)

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(1e-3, 1e4))
    def test_linear(self, a, b, y_max):
        assert normalize_outcome(a + b, y_max) == pytest.approx(
            normalize_outcome(a, y_max) + normalize_outcome(b, y_max), rel=1e-9, abs=1e-6)


class TestSubsample:
    def test_zero_fraction_is_identity(self):
        tr = make_trajectory(n=10)
        assert subsample_irregular(tr, 0.0, 1).equals(tr)

    def test_ten_percent_of_ten(self):
        out = subsample_irregular(make_trajectory(n=10), 0.1, 3)
        assert out.n_points == 9
        assert np.all(np.diff(out.times) > 0)

    def test_two_points_kept(self):
        out = subsample_irregular(make_trajectory(n=2), 0.5, 3)
        assert out.n_points == 2

    def test_rejects_full_drop(self):
        with pytest.raises(ValueError):
            subsample_irregular(make_trajectory(n=5), 1.0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.floats(0, 0.99), st.integers(0, 10_000))
    def test_order_and_alignment(self, n, frac, seed):
        tr = make_trajectory(n=n, treat=np.arange(n) % 2, seed=seed)
        out = subsample_irregular(tr, frac, seed)
        assert np.all(np.diff(out.times) > 0)
        assert out.times[0] == tr.times[0] and out.times[-1] == tr.times[-1]
        idx = np.searchsorted(tr.times, out.times)
        np.testing.assert_array_equal(out.states, tr.states[idx])
        np.testing.assert_array_equal(out.outcome, tr.outcome[idx])
        np.testing.assert_array_equal(out.treatments["a"], tr.treatments["a"][idx])
        assert out.n_points == n - min(math.floor(frac * n + 1e-9), n - 2)


class TestTrajectory:
    def test_arrays_read_only(self):
        tr = make_trajectory()
        with pytest.raises(ValueError):
            tr.states[0, 0] = 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Trajectory(0, make_time_grid(0, 1, 3), np.zeros((2, 1)), np.zeros(2), {"a": np.zeros(3)})

    def test_prefix(self):
        tr = make_trajectory(n=6)
        assert tr.prefix(3).n_points == 3
        np.testing.assert_array_equal(tr.prefix(3).states, tr.states[:3])


class TestSerialization:
    def test_empty_dataset(self, tmp_path):
        ds = Dataset((), DatasetMeta(channels=(ChannelSpec("a"),)))
        write_dataset(ds, tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().count("\n") == 1
        back = read_dataset(tmp_path / "e.csv")
        assert len(back) == 0

    def test_two_point_round_trip(self, tmp_path):
        tr = make_trajectory(n=2)
        ds = Dataset((tr,), DatasetMeta(channels=(ChannelSpec("a"),), static_names=("c0", "c1")))
        write_dataset(ds, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert read_dataset(tmp_path / "d.csv").equals(ds)

    def test_nan_state_rejected(self, tmp_path):
        tr = make_trajectory(n=3)
        states = tr.states.copy()
        states[1, 0] = np.nan
        bad = Trajectory(0, tr.grid, states, tr.outcome, tr.treatments, tr.statics)
        ds = Dataset((bad,), DatasetMeta(channels=(ChannelSpec("a"),), static_names=("c0", "c1")))
        with pytest.raises(ValueError):
            write_dataset(ds, tmp_path / "n.csv")

    def test_malformed_record_names_index(self, tmp_path, small_dataset):
        path = tmp_path / "m.csv"
        write_dataset(small_dataset, path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3].rsplit(",", 1)[0]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="record 2"):
            read_dataset(path)

    def test_irregular_round_trip(self, tmp_path, small_dataset):
        ds = small_dataset.with_trajectories(subsample_irregular(tr, 0.4, tr.patient_id) for tr in small_dataset)
        write_dataset(ds, tmp_path / "i.csv")
        assert read_dataset(tmp_path / "i.csv").equals(ds)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(2, 8), min_size=1, max_size=4), st.integers(0, 1000))
    def test_round_trip_identity(self, tmp_path_factory, lengths, seed):
        rng = np.random.default_rng(seed)
        trajs = []
        for pid, n in enumerate(lengths):
            states = rng.normal(size=(n, 2)) * 10 ** rng.uniform(-5, 5)
            trajs.append(Trajectory(pid, make_time_grid(0.0, 1.0, n), states, states[:, 0],
                                    {"a": rng.integers(0, 2, n).astype(float), "dose": rng.uniform(0, 3, n)},
                                    {"c0": float(rng.normal())}, true_states=states * 2, params={"k": 0.1}))
        meta = DatasetMeta(state_names=("x0", "x1"), channels=(ChannelSpec("a"), ChannelSpec("dose", "continuous")),
                           static_names=("c0",), y_max=3.0, seed=seed)
        ds = Dataset(tuple(trajs), meta)
        path = tmp_path_factory.mktemp("rt") / "d.csv"
        write_dataset(ds, path)
        assert read_dataset(path).equals(ds)


def test_channel_text_round_trip():
    ch = ChannelSpec("chemo", "binary", impulse_state=1, impulse_size=5.0, in_regime=False)
    assert ChannelSpec.from_text("chemo", ch.to_text()) == ch
