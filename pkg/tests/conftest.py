import numpy as np
import pytest

from insite.trajectory import ChannelSpec, Dataset, DatasetMeta, Trajectory, make_time_grid


def make_trajectory(pid=0, n=5, d=1, treat=None, statics=None, seed=0):
    rng = np.random.default_rng(seed)
    states = rng.uniform(1, 5, size=(n, d))
    return Trajectory(
        patient_id=pid,
        grid=make_time_grid(0.0, 1.0, n),
        states=states,
        outcome=states[:, 0].copy(),
        treatments={"a": np.asarray(treat if treat is not None else np.zeros(n), dtype=float)},
        statics=statics if statics is not None else {"c0": 0.5, "c1": 0.6},
    )


@pytest.fixture
def small_dataset():
    trajs = tuple(make_trajectory(pid=i, treat=np.full(5, i % 2), seed=i) for i in range(4))
    meta = DatasetMeta(benchmark="eq5", y_max=50.0, channels=(ChannelSpec("a", "binary"),),
                       static_names=("c0", "c1"))
    return Dataset(trajs, meta)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
