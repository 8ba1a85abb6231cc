"""Longitudinal treatment-outcome data model and its on-disk format.

A dataset file is a delimited text table with one row per (patient, timestamp)
and a key-value sidecar (``<file>.meta``) that carries the schema: state
names, treatment channels, static covariates, and benchmark metadata.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
CHANNEL_KINDS = ("binary", "categorical", "continuous")


class DatasetFormatError(ValueError):
    """Raised when a dataset file or sidecar does not match the record schema."""


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class ChannelSpec:
    """One treatment channel.

    Discrete channels (binary/categorical) with ``in_regime`` select the ODE
    regime.  A channel with ``impulse_state`` adds ``impulse_size`` times its
    value to that state dimension at the start of the step it is given in.
    """

    name: str
    kind: str = "binary"
    n_categories: int | None = None
    in_regime: bool = True
    impulse_state: int | None = None
    impulse_size: float = 0.0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "categorical" and (self.n_categories is None or self.n_categories < 1):
            raise ValueError(f"categorical channel {self.name!r} needs n_categories >= 1")
        if self.kind == "continuous" and self.in_regime:
            object.__setattr__(self, "in_regime", False)

    @property
    def discrete(self) -> bool:
        return self.kind != "continuous"

    def values(self) -> tuple[int, ...]:
        if self.kind == "binary":
            return (0, 1)
        if self.kind == "categorical":
            return tuple(range(1, self.n_categories + 1))
        raise ValueError(f"continuous channel {self.name!r} has no finite value set")

    def validate(self, values: np.ndarray) -> None:
        if self.kind == "continuous":
            if not np.all(np.isfinite(values)):
                raise ValueError(f"channel {self.name!r}: non-finite value")
            return
        allowed = np.asarray(self.values(), dtype=float)
        if not np.all(np.isin(values, allowed)):
            raise ValueError(f"channel {self.name!r}: values outside {self.values()}")

    def to_text(self) -> str:
        parts = [self.kind, f"regime={int(self.in_regime)}"]
        if self.n_categories is not None:
            parts.append(f"categories={self.n_categories}")
        if self.impulse_state is not None:
            parts.append(f"impulse={self.impulse_state}:{_fmt(self.impulse_size)}")
        return ";".join(parts)

    @classmethod
    def from_text(cls, name: str, text: str) -> "ChannelSpec":
        kind, *opts = [p.strip() for p in text.split(";")]
        kw: dict = {}
        for opt in opts:
            key, _, val = opt.partition("=")
            if key == "regime":
                kw["in_regime"] = bool(int(val))
            elif key == "categories":
                kw["n_categories"] = int(val)
            elif key == "impulse":
                idx, _, size = val.partition(":")
                kw["impulse_state"] = int(idx)
                kw["impulse_size"] = float(size)
            else:
                raise DatasetFormatError(f"channel {name!r}: unknown option {key!r}")
        return cls(name=name, kind=kind, **kw)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Observation timestamps.

    Regular grids keep ``t0`` and ``step`` so that timestamps are exactly
    ``t0 + k * step``; irregular grids only hold the explicit times.
    """

    times: np.ndarray
    t0: float | None = None
    step: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if times.size < 1:
            raise ValueError("time grid needs at least one point")
        if not np.all(np.isfinite(times)):
            raise ValueError("time grid has non-finite timestamps")
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def from_times(cls, times: Iterable[float]) -> "TimeGrid":
        return cls(np.asarray(list(times), dtype=float))

    @property
    def regular(self) -> bool:
        return self.step is not None

    @property
    def n_points(self) -> int:
        return int(self.times.size)

    def __len__(self) -> int:
        return self.n_points

    def spacing(self) -> np.ndarray:
        return np.diff(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return np.array_equal(self.times, other.times)


def make_time_grid(t0: float, step: float, n: int) -> TimeGrid:
    """Regular grid ``t0, t0 + step, ..., t0 + (n - 1) * step``."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    times = t0 + step * np.arange(int(n), dtype=float)
    return TimeGrid(times, t0=float(t0), step=float(step))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One patient's observed history.

    ``states`` and ``outcome`` are what a method may look at.  ``true_states``
    and ``params`` hold the generator's latent truth (noise-free states and
    sampled patient parameters) used only for ground-truth counterfactuals.
    """

    patient_id: int
    grid: TimeGrid
    states: np.ndarray
    outcome: np.ndarray
    treatments: Mapping[str, np.ndarray]
    statics: Mapping[str, float] = field(default_factory=dict)
    true_states: np.ndarray | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_points
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        outcome = np.array(self.outcome, dtype=float).reshape(-1)
        if states.shape[0] != n or outcome.shape[0] != n:
            raise ValueError(
                f"patient {self.patient_id}: states/outcome length "
                f"{states.shape[0]}/{outcome.shape[0]} != {n} timestamps"
            )
        treatments = {}
        for name, vals in self.treatments.items():
            arr = np.array(vals, dtype=float).reshape(-1)
            if arr.shape[0] != n:
                raise ValueError(f"patient {self.patient_id}: channel {name!r} length {arr.shape[0]} != {n}")
            arr.setflags(write=False)
            treatments[name] = arr
        true_states = None
        if self.true_states is not None:
            true_states = np.array(self.true_states, dtype=float).reshape(states.shape)
            true_states.setflags(write=False)
        for arr in (states, outcome):
            arr.setflags(write=False)
        object.__setattr__(self, "patient_id", int(self.patient_id))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "treatments", treatments)
        object.__setattr__(self, "statics", {k: float(v) for k, v in self.statics.items()})
        object.__setattr__(self, "true_states", true_states)
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def take(self, index: Sequence[int]) -> "Trajectory":
        """Keep the given timestamps; the result always carries an explicit grid."""
        index = np.asarray(index, dtype=int)
        return Trajectory(
            patient_id=self.patient_id,
            grid=TimeGrid(self.grid.times[index]),
            states=self.states[index],
            outcome=self.outcome[index],
            treatments={k: v[index] for k, v in self.treatments.items()},
            statics=self.statics,
            true_states=None if self.true_states is None else self.true_states[index],
            params=self.params,
        )

    def prefix(self, n: int) -> "Trajectory":
        """First ``n`` observations, keeping a regular grid regular."""
        if not 1 <= n <= self.n_points:
            raise ValueError(f"prefix length {n} outside 1..{self.n_points}")
        grid = self.grid
        grid = TimeGrid(grid.times[:n], t0=grid.t0, step=grid.step)
        return replace(
            self,
            grid=grid,
            states=self.states[:n],
            outcome=self.outcome[:n],
            treatments={k: v[:n] for k, v in self.treatments.items()},
            true_states=None if self.true_states is None else self.true_states[:n],
        )

    def equals(self, other: "Trajectory") -> bool:
        """Bit-exact equality of every numeric field."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b, equal_nan=True)

        return (
            self.patient_id == other.patient_id
            and self.grid == other.grid
            and same(self.states, other.states)
            and same(self.outcome, other.outcome)
            and self.treatments.keys() == other.treatments.keys()
            and all(same(v, other.treatments[k]) for k, v in self.treatments.items())
            and self.statics == other.statics
            and same(self.true_states, other.true_states)
            and self.params == other.params
        )


@dataclass(frozen=True)
class DatasetMeta:
    benchmark: str = "custom"
    bsv_layer: str = "A"
    gamma: float = 0.0
    y_max: float = 1.0
    seed: int = 0
    state_names: tuple[str, ...] = ("x0",)
    outcome_index: int = 0
    channels: tuple[ChannelSpec, ...] = ()
    static_names: tuple[str, ...] = ()
    obs_map: str = "identity"
    obs_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.y_max > 0:
            raise ValueError(f"y_max must be positive, got {self.y_max}")
        if not 0 <= self.outcome_index < len(self.state_names):
            raise ValueError("outcome_index outside the state dimensions")

    def channel(self, name: str) -> ChannelSpec:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise KeyError(name)


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        d = len(self.meta.state_names)
        names = [ch.name for ch in self.meta.channels]
        for tr in trajs:
            if tr.dim != d:
                raise ValueError(f"patient {tr.patient_id}: state dim {tr.dim} != {d}")
            if list(tr.treatments) != names:
                raise ValueError(f"patient {tr.patient_id}: channels {list(tr.treatments)} != {names}")
            for ch in self.meta.channels:
                ch.validate(tr.treatments[ch.name])
            missing = set(self.meta.static_names) - set(tr.statics)
            if missing:
                raise ValueError(f"patient {tr.patient_id}: missing statics {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    def with_trajectories(self, trajectories: Iterable[Trajectory]) -> "Dataset":
        return Dataset(tuple(trajectories), self.meta)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.meta == other.meta
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )

    def max_outcome(self) -> float:
        if not self.trajectories:
            return float("nan")
        return float(max(tr.outcome.max() for tr in self.trajectories))


def normalize_outcome(value, y_max: float):
    """Scale an outcome (or array of outcomes) by the dataset's maximum value."""
    if not y_max > 0:
        raise ValueError(f"y_max must be positive, got {y_max}")
    return value / y_max


def subsample_irregular(traj: Trajectory, drop_fraction: float, rng_seed) -> Trajectory:
    """Drop ``floor(drop_fraction * n)`` interior observations at random.

    The first and last observations are never removed, so at least two points
    survive and the remaining grid stays strictly increasing.
    """
    if not 0 <= drop_fraction < 1:
        raise ValueError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    n = traj.n_points
    interior = np.arange(1, n - 1)
    n_drop = min(int(math.floor(drop_fraction * n + 1e-9)), interior.size)
    if n_drop == 0:
        return traj
    rng = np.random.default_rng(rng_seed)
    dropped = rng.choice(interior, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(n), dropped)
    return traj.take(keep)


# ---------------------------------------------------------------------------
# serialization

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def _columns(meta: DatasetMeta, trajs: Sequence[Trajectory]) -> tuple[list[str], bool, list[str]]:
    d = len(meta.state_names)
    with_truth = bool(trajs) and all(tr.true_states is not None for tr in trajs)
    param_names = sorted(trajs[0].params) if trajs else []
    cols = ["patient_id", "t"] + [f"x_{i}" for i in range(d)] + ["y"]
    cols += [ch.name for ch in meta.channels] + list(meta.static_names)
    if with_truth:
        cols += [f"true_x_{i}" for i in range(d)]
    cols += [f"param.{p}" for p in param_names]
    return cols, with_truth, param_names


def _write_meta(meta: DatasetMeta, path: Path, columns: list[str]) -> None:
    lines = [
        f"schema_version = {SCHEMA_VERSION}",
        f"benchmark = {meta.benchmark}",
        f"bsv_layer = {meta.bsv_layer}",
        f"gamma = {_fmt(meta.gamma)}",
        f"y_max = {_fmt(meta.y_max)}",
        f"seed = {meta.seed}",
        f"state_names = {','.join(meta.state_names)}",
        f"outcome_index = {meta.outcome_index}",
        f"statics = {','.join(meta.static_names)}",
        f"obs_map = {meta.obs_map}",
    ]
    if meta.obs_range is not None:
        lines.append(f"obs_range = {_fmt(meta.obs_range[0])},{_fmt(meta.obs_range[1])}")
    for ch in meta.channels:
        lines.append(f"channel.{ch.name} = {ch.to_text()}")
    lines.append(f"columns = {','.join(columns)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_meta(path: Path) -> tuple[DatasetMeta, list[str]]:
    if not path.exists():
        raise DatasetFormatError(f"missing metadata sidecar {path}")
    kv: dict[str, str] = {}
    channels = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise DatasetFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, val = key.strip(), val.strip()
        if key.startswith("channel."):
            channels.append(ChannelSpec.from_text(key[len("channel."):], val))
        else:
            kv[key] = val
    try:
        version = int(kv.pop("schema_version"))
        if version != SCHEMA_VERSION:
            raise DatasetFormatError(f"unsupported schema_version {version}")
        split = lambda s: tuple(x for x in s.split(",") if x)
        obs_range = None
        if "obs_range" in kv:
            lo, hi = kv.pop("obs_range").split(",")
            obs_range = (float(lo), float(hi))
        meta = DatasetMeta(
            benchmark=kv.pop("benchmark"),
            bsv_layer=kv.pop("bsv_layer"),
            gamma=float(kv.pop("gamma")),
            y_max=float(kv.pop("y_max")),
            seed=int(kv.pop("seed")),
            state_names=split(kv.pop("state_names")),
            outcome_index=int(kv.pop("outcome_index")),
            channels=tuple(channels),
            static_names=split(kv.pop("statics", "")),
            obs_map=kv.pop("obs_map", "identity"),
            obs_range=obs_range,
        )
        columns = list(split(kv.pop("columns")))
    except KeyError as exc:
        raise DatasetFormatError(f"{path}: missing key {exc.args[0]!r}") from None
    if kv:
        raise DatasetFormatError(f"{path}: unknown keys {sorted(kv)}")
    return meta, columns


def write_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as a delimited table plus ``<path>.meta`` sidecar.

    Floats are written with 17 significant digits so that reading the file
    back reproduces every value bit for bit.
    """
    path = Path(path)
    trajs = ds.trajectories
    cols, with_truth, param_names = _columns(ds.meta, trajs)
    for tr in trajs:
        if not np.all(np.isfinite(tr.states)) or not np.all(np.isfinite(tr.outcome)):
            raise ValueError(f"patient {tr.patient_id}: non-finite state or outcome, refusing to write")
        if sorted(tr.params) != param_names:
            raise ValueError(f"patient {tr.patient_id}: parameter names differ across patients")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for tr in trajs:
            for k in range(tr.n_points):
                row = [str(tr.patient_id), _fmt(tr.times[k])]
                row += [_fmt(v) for v in tr.states[k]]
                row.append(_fmt(tr.outcome[k]))
                row += [_fmt(tr.treatments[ch.name][k]) for ch in ds.meta.channels]
                row += [_fmt(tr.statics[s]) for s in ds.meta.static_names]
                if with_truth:
                    row += [_fmt(v) for v in tr.true_states[k]]
                row += [_fmt(tr.params[p]) for p in param_names]
                writer.writerow(row)
    _write_meta(ds.meta, _meta_path(path), cols)


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_dataset`.

    Raises :class:`DatasetFormatError` naming the offending record index for
    malformed rows, schema mismatches and inconsistent per-patient values.
    """
    path = Path(path)
    meta, declared = _read_meta(_meta_path(path))
    d = len(meta.state_names)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file, header expected") from None
        if header != declared:
            raise DatasetFormatError(f"{path}: header does not match sidecar columns")
        pos = {c: i for i, c in enumerate(header)}
        for c in ["patient_id", "t", "y"] + [f"x_{i}" for i in range(d)]:
            if c not in pos:
                raise DatasetFormatError(f"{path}: missing column {c!r}")
        with_truth = "true_x_0" in pos
        param_cols = [c for c in header if c.startswith("param.")]
        groups: dict[int, list[tuple[int, list[str]]]] = {}
        order: list[int] = []
        last_pid = None
        for idx, row in enumerate(reader):
            if len(row) != len(header):
                raise DatasetFormatError(f"record {idx}: expected {len(header)} fields, got {len(row)}")
            try:
                pid = int(row[pos["patient_id"]])
            except ValueError:
                raise DatasetFormatError(f"record {idx}: bad patient_id {row[pos['patient_id']]!r}") from None
            if pid != last_pid:
                if pid in groups:
                    raise DatasetFormatError(f"record {idx}: patient {pid} rows are not contiguous")
                groups[pid] = []
                order.append(pid)
                last_pid = pid
            groups[pid].append((idx, row))

    def num(idx, row, col):
        try:
            return float(row[pos[col]])
        except ValueError:
            raise DatasetFormatError(f"record {idx}: column {col!r} is not a number: {row[pos[col]]!r}") from None

    trajs = []
    for pid in order:
        rows = groups[pid]
        first_idx = rows[0][0]
        times = [num(i, r, "t") for i, r in rows]
        for (i, _), a, b in zip(rows[1:], times, times[1:]):
            if not b > a:
                raise DatasetFormatError(f"record {i}: timestamps of patient {pid} not strictly increasing")
        states = [[num(i, r, f"x_{j}") for j in range(d)] for i, r in rows]
        outcome = [num(i, r, "y") for i, r in rows]
        treatments = {ch.name: [num(i, r, ch.name) for i, r in rows] for ch in meta.channels}
        statics = {}
        for s in meta.static_names:
            vals = {row[pos[s]] for _, row in rows}
            if len(vals) != 1:
                raise DatasetFormatError(f"record {first_idx}: static {s!r} varies within patient {pid}")
            statics[s] = num(first_idx, rows[0][1], s)
        params = {}
        for c in param_cols:
            if len({row[pos[c]] for _, row in rows}) != 1:
                raise DatasetFormatError(f"record {first_idx}: {c!r} varies within patient {pid}")
            params[c[len("param."):]] = num(first_idx, rows[0][1], c)
        true_states = None
        if with_truth:
            true_states = [[num(i, r, f"true_x_{j}") for j in range(d)] for i, r in rows]
        grid = _infer_grid(times)
        try:
            trajs.append(Trajectory(pid, grid, states, outcome, treatments, statics, true_states, params))
        except ValueError as exc:
            raise DatasetFormatError(f"record {first_idx}: {exc}") from None
    try:
        return Dataset(tuple(trajs), meta)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None


def _infer_grid(times: list[float]) -> TimeGrid:
    arr = np.asarray(times, dtype=float)
    if arr.size >= 2:
        step = arr[1] - arr[0]
        if np.array_equal(arr, arr[0] + step * np.arange(arr.size)):
            return TimeGrid(arr, t0=float(arr[0]), step=float(step))
    elif arr.size == 1:
        return TimeGrid(arr, t0=float(arr[0]), step=1.0)
    return TimeGrid(arr)
