"""Regime-conditioned linear-in-coefficients ODEs and forward Euler rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .library import FeatureLibrary
from .trajectory import ChannelSpec, TimeGrid, Trajectory

DEFAULT_INNER_STEP = 0.166
LOG_FLOOR = 1e-8


class MissingRegimeError(KeyError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


def inner_step_count(span: float, inner_step: float) -> int:
    """Number of equal Euler sub-steps used to cross one observation interval."""
    return max(1, int(round(span / inner_step)))


@dataclass(frozen=True, eq=False)
class RegimeConditionedOde:
    """``dx/dt = coefficients[regime] @ library(inputs)``.

    Library variables are bound by name: state names first, then continuous
    treatment channels, and anything else is a static covariate.  Static names
    may contain ``{channel}`` placeholders filled with the regime's values, so
    ``"c{a}"`` reads covariate ``c0`` under ``a=0`` and ``c1`` under ``a=1``.
    """

    library: FeatureLibrary
    state_names: tuple[str, ...]
    channels: tuple[ChannelSpec, ...]
    coefficients: Mapping[tuple, np.ndarray]
    outcome_index: int = 0
    missing_regimes: tuple[tuple, ...] = ()
    y_scale: float = 1.0
    info: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        d, p = len(self.state_names), self.library.n_terms
        coefs = {}
        for key in sorted(self.coefficients):
            arr = np.array(self.coefficients[key], dtype=float).reshape(d, p)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"regime {key}: non-finite coefficient")
            arr.setflags(write=False)
            coefs[tuple(int(v) for v in key)] = arr
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "state_names", tuple(self.state_names))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "missing_regimes", tuple(tuple(k) for k in self.missing_regimes))
        for k in coefs:
            if len(k) != len(self.regime_channels):
                raise ValueError(f"regime key {k} does not match channels {self.regime_channels}")
        self._bind()

    def _bind(self):
        state_pos, exog = [], []
        cont = {c.name for c in self.channels if c.kind == "continuous"}
        for vi, name in enumerate(self.library.variables):
            if name in self.state_names:
                state_pos.append((vi, self.state_names.index(name)))
            elif name in cont:
                exog.append((vi, "channel", name))
            else:
                exog.append((vi, "static", name))
        object.__setattr__(self, "_state_pos", state_pos)
        object.__setattr__(self, "_exog", exog)

    # -- structure -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.state_names)

    @property
    def regime_channels(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.discrete and c.in_regime)

    @property
    def regimes(self) -> list[tuple]:
        return list(self.coefficients)

    def regime_index(self, key) -> int:
        key = tuple(int(v) for v in key)
        try:
            return self.regimes.index(key)
        except ValueError:
            raise MissingRegimeError(f"regime {key} not present in model") from None

    def coefficient_tensor(self) -> np.ndarray:
        """Shape ``(n_regimes, dim, n_terms)`` in :attr:`regimes` order."""
        return np.stack([self.coefficients[k] for k in self.regimes]) if self.coefficients else np.zeros(
            (0, self.dim, self.library.n_terms)
        )

    def with_coefficients(self, coefficients: Mapping[tuple, np.ndarray] | np.ndarray) -> "RegimeConditionedOde":
        if isinstance(coefficients, np.ndarray):
            coefficients = dict(zip(self.regimes, coefficients))
        return replace(self, coefficients=coefficients)

    def state_variable_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(library variable positions, state positions) of state inputs."""
        if not self._state_pos:
            return np.zeros(0, int), np.zeros(0, int)
        vi, si = zip(*self._state_pos)
        return np.array(vi), np.array(si)

    def exog_variable_index(self) -> np.ndarray:
        return np.array([vi for vi, _, _ in self._exog], dtype=int)

    # -- per-step inputs -----------------------------------------------------

    def regime_of(self, treatments: Mapping[str, np.ndarray]) -> list[tuple]:
        names = self.regime_channels
        n = len(next(iter(treatments.values()))) if treatments else 0
        if not names:
            return [()] * n
        cols = [np.asarray(treatments[c], dtype=float) for c in names]
        return [tuple(int(col[k]) for col in cols) for k in range(n)]

    def impulses_of(self, treatments: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        out = np.zeros((n, self.dim))
        for ch in self.channels:
            if ch.impulse_state is not None:
                out[:, ch.impulse_state] += ch.impulse_size * np.asarray(treatments[ch.name][:n], dtype=float)
        return out

    def exog_of(self, statics: Mapping[str, float], regimes: Sequence[tuple],
                treatments: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Non-state library inputs per step, shape ``(len(regimes), n_exog)``."""
        n = len(regimes)
        out = np.zeros((n, len(self._exog)))
        names = self.regime_channels
        for col, (_, kind, name) in enumerate(self._exog):
            if kind == "channel":
                out[:, col] = np.asarray(treatments[name][:n], dtype=float)
                continue
            for k, key in enumerate(regimes):
                resolved = name.format(**dict(zip(names, key))) if "{" in name else name
                try:
                    out[k, col] = statics[resolved]
                except KeyError:
                    raise KeyError(f"library variable {name!r} needs static covariate {resolved!r}") from None
        return out

    def inputs(self, state, exog) -> np.ndarray:
        """Assemble library input vectors from state and exogenous parts."""
        state = np.asarray(state, dtype=float)
        exog = np.asarray(exog, dtype=float)
        out = np.zeros(state.shape[:-1] + (len(self.library.variables),))
        for vi, si in self._state_pos:
            out[..., vi] = state[..., si]
        for col, (vi, _, _) in enumerate(self._exog):
            out[..., vi] = exog[..., col]
        return out

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variables": list(self.library.variables),
            "terms": self.library.labels,
            "state_names": list(self.state_names),
            "channels": [
                {"name": c.name, "spec": c.to_text()} for c in self.channels
            ],
            "outcome_index": self.outcome_index,
            "y_scale": self.y_scale,
            "regimes": [
                {"key": list(k), "coefficients": v.tolist()} for k, v in self.coefficients.items()
            ],
            "missing_regimes": [list(k) for k in self.missing_regimes],
            "info": dict(self.info),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RegimeConditionedOde":
        lib = FeatureLibrary.from_labels(data["variables"], data["terms"])
        return cls(
            library=lib,
            state_names=tuple(data["state_names"]),
            channels=tuple(ChannelSpec.from_text(c["name"], c["spec"]) for c in data["channels"]),
            coefficients={tuple(r["key"]): np.array(r["coefficients"]) for r in data["regimes"]},
            outcome_index=data["outcome_index"],
            missing_regimes=tuple(tuple(k) for k in data["missing_regimes"]),
            y_scale=data["y_scale"],
            info=data.get("info", {}),
        )

    def equations(self, digits: int = 9) -> list[str]:
        """One readable line per regime and state dimension."""
        labels = self.library.labels
        lines = []
        for key, coefs in self.coefficients.items():
            tag = ", ".join(f"{c}={v}" for c, v in zip(self.regime_channels, key)) or "all"
            for i, name in enumerate(self.state_names):
                parts = [f"{c:+.{digits}g} {lab}" if lab != "1" else f"{c:+.{digits}g}"
                         for c, lab in zip(coefs[i], labels) if c != 0]
                lines.append(f"[{tag}] d{name}/dt = {' '.join(parts) if parts else '0'}")
        for key in self.missing_regimes:
            tag = ", ".join(f"{c}={v}" for c, v in zip(self.regime_channels, key))
            lines.append(f"[{tag}] missing: no usable segments")
        return lines


def save_model(model: RegimeConditionedOde, path, patients: Sequence = ()) -> None:
    """Write ``<path>.json`` (lossless) and ``<path>.txt`` (readable equations).

    ``patients`` are :class:`insite.finetune.PatientModel` records appended to
    both files under their patient id.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = model.to_dict()
    data["patients"] = [pm.to_dict() for pm in patients]
    path.with_suffix(".json").write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
    lines = ["# population"] + model.equations()
    for pm in patients:
        lines.append(f"# patient {pm.patient_id}")
        lines += model.with_coefficients(pm.coefficients).equations()
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> tuple[RegimeConditionedOde, list[dict]]:
    data = json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))
    return RegimeConditionedOde.from_dict(data), data.get("patients", [])


# ---------------------------------------------------------------------------
# right-hand side and integration

def ode_rhs(model: RegimeConditionedOde, regime, inputs) -> np.ndarray:
    """State derivative for one regime at library inputs ``inputs``."""
    key = tuple(int(v) for v in regime)
    if key not in model.coefficients:
        raise MissingRegimeError(f"regime {key} not present in model")
    return model.coefficients[key] @ model.library.evaluate(inputs)


def euler_batch(model: RegimeConditionedOde, step_coefs: np.ndarray, x0: np.ndarray, exog: np.ndarray,
                spans: np.ndarray, impulses: np.ndarray | None = None,
                inner_step: float = DEFAULT_INNER_STEP, log_floor: float = LOG_FLOOR):
    """Vectorized forward Euler over a batch of independent rollouts.

    step_coefs : (B, K, d, p) coefficients in force during each interval
    x0 : (B, d) start states; exog : (B, K, E) non-state inputs per interval
    spans : (B, K) interval lengths; impulses : (B, K, d) added at interval start

    Returns ``(states, diverged)`` with states of shape ``(B, K + 1, d)``
    recorded before each interval's impulse.  Diverged rows hold NaN from the
    first non-finite value on.
    """
    B, K = spans.shape
    x = np.array(x0, dtype=float).reshape(B, -1)
    out = np.empty((B, K + 1, x.shape[1]))
    out[:, 0] = x
    diverged = np.zeros(B, dtype=bool)
    lib = model.library
    counts = np.maximum(1, np.rint(spans / inner_step)).astype(int)
    h = spans / counts
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(K):
            if impulses is not None:
                x = x + impulses[:, k]
            coef = step_coefs[:, k]
            for j in range(counts[:, k].max()):
                theta = lib.evaluate(model.inputs(x, exog[:, k]), log_floor=log_floor)
                dx = np.einsum("bdp,bp->bd", coef, theta)
                active = (j < counts[:, k])[:, None]
                x = np.where(active, x + h[:, k, None] * dx, x)
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                diverged |= bad
                x = np.where(bad[:, None], np.nan, x)
            out[:, k + 1] = x
    return out, diverged


def integrate(model: RegimeConditionedOde, regimes: Sequence, x0, grid: TimeGrid,
              inner_step: float = DEFAULT_INNER_STEP, impulses=None, statics: Mapping[str, float] | None = None,
              inputs: Mapping[str, np.ndarray] | None = None, log_floor: float = LOG_FLOOR) -> np.ndarray:
    """States at every grid point under a per-interval regime plan.

    ``regimes[k]`` and ``impulses[k]`` apply to the interval from grid point k
    to k + 1; the impulse is added before that interval is integrated.
    """
    n = grid.n_points
    spans = grid.spacing()
    if not inner_step > 0:
        raise ValueError("inner_step must be positive")
    if n > 1 and inner_step > spans.min() * (1 + 1e-12):
        raise ValueError("inner_step exceeds the grid spacing")
    if len(regimes) != n - 1:
        raise ValueError(f"need {n - 1} regime entries, got {len(regimes)}")
    idx = [model.regime_index(r) for r in regimes]
    coefs = model.coefficient_tensor()[idx][None] if idx else np.zeros((1, 0, model.dim, model.library.n_terms))
    exog = model.exog_of(statics or {}, list(regimes), inputs)[None]
    imp = None if impulses is None else np.asarray(impulses, dtype=float).reshape(1, n - 1, model.dim)
    states, diverged = euler_batch(model, coefs, np.asarray(x0, float)[None], exog, spans[None], imp,
                                   inner_step, log_floor)
    if diverged[0]:
        k = int(np.flatnonzero(~np.all(np.isfinite(states[0]), axis=1))[0])
        raise DivergenceError(f"non-finite state at t={grid.times[k]:g}", grid.times[k])
    return states[0]


def plan_arrays(model: RegimeConditionedOde, statics: Mapping[str, float], plan: Mapping[str, np.ndarray]):
    """(regime indices, exog inputs, impulses) for a treatment plan."""
    tau = len(next(iter(plan.values())))
    regimes = model.regime_of(plan)
    idx = np.array([model.regime_index(r) for r in regimes], dtype=int)
    return idx, model.exog_of(statics, regimes, plan), model.impulses_of(plan, tau)


def future_spans(traj: Trajectory, t_index: int, tau: int) -> np.ndarray:
    """Interval lengths after ``t_index``: observed spacing where available, else the grid step."""
    spans = np.diff(traj.times[t_index:t_index + tau + 1])
    step = traj.grid.step if traj.grid.step is not None else (float(np.median(traj.grid.spacing())) if traj.n_points > 1 else 1.0)
    return np.concatenate([spans, np.full(tau - spans.size, step)])


def rollout_counterfactual(model: RegimeConditionedOde, traj: Trajectory, t_index: int,
                           plan: Mapping[str, np.ndarray], inner_step: float = DEFAULT_INNER_STEP,
                           coefficients: np.ndarray | None = None) -> np.ndarray:
    """Predicted outcomes at the ``tau`` grid points after ``t_index`` under ``plan``.

    The rollout starts from the observed state at ``t_index``; ``plan[c][k]``
    is the value of channel ``c`` during the k-th future interval.
    """
    if not 0 <= t_index < traj.n_points:
        raise IndexError(f"t_index {t_index} outside trajectory of {traj.n_points} points")
    missing = [c.name for c in model.channels if c.name not in plan]
    if missing:
        raise ValueError(f"plan lacks channels {missing}")
    tau = len(next(iter(plan.values())))
    idx, exog, imp = plan_arrays(model, traj.statics, plan)
    tensor = model.coefficient_tensor() if coefficients is None else np.asarray(coefficients)
    spans = future_spans(traj, t_index, tau)
    states, _ = euler_batch(model, tensor[idx][None], traj.states[t_index][None], exog[None], spans[None],
                            imp[None], inner_step)
    return states[0, 1:, model.outcome_index]
