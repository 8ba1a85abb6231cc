"""Population ODE discovery: finite differences plus sequentially thresholded
least squares, fit separately for every discrete treatment regime."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .library import FeatureLibrary
from .ode import RegimeConditionedOde
from .trajectory import ChannelSpec, Dataset, Trajectory


@dataclass(frozen=True)
class StlsqConfig:
    threshold: float = 0.001
    ridge_alpha: float = 0.5
    max_sweeps: int = 20

    def __post_init__(self):
        if self.threshold < 0 or self.ridge_alpha < 0:
            raise ValueError("threshold and ridge_alpha must be non-negative")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")


def one_sided_differences(times: np.ndarray, values: np.ndarray, order: int = 1) -> np.ndarray:
    """Finite-difference derivative of ``values`` (n, d) on increasing ``times``.

    Interior points use the two-point central difference over the actual
    spacing.  Endpoints use a forward (first point) and backward (last point)
    difference: two-point for ``order=1``, three-point second-order
    non-uniform stencils for ``order=2`` when at least three points exist.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = t.size
    if n < 2:
        raise ValueError("need at least two timestamps")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing (duplicates found)")
    out = np.empty_like(x)
    out[1:-1] = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    if order == 1 or n < 3:
        out[0] = (x[1] - x[0]) / dt[0]
        out[-1] = (x[-1] - x[-2]) / dt[-1]
    elif order == 2:
        h1, h2 = dt[0], dt[1]
        out[0] = (-(2 * h1 + h2) / (h1 * (h1 + h2)) * x[0] + (h1 + h2) / (h1 * h2) * x[1]
                  - h1 / (h2 * (h1 + h2)) * x[2])
        h1, h2 = dt[-1], dt[-2]
        out[-1] = ((2 * h1 + h2) / (h1 * (h1 + h2)) * x[-1] - (h1 + h2) / (h1 * h2) * x[-2]
                   + h1 / (h2 * (h1 + h2)) * x[-3])
    else:
        raise ValueError(f"unsupported derivative order {order}")
    return out


def estimate_derivatives(traj: Trajectory, order: int = 1) -> np.ndarray:
    """Per-timestamp state derivatives of a whole trajectory."""
    return one_sided_differences(traj.times, traj.states, order)


def _ridge(X: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    if alpha > 0:
        p = X.shape[1]
        X = np.vstack([X, np.sqrt(alpha) * np.eye(p)])
        y = np.concatenate([y, np.zeros(p)])
    return np.linalg.lstsq(X, y, rcond=None)[0]


@dataclass(frozen=True)
class StlsqInfo:
    sweeps: tuple[int, ...]
    empty_rows: tuple[int, ...]


def stlsq_fit(features, targets, cfg: StlsqConfig = StlsqConfig(), return_info: bool = False):
    """Sparse coefficients ``(d, p)`` with ``targets ~ features @ coef.T``.

    Each target column is fit independently: a ridge solve over the current
    support, hard-thresholding of entries below ``cfg.threshold``, and a
    re-solve on the survivors until the support stops shrinking.  A column
    whose support empties returns zeros and is listed in ``empty_rows``.
    """
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] < 1:
        raise ValueError(f"features {X.shape} and targets {Y.shape} do not align")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("features and targets must be finite")
    d, p = Y.shape[1], X.shape[1]
    coef = np.zeros((d, p))
    sweeps, empty = [], []
    for i in range(d):
        support = np.ones(p, dtype=bool)
        beta = np.zeros(p)
        k = 0
        for k in range(1, cfg.max_sweeps + 1):
            beta = np.zeros(p)
            if support.any():
                beta[support] = _ridge(X[:, support], Y[:, i], cfg.ridge_alpha)
            keep = support & (np.abs(beta) >= cfg.threshold)
            if np.array_equal(keep, support):
                break
            support = keep
        beta[np.abs(beta) < cfg.threshold] = 0.0
        if not np.any(beta):
            empty.append(i)
        coef[i] = beta
        sweeps.append(k)
    if return_info:
        return coef, StlsqInfo(tuple(sweeps), tuple(empty))
    return coef


@dataclass(frozen=True)
class Segment:
    patient_id: int
    regime: tuple
    start: int
    stop: int  # inclusive end point


def regime_segments(traj: Trajectory, channels: tuple[ChannelSpec, ...]) -> list[Segment]:
    """Maximal runs of intervals with constant regime and no interior impulse.

    Interval k spans points k..k+1 and is governed by the treatments recorded
    at point k.  Consecutive segments share their boundary point.
    """
    n = traj.n_points
    if n < 2:
        return []
    names = [c.name for c in channels if c.discrete and c.in_regime]
    keys = [tuple(int(traj.treatments[c][k]) for c in names) for k in range(n - 1)]
    impulse = np.zeros(n - 1, dtype=bool)
    for c in channels:
        if c.impulse_state is not None:
            impulse |= traj.treatments[c.name][:n - 1] != 0
    segs, start = [], 0
    for k in range(1, n - 1):
        if keys[k] != keys[k - 1] or impulse[k]:
            segs.append(Segment(traj.patient_id, keys[start], start, k))
            start = k
    segs.append(Segment(traj.patient_id, keys[start], start, n - 1))
    return segs


def all_regimes(channels: tuple[ChannelSpec, ...]) -> list[tuple]:
    values = [c.values() for c in channels if c.discrete and c.in_regime]
    return [tuple(v) for v in itertools.product(*values)]


def regime_design(ds: Dataset, model: RegimeConditionedOde, order: int = 1):
    """Stacked (features, targets) rows per regime, in patient-id then time order."""
    rows: dict[tuple, tuple[list, list]] = {}
    for traj in sorted(ds.trajectories, key=lambda tr: tr.patient_id):
        imp = model.impulses_of(traj.treatments, traj.n_points)
        for seg in regime_segments(traj, model.channels):
            sl = slice(seg.start, seg.stop + 1)
            states = traj.states[sl].copy()
            states[0] += imp[seg.start]
            deriv = one_sided_differences(traj.times[sl], states, order)
            m = seg.stop - seg.start + 1
            exog = model.exog_of(traj.statics, [seg.regime] * m, {k: v[sl] for k, v in traj.treatments.items()})
            inputs = model.inputs(states, exog)
            ok = model.library.log_domain_ok(inputs) & np.all(np.isfinite(deriv), axis=1)
            if not ok.any():
                continue
            theta = model.library.evaluate(inputs[ok], log_floor=0.0)
            feats, targs = rows.setdefault(seg.regime, ([], []))
            feats.append(theta)
            targs.append(deriv[ok])
    return {k: (np.vstack(f), np.vstack(t)) for k, (f, t) in rows.items()}


def discover_population(ds: Dataset, lib: FeatureLibrary, cfg: StlsqConfig = StlsqConfig(),
                        derivative_order: int = 1, channels: tuple[ChannelSpec, ...] | None = None
                        ) -> RegimeConditionedOde:
    """Fit one sparse ODE per observed treatment regime on pooled segments.

    ``channels`` overrides the dataset's channel schema, e.g. to pool all
    regimes into a single ODE by marking every channel ``in_regime=False``.
    """
    meta = ds.meta
    chans = tuple(meta.channels if channels is None else channels)
    d = len(meta.state_names)
    shell = RegimeConditionedOde(lib, meta.state_names, chans, {}, meta.outcome_index, y_scale=meta.y_max)
    design = regime_design(ds, shell, derivative_order)
    coefs, report = {}, {}
    for key in sorted(design):
        X, Y = design[key]
        beta, info = stlsq_fit(X, Y, cfg, return_info=True)
        resid = Y - X @ beta.T
        coefs[key] = beta
        report[key] = {
            "samples": int(X.shape[0]),
            "mse": (resid ** 2).mean(axis=0).tolist(),
            "empty_rows": list(info.empty_rows),
            "sweeps": list(info.sweeps),
        }
    missing = tuple(k for k in all_regimes(chans) if k not in coefs)
    info = {
        "threshold": cfg.threshold, "ridge_alpha": cfg.ridge_alpha, "derivative_order": derivative_order,
        "regimes": {",".join(map(str, k)): v for k, v in report.items()},
    }
    if d == 0:
        raise ValueError("dataset has no state dimensions")
    return RegimeConditionedOde(lib, meta.state_names, chans, coefs, meta.outcome_index, missing,
                                y_scale=meta.y_max, info=info)


def discovery_report(model: RegimeConditionedOde) -> str:
    """Plain-text listing of surviving terms, coefficients, residual MSE and sample counts."""
    labels = model.library.labels
    regimes = model.info.get("regimes", {})
    lines = [f"# threshold={model.info.get('threshold')} ridge_alpha={model.info.get('ridge_alpha')}"]
    for key, coefs in model.coefficients.items():
        tag = ",".join(map(str, key))
        rep = regimes.get(tag, {})
        for i, name in enumerate(model.state_names):
            terms = "; ".join(f"{lab}={c:.9g}" for lab, c in zip(labels, coefs[i]) if c != 0) or "(none)"
            mse = rep.get("mse", [float("nan")] * model.dim)[i]
            lines.append(f"regime=({tag}) state={name} samples={rep.get('samples', 0)} mse={mse:.6g} terms: {terms}")
    for key in model.missing_regimes:
        lines.append(f"regime=({','.join(map(str, key))}) missing")
    return "\n".join(lines) + "\n"
