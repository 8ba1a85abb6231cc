"""Counterfactual evaluation: treatment plans, tau-step nRMSE and seeded runs."""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .config import ExperimentSpec
from .discovery import discover_population
from .finetune import PatientModel, finetune_batch
from .ode import MissingRegimeError, RegimeConditionedOde, euler_batch
from .simgen import GroundTruth, OneCompartmentModel, TumorModel, apply_observation_map, generate_one_compartment, \
    generate_tumor
from .trajectory import ChannelSpec, Dataset, Trajectory, subsample_irregular


@dataclass(frozen=True, eq=False)
class CounterfactualPlan:
    t: int
    tau: int
    assignments: Mapping[str, np.ndarray]

    def __post_init__(self):
        for name, vals in self.assignments.items():
            if len(vals) != self.tau:
                raise ValueError(f"plan channel {name!r} has {len(vals)} steps, expected {self.tau}")


def enumerate_counterfactual_plans(traj: Trajectory | None, t: int, tau_max: int,
                                   channels: Sequence[ChannelSpec]) -> list[CounterfactualPlan]:
    """Counterfactual treatment plans starting at index ``t``.

    ``tau_max == 1``: every combination of discrete channel values.
    ``tau_max > 1``: single-event sliding plans over offsets ``0 .. tau_max-2``
    on an all-zero baseline, one sweep per discrete channel.  A lone binary
    channel is swept in both directions (a treated slot on an untreated
    baseline and an untreated slot on a treated baseline), so binary sweeps
    always give ``2 (tau_max - 1)`` plans.
    """
    if tau_max < 1:
        raise ValueError("tau_max must be at least 1")
    discrete = [c for c in channels if c.discrete]
    continuous = [c for c in channels if not c.discrete]

    def plan(assign):
        full = {c.name: np.zeros(tau_max) for c in channels}
        full.update(assign)
        return CounterfactualPlan(t, tau_max, full)

    if tau_max == 1:
        combos = itertools.product(*[c.values() for c in discrete])
        return [plan({c.name: np.array([float(v)]) for c, v in zip(discrete, combo)}) for combo in combos]
    plans = []
    lone_binary = len(discrete) == 1 and discrete[0].kind == "binary"
    for c in discrete:
        base = 1 if c.kind == "categorical" else 0
        others = {o.name: np.full(tau_max, float(1 if o.kind == "categorical" else 0)) for o in discrete if o is not c}
        sweeps = [(base, v) for v in c.values() if v != base]
        if lone_binary:
            sweeps.append((1, 0))
        for baseline, event in sweeps:
            for off in range(tau_max - 1):
                vals = np.full(tau_max, float(baseline))
                vals[off] = event
                plans.append(plan({**others, c.name: vals}))
    del continuous
    return plans


def tau_step_nrmse(predictions, ground_truth, y_max: float) -> float:
    """Root mean squared error over all cells divided by ``y_max``."""
    p = np.asarray(predictions, dtype=float).ravel()
    g = np.asarray(ground_truth, dtype=float).ravel()
    if p.size != g.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} ground-truth values")
    if p.size == 0:
        raise ValueError("need at least one cell")
    if not y_max > 0:
        raise ValueError("y_max must be positive")
    return float(np.sqrt(np.mean((p - g) ** 2)) / y_max)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class ReportRow:
    dataset: str
    method: str
    tau: int
    mean: float
    ci_half_width: float
    n_seeds: int
    incomplete: bool = False


def t_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width over seed means."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    half = stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean()), float(half)


@dataclass
class EvaluationReport:
    """Per-seed nRMSE values keyed by (dataset, method, tau)."""

    values: dict[tuple[str, str, int], dict[int, float]] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def add(self, dataset: str, method: str, tau: int, seed: int, value: float) -> None:
        self.values.setdefault((dataset, method, tau), {})[seed] = value

    def merge(self, other: "EvaluationReport") -> "EvaluationReport":
        out = EvaluationReport({k: dict(v) for k, v in self.values.items()}, list(self.failures))
        for key, seeds in other.values.items():
            out.values.setdefault(key, {}).update(seeds)
        out.failures.extend(other.failures)
        return out

    def rows(self) -> list[ReportRow]:
        rows = []
        for (ds, method, tau), seeds in sorted(self.values.items()):
            vals = [seeds[s] for s in sorted(seeds)]
            finite = [v for v in vals if np.isfinite(v)]
            mean, half = t_interval(finite)
            rows.append(ReportRow(ds, method, tau, mean, half, len(finite), len(finite) < len(vals)))
        return rows

    def mean(self, dataset: str, method: str, tau: int) -> float:
        for row in self.rows():
            if (row.dataset, row.method, row.tau) == (dataset, method, tau):
                return row.mean
        raise KeyError((dataset, method, tau))

    def to_long(self) -> str:
        lines = ["dataset,method,tau,seed,nrmse"]
        for (ds, method, tau), seeds in sorted(self.values.items()):
            for s in sorted(seeds):
                lines.append(f"{ds},{method},{tau},{s},{seeds[s]:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_long(cls, text: str) -> "EvaluationReport":
        """Inverse of :meth:`to_long` (failures are not part of the long format)."""
        out = cls()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "dataset,method,tau,seed,nrmse":
            raise ValueError("not a long-format report")
        for ln in lines[1:]:
            ds, method, tau, seed, value = ln.split(",")
            out.add(ds, method, int(tau), int(seed), float(value))
        return out

    def to_table(self) -> str:
        lines = ["dataset,method,tau,mean_nrmse,ci95_half_width,n_seeds,incomplete"]
        for r in self.rows():
            lines.append(f"{r.dataset},{r.method},{r.tau},{r.mean:.6g},{r.ci_half_width:.3g},{r.n_seeds},"
                         f"{int(r.incomplete)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# one seed of a benchmark

def generate_split(spec: ExperimentSpec, seed: int, split: str, n: int) -> Dataset:
    cfg = spec.generator(seed, split, n)
    ds = generate_one_compartment(cfg) if spec.benchmark == "eq5" else generate_tumor(cfg)
    if spec.obs_map != "identity":
        ds = apply_observation_map(ds, spec.obs_map)
    if spec.drop_fraction > 0:
        ds = ds.with_trajectories(
            subsample_irregular(tr, spec.drop_fraction, [seed, 7, tr.patient_id]) for tr in ds
        )
    return ds


def pooled_channels(channels: Sequence[ChannelSpec]) -> tuple[ChannelSpec, ...]:
    """Discrete regime channels turned into numeric library inputs (one shared ODE)."""
    return tuple(replace(c, kind="continuous", n_categories=None, in_regime=False) if c.discrete else c
                 for c in channels)


def simulator(spec: ExperimentSpec, seed: int):
    cfg = spec.generator(seed, "test", spec.n_test)
    return OneCompartmentModel(cfg) if spec.benchmark == "eq5" else TumorModel(cfg)


def evaluation_items(test: Dataset, spec: ExperimentSpec) -> list[tuple[Trajectory, int]]:
    items = []
    for tr in test:
        last = tr.n_points - 1 - spec.tau_max
        for t in range(1, last + 1, spec.eval_stride):
            items.append((tr, t))
    return items


def _predict(model: RegimeConditionedOde, tensors: np.ndarray, items, plans_per_item, spec: ExperimentSpec):
    """Predicted outcomes (n_items, n_plans, tau) from per-item coefficient tensors."""
    n_plans = len(plans_per_item[0])
    tau = plans_per_item[0][0].tau
    d, p = model.dim, model.library.n_terms
    B = len(items) * n_plans
    coefs = np.empty((B, tau, d, p))
    exog = np.empty((B, tau, model.exog_variable_index().size))
    imp = np.empty((B, tau, d))
    x0 = np.empty((B, d))
    row = 0
    for (tr, t), plans, tensor in zip(items, plans_per_item, tensors):
        for plan in plans:
            keys = model.regime_of(plan.assignments)
            idx = [model.regime_index(k) for k in keys]
            coefs[row] = tensor[idx]
            exog[row] = model.exog_of(tr.statics, keys, plan.assignments)
            imp[row] = model.impulses_of(plan.assignments, tau)
            x0[row] = tr.states[t]
            row += 1
    spans = np.full((B, tau), 1.0)
    step = items[0][0].grid.step
    if step is not None:
        spans[:] = step
    states, _ = euler_batch(model, coefs, x0, exog, spans, imp, spec.inner_step)
    return states[:, 1:, model.outcome_index].reshape(len(items), n_plans, tau)


def _truth(gt: GroundTruth, items, plans_per_item):
    n_plans = len(plans_per_item[0])
    trajs = [tr for tr, _ in items for _ in range(n_plans)]
    starts = [t for _, t in items for _ in range(n_plans)]
    names = list(plans_per_item[0][0].assignments)
    plans = {c: np.stack([pl.assignments[c] for plans in plans_per_item for pl in plans]) for c in names}
    out = gt.counterfactual(trajs, starts, plans)
    return out.reshape(len(items), n_plans, -1)


def _oracle(sim, gt: GroundTruth, items, plans_per_item):
    """Generator dynamics with true parameters, started from the observed state."""
    shadow = []
    for tr, t in items:
        true = tr.true_states.copy()
        true[t] = tr.states[t]
        shadow.append(replace(tr, true_states=true))
    return _truth(gt, list(zip(shadow, [t for _, t in items])), plans_per_item)


def fit_population(spec: ExperimentSpec, train: Dataset):
    """Per-regime population ODE and, when an ablation needs it, the pooled single ODE."""
    popn = discover_population(train, spec.feature_library(), spec.stlsq(), spec.derivative_order)
    pooled = None
    if any(m.startswith("single-ODE") for m in spec.methods):
        pooled = discover_population(train, spec.pooled_library(), spec.stlsq(), spec.derivative_order,
                                     channels=pooled_channels(train.meta.channels))
    return popn, pooled


def evaluate_models(spec: ExperimentSpec, seed: int, test: Dataset, popn: RegimeConditionedOde,
                    pooled: RegimeConditionedOde | None = None):
    """Score every configured method on ``test``; returns (report, fitted patient models per method)."""
    report = EvaluationReport()
    dataset = f"{spec.benchmark}.{spec.layer}"
    items = evaluation_items(test, spec)
    sim = simulator(spec, seed)
    gt = GroundTruth(sim, test.meta)
    chans = test.meta.channels
    y_max = test.meta.y_max
    plan_sets = {1: [enumerate_counterfactual_plans(tr, t, 1, chans) for tr, t in items]}
    if spec.tau_max > 1:
        plan_sets[spec.tau_max] = [enumerate_counterfactual_plans(tr, t, spec.tau_max, chans) for tr, t in items]
    truths = {k: _truth(gt, items, v) for k, v in plan_sets.items()}
    fitted: dict[str, list[PatientModel]] = {}
    for method in spec.methods:
        try:
            if method == "oracle":
                preds = {k: _oracle(sim, gt, items, v) for k, v in plan_sets.items()}
            else:
                model = pooled if method.startswith("single-ODE") else popn
                if model is None:
                    raise ValueError(f"method {method} needs the pooled single ODE")
                if method.endswith("finetune") or method == "INSITE":
                    pms = finetune_batch(model, items, spec.finetune())
                    fitted[method] = pms
                    tensors = [pm.coefficients for pm in pms]
                else:
                    tensors = [model.coefficient_tensor()] * len(items)
                preds = {k: _predict(model, tensors, items, v, spec) for k, v in plan_sets.items()}
            for tau in spec.taus:
                key = 1 if tau == 1 else spec.tau_max
                p = preds[key][:, :, tau - 1]
                g = truths[key][:, :, tau - 1]
                value = tau_step_nrmse(p, g, y_max) if np.all(np.isfinite(p)) else float("nan")
                if not np.isfinite(value):
                    report.failures.append({"dataset": dataset, "method": method, "seed": seed, "tau": tau,
                                            "error": "non-finite prediction"})
                report.add(dataset, method, tau, seed, value)
        except MissingRegimeError as exc:
            report.failures.append({"dataset": dataset, "method": method, "seed": seed, "error": str(exc)})
            for tau in spec.taus:
                report.add(dataset, method, tau, seed, float("nan"))
    return report, fitted


def run_seed(spec: ExperimentSpec, seed: int, return_models: bool = False):
    """Evaluate every configured method on one seed; returns an EvaluationReport."""
    train = generate_split(spec, seed, "train", spec.n_train)
    test = generate_split(spec, seed, "test", spec.n_test)
    popn, pooled = fit_population(spec, train)
    report, fitted = evaluate_models(spec, seed, test, popn, pooled)
    if return_models:
        return report, popn, fitted
    return report


def _run_seed_job(args):
    spec, seed = args
    return run_seed(spec, seed)


def run_benchmark(spec: ExperimentSpec, workers: int = 1, seed_offset: int = 0) -> EvaluationReport:
    """Run every seed (optionally in worker processes) and merge in seed order."""
    seeds = [s + seed_offset for s in spec.seeds]
    jobs = [(spec, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_seed_job, jobs))
    else:
        parts = [_run_seed_job(j) for j in jobs]
    report = EvaluationReport()
    for part in parts:
        report = report.merge(part)
    return report
