"""Per-patient fine-tuning of population ODE constants.

For one patient observed up to index ``t`` the objective is

    L(beta) = mean_k ||(z_k - zhat_k(beta)) / s||^2 + lam * ||beta - beta_pop||^2

where ``zhat`` comes from a single Euler rollout from the first used
observation through the observed treatments and ``z`` holds the observed
outcome plus, with ``fit_all_states``, the other measured state dimensions
(for the tumor model, the chemo concentration).  ``s`` is 1 (raw units)
unless ``normalize`` selects the population outcome scale.  Only the nonzero
population constants of regimes seen in the patient's history are free.
Gradients are exact: the state sensitivities are propagated alongside the
Euler recursion.

Many patients (and many prefixes of one patient) are optimized together with a
batched BFGS so that each iteration is a handful of array operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ode import DEFAULT_INNER_STEP, LOG_FLOOR, RegimeConditionedOde
from .trajectory import Dataset, Trajectory


@dataclass(frozen=True)
class FinetuneConfig:
    lam: float = 10.0
    tol: float = 1e-6
    max_iter: int = 200
    inner_step: float = DEFAULT_INNER_STEP
    window: int | None = None
    penalty: float = 1e12
    normalize: bool = False
    fit_all_states: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.tol < 0:
            raise ValueError("lam and tol must be non-negative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if not self.inner_step > 0:
            raise ValueError("inner_step must be positive")
        if self.window is not None and self.window < 2:
            raise ValueError("window must cover at least two observations")


@dataclass(eq=False)
class PatientModel:
    patient_id: int
    coefficients: np.ndarray  # (n_regimes, dim, n_terms), population regime order
    loss: float
    population_loss: float
    iterations: int
    fell_back: bool
    data_term: float = float("nan")
    reg_term: float = float("nan")
    t_index: int | None = None
    visited: tuple[int, ...] = ()  # regime indices present in the fitted history

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id, "t_index": self.t_index, "visited": list(self.visited),
            "coefficients": self.coefficients.tolist(),
            "loss": self.loss, "population_loss": self.population_loss, "iterations": self.iterations,
            "fell_back": self.fell_back,
        }


class ParameterMap:
    """Flat vector of the population model's nonzero constants."""

    def __init__(self, popn: RegimeConditionedOde):
        self.base = popn.coefficient_tensor()
        self.r, self.i, self.q = np.nonzero(self.base)
        self.values = self.base[self.r, self.i, self.q]

    @property
    def size(self) -> int:
        return self.values.size

    def tensors(self, theta: np.ndarray) -> np.ndarray:
        """(B, R, d, p) coefficient tensors for a batch of parameter vectors."""
        out = np.broadcast_to(self.base, (theta.shape[0],) + self.base.shape).copy()
        out[:, self.r, self.i, self.q] = theta
        return out


@dataclass
class Batch:
    """Padded arrays describing B rollouts to be fit."""

    patient_ids: np.ndarray
    t_index: np.ndarray
    x0: np.ndarray          # (B, d)
    regime: np.ndarray      # (B, K)
    exog: np.ndarray        # (B, K, E)
    impulses: np.ndarray    # (B, K, d)
    spans: np.ndarray       # (B, K)
    target: np.ndarray      # (B, K, d) observed states after each interval
    mask: np.ndarray        # (B, K)
    free: np.ndarray        # (B, P)

    def take(self, idx) -> "Batch":
        return Batch(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})

    def __len__(self) -> int:
        return self.patient_ids.size


def build_batch(popn: RegimeConditionedOde, pmap: ParameterMap, items: Sequence[tuple[Trajectory, int]],
                window: int | None = None) -> Batch:
    """One fit problem per ``(trajectory, t_index)``: observations up to and including ``t_index``."""
    B = len(items)
    starts = [0 if window is None else max(0, t - window + 1) for _, t in items]
    K = max([t - s for (_, t), s in zip(items, starts)] + [1])
    d, E = popn.dim, popn.exog_variable_index().size
    x0 = np.zeros((B, d))
    regime = np.zeros((B, K), dtype=int)
    exog = np.zeros((B, K, E))
    imp = np.zeros((B, K, d))
    spans = np.ones((B, K))
    target = np.zeros((B, K, d))
    mask = np.zeros((B, K), dtype=bool)
    free = np.zeros((B, pmap.size), dtype=bool)
    for b, ((tr, t), s) in enumerate(zip(items, starts)):
        if not 0 < t < tr.n_points:
            raise ValueError(f"patient {tr.patient_id}: t_index {t} needs at least two observations")
        n = t - s
        x0[b] = tr.states[s]
        keys = popn.regime_of({c: v[s:t] for c, v in tr.treatments.items()})
        idx = [popn.regime_index(k) for k in keys]
        regime[b, :n] = idx
        regime[b, n:] = idx[-1]
        ex = popn.exog_of(tr.statics, keys, {c: v[s:t] for c, v in tr.treatments.items()})
        exog[b, :n] = ex
        exog[b, n:] = ex[-1]
        imp[b, :n] = popn.impulses_of({c: v[s:t] for c, v in tr.treatments.items()}, n)
        spans[b, :n] = np.diff(tr.times[s:t + 1])
        target[b, :n] = tr.states[s + 1:t + 1]
        target[b, :n, popn.outcome_index] = tr.outcome[s + 1:t + 1]
        mask[b, :n] = True
        free[b] = np.isin(pmap.r, np.unique(idx))
    ids = np.array([tr.patient_id for tr, _ in items], dtype=int)
    return Batch(ids, np.array([t for _, t in items], dtype=int), x0, regime, exog, imp, spans, target, mask, free)


class Objective:
    """Batched regularized trajectory-fit loss with exact gradients."""

    def __init__(self, popn: RegimeConditionedOde, pmap: ParameterMap, cfg: FinetuneConfig):
        self.popn = popn
        self.pmap = pmap
        self.cfg = cfg
        self.scale = popn.y_scale if cfg.normalize else 1.0
        self.var_idx, self.state_idx = popn.state_variable_index()
        onehot = np.zeros((popn.dim, pmap.size))
        onehot[pmap.i, np.arange(pmap.size)] = 1.0
        self.onehot = onehot
        self.fitted = np.zeros(popn.dim)
        self.fitted[:] = 1.0 if cfg.fit_all_states else 0.0
        self.fitted[popn.outcome_index] = 1.0

    def __call__(self, theta: np.ndarray, batch: Batch, with_grad: bool = True):
        popn, pmap, cfg = self.popn, self.pmap, self.cfg
        lib = popn.library
        B, K = batch.spans.shape
        P, d = pmap.size, popn.dim
        coefs = pmap.tensors(theta)
        rows = np.arange(B)
        x = batch.x0.copy()
        S = np.zeros((B, d, P))
        resid_sq = np.zeros(B)
        grad_data = np.zeros((B, P))
        counts = np.maximum(1, np.rint(batch.spans / cfg.inner_step)).astype(int)
        hs = batch.spans / counts
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for k in range(K):
                live = batch.mask[:, k]
                if not live.any():
                    break
                x = x + batch.impulses[:, k]
                C = coefs[rows, batch.regime[:, k]]                       # (B, d, p)
                in_regime = (pmap.r[None, :] == batch.regime[:, k, None])  # (B, P)
                for j in range(counts[:, k].max()):
                    u = popn.inputs(x, batch.exog[:, k])
                    theta_vals = lib.evaluate(u, log_floor=LOG_FLOOR)
                    f = np.einsum("bdp,bp->bd", C, theta_vals)
                    step = ((j < counts[:, k]) & live) * hs[:, k]
                    if with_grad:
                        jac = np.zeros((B, lib.n_terms, d))
                        if self.var_idx.size:
                            jac[:, :, self.state_idx] = lib.jacobian(u, self.var_idx, LOG_FLOOR)
                        Jf = np.einsum("bdp,bpe->bde", C, jac)
                        Ftheta = self.onehot[None] * (theta_vals[:, pmap.q] * in_regime)[:, None, :]
                        S = S + step[:, None, None] * (np.einsum("bde,bep->bdp", Jf, S) + Ftheta)
                    x = x + step[:, None] * f
                r = (x - batch.target[:, k]) / self.scale * self.fitted
                resid_sq += np.where(live, (r ** 2).sum(axis=1), 0.0)
                if with_grad:
                    grad_data += np.einsum("bd,bdp->bp", np.where(live[:, None], r / self.scale, 0.0), S)
        n_obs = batch.mask.sum(axis=1)
        data = resid_sq / n_obs
        dev = np.where(batch.free, theta - pmap.values, 0.0)
        reg = cfg.lam * (dev ** 2).sum(axis=1)
        loss = data + reg
        bad = ~np.isfinite(loss)
        loss = np.where(bad, cfg.penalty, loss)
        if not with_grad:
            return loss, data, reg
        with np.errstate(over="ignore", invalid="ignore"):
            grad = 2 * grad_data / n_obs[:, None] + 2 * cfg.lam * dev
        grad = np.where(batch.free & ~bad[:, None] & np.isfinite(grad), grad, 0.0)
        return loss, grad, data, reg


def batched_bfgs(fun, theta0: np.ndarray, free: np.ndarray, tol: float, max_iter: int):
    """Minimize independent problems ``fun(theta_subset, idx) -> (f, g)`` in lockstep.

    Each problem keeps its own inverse-Hessian estimate restricted to its free
    coordinates, an Armijo backtracking line search, and the skip rule for
    non-positive curvature.  Returns (theta, f, iterations, converged).
    """
    B, P = theta0.shape
    theta = theta0.copy()
    all_idx = np.arange(B)
    f, g = fun(theta, all_idx)
    eye = np.eye(P)
    H = np.where(free[:, :, None] & free[:, None, :], eye, 0.0)
    first = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    done = np.abs(g).max(axis=1, initial=0.0) <= tol
    converged = done.copy()
    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        ga = g[act]
        p = -np.einsum("bij,bj->bi", H[act], ga)
        slope = np.einsum("bi,bi->b", p, ga)
        reset = ~(slope < 0)
        if reset.any():
            H[act[reset]] = np.where(free[act[reset], :, None] & free[act[reset], None, :], eye, 0.0)
            p[reset] = -ga[reset]
            slope[reset] = -np.einsum("bi,bi->b", ga[reset], ga[reset])
        alpha = np.ones(act.size)
        gnorm = np.sqrt(-slope)
        alpha[first[act]] = np.minimum(1.0, 1.0 / np.maximum(gnorm[first[act]], 1e-300))
        accepted = np.zeros(act.size, dtype=bool)
        f_new = np.empty(act.size)
        g_new = np.empty_like(ga)
        pending = np.arange(act.size)
        for _ls in range(40):
            trial = theta[act[pending]] + alpha[pending, None] * p[pending]
            ft, gt = fun(trial, act[pending])
            ok = ft <= f[act[pending]] + 1e-4 * alpha[pending] * slope[pending]
            hit = pending[ok]
            accepted[hit] = True
            f_new[hit] = ft[ok]
            g_new[hit] = gt[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        stalled = act[~accepted]
        done[stalled] = True
        acc = np.flatnonzero(accepted)
        ia = act[acc]
        s = alpha[acc, None] * p[acc]
        y = g_new[acc] - g[ia]
        theta[ia] = theta[ia] + s
        f[ia] = f_new[acc]
        g[ia] = g_new[acc]
        iters[ia] += 1
        sy = np.einsum("bi,bi->b", s, y)
        upd = sy > 1e-12 * np.maximum(1.0, np.linalg.norm(s, axis=1) * np.linalg.norm(y, axis=1))
        if upd.any():
            iu = ia[upd]
            su, yu, syu = s[upd], y[upd], sy[upd]
            scale_first = first[iu]
            if scale_first.any():
                yy = np.einsum("bi,bi->b", yu[scale_first], yu[scale_first])
                H[iu[scale_first]] *= (syu[scale_first] / yy)[:, None, None]
            rho = 1.0 / syu
            Hy = np.einsum("bij,bj->bi", H[iu], yu)
            yHy = np.einsum("bi,bi->b", yu, Hy)
            H[iu] = (H[iu]
                     - rho[:, None, None] * (Hy[:, :, None] * su[:, None, :] + su[:, :, None] * Hy[:, None, :])
                     + (rho ** 2 * yHy + rho)[:, None, None] * su[:, :, None] * su[:, None, :])
        first[ia] = False
        conv = np.abs(g[ia]).max(axis=1, initial=0.0) <= tol
        converged[ia[conv]] = True
        done[ia[conv]] = True
    return theta, f, iters, converged


def finetune_batch(popn: RegimeConditionedOde, items: Sequence[tuple[Trajectory, int]],
                   cfg: FinetuneConfig = FinetuneConfig(), chunk: int = 4096) -> list[PatientModel]:
    """Fine-tune one constant set per ``(trajectory, t_index)`` problem."""
    if not items:
        return []
    pmap = ParameterMap(popn)
    obj = Objective(popn, pmap, cfg)
    results: list[PatientModel] = []
    for lo in range(0, len(items), chunk):
        batch = build_batch(popn, pmap, items[lo:lo + chunk], cfg.window)
        theta0 = np.broadcast_to(pmap.values, (len(batch), pmap.size)).copy()

        def fun(theta, idx, batch=batch):
            loss, grad, _, _ = obj(theta, batch.take(idx))
            return loss, grad

        f0, _, _ = obj(theta0, batch, with_grad=False)
        if pmap.size and cfg.max_iter > 0:
            theta, f, iters, conv = batched_bfgs(fun, theta0, batch.free, cfg.tol, cfg.max_iter)
        else:
            theta, f, iters, conv = theta0, f0, np.zeros(len(batch), int), np.ones(len(batch), bool)
        worse = ~(f <= f0)
        theta[worse] = theta0[worse]
        f = np.where(worse, f0, f)
        _, data, reg = obj(theta, batch, with_grad=False)
        tensors = pmap.tensors(theta)
        for b in range(len(batch)):
            results.append(PatientModel(
                patient_id=int(batch.patient_ids[b]), coefficients=tensors[b], loss=float(f[b]),
                population_loss=float(f0[b]), iterations=int(iters[b]), fell_back=bool(~conv[b] | worse[b]),
                data_term=float(data[b]), reg_term=float(reg[b]), t_index=int(batch.t_index[b]),
                visited=tuple(int(r) for r in np.unique(batch.regime[b][batch.mask[b]])),
            ))
    return results


def finetune_constants(popn: RegimeConditionedOde, traj: Trajectory,
                       cfg: FinetuneConfig = FinetuneConfig(), t_index: int | None = None) -> PatientModel:
    """Fine-tune on the observed prefix ending at ``t_index`` (default: whole trajectory)."""
    if traj.n_points < 2:
        raise ValueError("fine-tuning needs at least two observations")
    t = traj.n_points - 1 if t_index is None else t_index
    return finetune_batch(popn, [(traj, t)], cfg)[0]


def fit_insite(popn: RegimeConditionedOde, ds: Dataset | Sequence[Trajectory],
               cfg: FinetuneConfig = FinetuneConfig()) -> list[PatientModel]:
    """Fine-tune every patient on its full observed history, in patient-id order."""
    trajs = sorted(ds, key=lambda tr: tr.patient_id)
    return finetune_batch(popn, [(tr, tr.n_points - 1) for tr in trajs], cfg)


def loss_and_gradient(popn: RegimeConditionedOde, traj: Trajectory, t_index: int,
                      cfg: FinetuneConfig = FinetuneConfig()):
    """Single-problem objective over the free constants, for checks and external optimizers.

    Returns ``(fun, theta_bar, free)`` where ``fun(theta) -> (loss, grad)``
    takes the full flat parameter vector.
    """
    pmap = ParameterMap(popn)
    obj = Objective(popn, pmap, cfg)
    batch = build_batch(popn, pmap, [(traj, t_index)], cfg.window)

    def fun(theta):
        loss, grad, _, _ = obj(np.asarray(theta, dtype=float)[None], batch)
        return float(loss[0]), grad[0]

    return fun, pmap.values.copy(), batch.free[0]


# ---------------------------------------------------------------------------
# population distribution of constants

@dataclass
class ConstantsSummary:
    term: str
    values: np.ndarray
    mean: float
    sd: float
    bin_edges: np.ndarray
    counts: np.ndarray
    separation: float
    n_modes: int

    def to_row(self) -> str:
        edges = " ".join(f"{e:.9g}" for e in self.bin_edges)
        counts = " ".join(str(int(c)) for c in self.counts)
        return f"{self.term},{self.mean:.9g},{self.sd:.9g},{edges},{counts}"


def two_means_separation(values: np.ndarray) -> float:
    """Between-mode distance over pooled within-mode spread of the best 2-split.

    The optimal 1-D two-means split is contiguous in sorted order, so every
    cut point is checked exactly.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if n < 4 or v[-1] == v[0]:
        return 0.0
    csum = np.cumsum(v)
    csq = np.cumsum(v ** 2)
    k = np.arange(1, n)
    m1 = csum[:-1] / k
    m2 = (csum[-1] - csum[:-1]) / (n - k)
    ss1 = csq[:-1] - k * m1 ** 2
    ss2 = (csq[-1] - csq[:-1]) - (n - k) * m2 ** 2
    within = ss1 + ss2
    best = int(np.argmin(within))
    spread = np.sqrt(max(within[best], 0.0) / (n - 2))
    gap = abs(m2[best] - m1[best])
    return float(gap / spread) if spread > 0 else float("inf")


def histogram_modes(counts: np.ndarray) -> int:
    """Number of strict local maxima of a histogram (plateaus count once)."""
    c = np.asarray(counts, dtype=float)
    c = c[np.concatenate([[True], np.diff(c) != 0])] if c.size else c
    if c.size == 0 or not np.any(c):
        return 0
    padded = np.concatenate([[-np.inf], c, [-np.inf]])
    return int(np.sum((padded[1:-1] > padded[:-2]) & (padded[1:-1] > padded[2:])))


def constants_distribution(popn: RegimeConditionedOde, models: Sequence[PatientModel], term: str,
                           regime=None, state: int = 0, bins: int = 20,
                           separation_threshold: float = 3.0) -> ConstantsSummary:
    """Summary of one fine-tuned constant across patients.

    Only patients whose history visited the regime contribute; the others
    carry the untouched population value.  ``sd`` is the population standard deviation (divisor n).  ``n_modes`` is
    2 when the two-means separation score exceeds ``separation_threshold``.
    """
    labels = popn.library.labels
    if term not in labels:
        raise ValueError(f"unknown term {term!r}")
    q = labels.index(term)
    regimes = popn.regimes
    r = 0 if regime is None else popn.regime_index(regime)
    if popn.coefficients[regimes[r]][state, q] == 0:
        raise ValueError(f"term {term!r} is inactive in the population model")
    values = np.array([m.coefficients[r, state, q] for m in models if not m.visited or r in m.visited],
                      dtype=float)
    if values.size == 0:
        raise ValueError("no patient model visited the regime")
    lo, hi = values.min(), values.max()
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    sep = two_means_separation(values)
    return ConstantsSummary(term, values, float(values.mean()), float(values.std()), edges, counts, sep,
                            2 if sep > separation_threshold else 1)
