"""Seeded synthetic PKPD cohorts with confounded treatment policies.

Two model families are provided:

* a one-compartment elimination model with a binary static treatment that
  selects the elimination constant, and
* a tumour-volume model with chemotherapy (drug concentration, dosed by
  impulses) and radiotherapy, in three variants: the tumour-growth layers A-D
  and the standard cancer benchmark with a diameter-driven policy.

Every random draw comes from a per-patient substream keyed by
``(seed, split, patient_id, stream)`` so cohorts are reproducible and patients
can be simulated in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .ode import DEFAULT_INNER_STEP, inner_step_count
from .trajectory import ChannelSpec, Dataset, DatasetMeta, Trajectory, make_time_grid

LAYERS = ("A", "B", "C", "D")
SPLITS = {"train": 0, "val": 1, "test": 2}
STREAMS = {"params": 0, "initial": 1, "policy": 2, "obs_noise": 3, "growth_noise": 4}

ONE_COMPARTMENT_Y_MAX = 50.0
TUMOR_Y_MAX = 1150.0


def confounding_probability(y_bar, gamma: float):
    """Treatment probability ``sigmoid(gamma * (y_bar - 0.5))`` from normalized outcomes."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    return expit(gamma * (np.asarray(y_bar, dtype=float) - 0.5))


def cancer_assignment_probability(d_bar, gamma_ch: float, d_max: float = 13.0, delta: float | None = None):
    """Diameter-driven treatment probability of the standard cancer benchmark."""
    if not d_max > 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    if delta is None:
        delta = d_max / 2
    return expit(gamma_ch / d_max * (np.asarray(d_bar, dtype=float) - delta))


def sphere_volume(diameter):
    return np.pi / 6 * np.asarray(diameter, dtype=float) ** 3


def sphere_diameter(volume):
    return np.cbrt(6 * np.maximum(np.asarray(volume, dtype=float), 0) / np.pi)


def trailing_mean(history: np.ndarray, t: int, window: int) -> np.ndarray:
    """Mean of columns ``t - window + 1 .. t`` (inclusive) of a (B, T) array."""
    return history[:, max(0, t - window + 1):t + 1].mean(axis=1)


def patient_rng(seed: int, split: str, patient_id: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS[split], int(patient_id), STREAMS[stream]]))


def _draws(cfg, stream: str, shape) -> np.ndarray:
    """Standard-normal (or uniform for the policy) draws, one row per patient."""
    ids = range(cfg.first_patient_id, cfg.first_patient_id + cfg.n_patients)
    out = np.empty((cfg.n_patients,) + tuple(shape))
    for row, pid in enumerate(ids):
        rng = patient_rng(cfg.seed, cfg.split, pid, stream)
        out[row] = rng.random(shape) if stream in ("policy", "initial") else rng.standard_normal(shape)
    return out


def truncated_normal(mean, sd, z, lower: float = 0.0):
    """Map standard-normal draws ``z`` to Normal(mean, sd) truncated below at ``lower``.

    Inverse-CDF transform, so each patient still consumes exactly one draw.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape) if mean.ndim else np.asarray(sd, dtype=float)
    if np.any(np.asarray(sd) < 0):
        raise ValueError("sd must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = ndtr((lower - mean) / sd)
        u = lo + (1.0 - lo) * ndtr(np.asarray(z, dtype=float))
        out = mean + sd * ndtri(np.clip(u, 0.0, 1.0 - 1e-16))
    return np.where(sd > 0, np.maximum(out, lower), np.maximum(mean, lower))


def euler_advance(rhs, x: np.ndarray, span: float, inner_step: float) -> np.ndarray:
    """Forward Euler across one observation interval with equal sub-steps."""
    n = inner_step_count(span, inner_step)
    h = span / n
    for _ in range(n):
        x = x + h * rhs(x)
    return x


# ---------------------------------------------------------------------------
# one-compartment model

@dataclass(frozen=True)
class OneCompartmentConfig:
    layer: str = "A"
    n_patients: int = 1000
    horizon: int = 30
    step: float = 1.0
    inner_step: float = DEFAULT_INNER_STEP
    gamma: float = 2.0
    window: int = 15
    obs_noise_sd: float = 0.01
    x0_range: tuple[float, float] = (1.0, 50.0)
    weights: tuple[float, float, float, float] = (1.0, 0.05, 1.0, 0.15)
    param_sd: float = 0.25
    covariate_mean: float = 0.5
    covariate_sd: float = 0.05
    volume: float = 1.0
    y_max: float = ONE_COMPARTMENT_Y_MAX
    offset_modes: tuple[float, ...] = ()
    offset_sd: float = 0.1
    seed: int = 0
    split: str = "train"
    first_patient_id: int = 0

    def __post_init__(self):
        if self.layer not in LAYERS:
            raise ValueError(f"unknown layer {self.layer!r}")
        lo, hi = self.x0_range
        if not 0 < lo < hi:
            raise ValueError(f"x0_range must be a non-empty positive interval, got {self.x0_range}")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.gamma < 0 or self.obs_noise_sd < 0 or self.param_sd < 0:
            raise ValueError("gamma, obs_noise_sd and param_sd must be non-negative")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


class OneCompartmentModel:
    """``dx/dt = -(C_a / V) x + offset`` with ``a`` the static treatment.

    The constant ``offset`` is zero unless ``offset_modes`` is given; it then
    follows an equal-weight Gaussian mixture, used to test recovery of a
    multimodal population distribution of constants.
    """

    state_names = ("x0",)
    static_names = ("c0", "c1")
    channels = (ChannelSpec("a", "binary"),)

    def __init__(self, cfg: OneCompartmentConfig):
        self.cfg = cfg

    def sample_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        z = _draws(cfg, "params", (6,))
        c0 = cfg.covariate_mean + cfg.covariate_sd * z[:, 0]
        c1 = cfg.covariate_mean + cfg.covariate_sd * z[:, 1]
        if cfg.layer in ("A", "B"):
            C0, C1 = c0, c1
        else:
            w0, w1, w2, w3 = cfg.weights
            C0, C1 = c0 * w0 + w1, c1 * w2 + w3
            if cfg.layer == "D":
                # elimination rates are physical, so the spread is truncated at zero
                C0 = truncated_normal(C0, cfg.param_sd, z[:, 2])
                C1 = truncated_normal(C1, cfg.param_sd, z[:, 3])
        offset = np.zeros(cfg.n_patients)
        if cfg.offset_modes:
            modes = np.asarray(cfg.offset_modes, dtype=float)
            pick = np.minimum((ndtr(z[:, 4]) * modes.size).astype(int), modes.size - 1)
            offset = modes[pick] + cfg.offset_sd * z[:, 5]
        return {"c0": c0, "c1": c1, "C0": C0, "C1": C1, "V": np.full(cfg.n_patients, cfg.volume),
                "offset": offset}

    def advance(self, x: np.ndarray, params: Mapping[str, np.ndarray], treat: Mapping[str, np.ndarray],
                span: float, noise=None) -> np.ndarray:
        rate = np.where(treat["a"] > 0, params["C1"], params["C0"]) / params["V"]
        offset = params["offset"]
        return euler_advance(lambda s: -rate[:, None] * s + offset[:, None], x, span, self.cfg.inner_step)

    def observe(self, x: np.ndarray) -> np.ndarray:
        return x[:, 0]

    def generate(self) -> Dataset:
        cfg = self.cfg
        n, T = cfg.n_patients, cfg.horizon
        params = self.sample_params()
        lo, hi = cfg.x0_range
        x = (lo + (hi - lo) * _draws(cfg, "initial", (1,)))
        eps = cfg.obs_noise_sd * _draws(cfg, "obs_noise", (T,)) if cfg.layer != "A" else np.zeros((n, T))
        u = _draws(cfg, "policy", (1,))[:, 0]
        truth = np.empty((n, T, 1))
        truth[:, 0] = x
        y0 = x[:, 0] + eps[:, 0]
        p = confounding_probability(y0 / cfg.y_max, cfg.gamma)
        a = (u < p).astype(float)
        for t in range(1, T):
            truth[:, t] = self.advance(truth[:, t - 1], params, {"a": a}, cfg.step)
        y = truth[:, :, 0] + eps
        grid = make_time_grid(0.0, cfg.step, T)
        trajs = []
        for i in range(n):
            trajs.append(Trajectory(
                patient_id=cfg.first_patient_id + i,
                grid=grid,
                states=y[i][:, None],
                outcome=y[i],
                treatments={"a": np.full(T, a[i])},
                statics={"c0": params["c0"][i], "c1": params["c1"][i]},
                true_states=truth[i],
                params={k: v[i] for k, v in params.items()},
            ))
        meta = DatasetMeta(
            benchmark="eq5", bsv_layer=cfg.layer, gamma=cfg.gamma, y_max=cfg.y_max, seed=cfg.seed,
            state_names=self.state_names, outcome_index=0, channels=self.channels,
            static_names=self.static_names,
        )
        return Dataset(tuple(trajs), meta)


def generate_one_compartment(cfg: OneCompartmentConfig) -> Dataset:
    return OneCompartmentModel(cfg).generate()


# ---------------------------------------------------------------------------
# tumour model

TREATMENT_MODES = ("continuous_chemo_binary_radio", "binary_binary")


@dataclass(frozen=True)
class TumorConfig:
    """Tumour-growth cohort.

    ``layer`` is one of A-D or ``"standard"`` for the cancer benchmark, which
    uses the full parameter distributions, the diameter-driven policy and
    treats both channels as regime selectors.
    """

    layer: str = "D"
    n_patients: int = 1000
    horizon: int = 60
    step: float = 1.0
    inner_step: float = DEFAULT_INNER_STEP
    gamma: float = 2.0
    window: int = 15
    treatment_mode: str | None = None
    rho: tuple[float, float] = (7.0e-5, 7.23e-3)
    carrying_capacity: float = 30.0
    alpha_r: tuple[float, float] = (0.0398, 0.168)
    alpha_beta_ratio: float = 10.0
    beta_c: tuple[float, float] = (0.028, 0.0007)
    group_scale: float = 1.1
    chemo_decay: float = 0.5
    chemo_impulse: float = 5.0
    radio_dose: float = 2.0
    growth_noise_sd: float = 0.01
    obs_noise_sd: float = 0.01
    diameter_range: tuple[float, float] = (0.5, 13.0)
    d_max: float = 13.0
    y_max: float = TUMOR_Y_MAX
    seed: int = 0
    split: str = "train"
    first_patient_id: int = 0

    def __post_init__(self):
        if self.layer not in LAYERS + ("standard",):
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.treatment_mode is None:
            mode = "binary_binary" if self.layer == "standard" else "continuous_chemo_binary_radio"
            object.__setattr__(self, "treatment_mode", mode)
        if self.treatment_mode not in TREATMENT_MODES:
            raise ValueError(f"unknown treatment_mode {self.treatment_mode!r}")
        for name in ("rho", "alpha_r", "beta_c"):
            mu, sd = getattr(self, name)
            if not (np.isfinite(mu) and sd >= 0):
                raise ValueError(f"invalid distribution for {name}: {(mu, sd)}")
        if not self.carrying_capacity > 0 or not self.alpha_beta_ratio > 0:
            raise ValueError("carrying capacity and alpha/beta ratio must be positive")
        lo, hi = self.diameter_range
        if not 0 < lo < hi:
            raise ValueError(f"invalid diameter_range {self.diameter_range}")
        if self.horizon < 2 or self.gamma < 0:
            raise ValueError("horizon must be >= 2 and gamma >= 0")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


class TumorModel:
    """Tumour volume ``x0`` and chemo concentration ``x1``.

    dx0/dt = (rho log(K / x0) - beta_c x1 - (alpha_r d + beta_r d^2) + e) x0
    dx1/dt = -decay x1, with x1 += impulse on chemo days
    """

    state_names = ("x0", "x1")
    static_names = ("group",)

    def __init__(self, cfg: TumorConfig):
        self.cfg = cfg
        regime_chemo = cfg.treatment_mode == "binary_binary"
        self.channels = (
            ChannelSpec("chemo", "binary", in_regime=regime_chemo, impulse_state=1, impulse_size=cfg.chemo_impulse),
            ChannelSpec("radio", "binary"),
        )
        self.v_max = float(sphere_volume(cfg.d_max))

    def sample_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        z = _draws(cfg, "params", (4,))
        if cfg.layer in ("A", "B"):
            group = np.ones(cfg.n_patients)
        else:
            group = 1.0 + np.minimum(np.floor(ndtr(z[:, 3]) * 3), 2)
        mu_a = cfg.alpha_r[0] * np.where(group == 1, cfg.group_scale, 1.0)
        mu_c = cfg.beta_c[0] * np.where(group == 3, cfg.group_scale, 1.0)
        # rates are sampled from normals truncated at zero, as in the benchmark's reference simulator
        rho = truncated_normal(np.full(cfg.n_patients, cfg.rho[0]), cfg.rho[1], z[:, 0])
        alpha = truncated_normal(mu_a, cfg.alpha_r[1], z[:, 1])
        beta_c = truncated_normal(mu_c, cfg.beta_c[1], z[:, 2]) if cfg.layer in ("D", "standard") else mu_c
        n = cfg.n_patients
        return {"rho": rho, "K": np.full(n, cfg.carrying_capacity), "alpha_r": alpha,
                "beta_r": alpha / cfg.alpha_beta_ratio, "beta_c": np.asarray(beta_c, float) * np.ones(n),
                "group": group}

    def advance(self, x: np.ndarray, params: Mapping[str, np.ndarray], treat: Mapping[str, np.ndarray],
                span: float, noise=None) -> np.ndarray:
        cfg = self.cfg
        x = x.copy()
        x[:, 1] = x[:, 1] + cfg.chemo_impulse * treat["chemo"]
        d = cfg.radio_dose * treat["radio"]
        radio_kill = params["alpha_r"] * d + params["beta_r"] * d ** 2
        e = 0.0 if noise is None else noise
        rho, K, bc = params["rho"], params["K"], params["beta_c"]

        def rhs(s):
            vol = np.maximum(s[:, 0], 1e-12)
            growth = rho * np.log(K / vol) - bc * s[:, 1] - radio_kill + e
            return np.stack([growth * s[:, 0], -cfg.chemo_decay * s[:, 1]], axis=1)

        x = euler_advance(rhs, x, span, cfg.inner_step)
        x[:, 0] = np.clip(x[:, 0], 0.0, self.v_max)
        return x

    def observe(self, x: np.ndarray) -> np.ndarray:
        return x[:, 0]

    def policy(self, observed: np.ndarray, t: int) -> np.ndarray:
        cfg = self.cfg
        if cfg.layer == "standard":
            d_bar = trailing_mean(sphere_diameter(observed), t, cfg.window)
            return cancer_assignment_probability(d_bar, cfg.gamma, cfg.d_max)
        return confounding_probability(trailing_mean(observed / cfg.y_max, t, cfg.window), cfg.gamma)

    def generate(self) -> Dataset:
        cfg = self.cfg
        n, T = cfg.n_patients, cfg.horizon
        params = self.sample_params()
        lo, hi = cfg.diameter_range
        diam = lo + (hi - lo) * _draws(cfg, "initial", (1,))[:, 0]
        noisy = cfg.layer != "A"
        eps = cfg.obs_noise_sd * _draws(cfg, "obs_noise", (T,)) if noisy else np.zeros((n, T))
        growth = cfg.growth_noise_sd * _draws(cfg, "growth_noise", (T,))
        u = _draws(cfg, "policy", (T, 2))
        truth = np.zeros((n, T, 2))
        truth[:, 0, 0] = np.minimum(sphere_volume(diam), self.v_max)
        observed = np.zeros((n, T))
        chemo = np.zeros((n, T))
        radio = np.zeros((n, T))
        for t in range(T):
            if t > 0:
                treat = {"chemo": chemo[:, t - 1], "radio": radio[:, t - 1]}
                truth[:, t] = self.advance(truth[:, t - 1], params, treat, cfg.step, growth[:, t - 1])
            observed[:, t] = np.clip(truth[:, t, 0] + eps[:, t], 0.0, self.v_max)
            p = self.policy(observed, t)
            chemo[:, t] = u[:, t, 0] < p
            radio[:, t] = u[:, t, 1] < p
        grid = make_time_grid(0.0, cfg.step, T)
        trajs = []
        for i in range(n):
            states = np.stack([observed[i], truth[i, :, 1]], axis=1)
            trajs.append(Trajectory(
                patient_id=cfg.first_patient_id + i,
                grid=grid,
                states=states,
                outcome=observed[i],
                treatments={"chemo": chemo[i], "radio": radio[i]},
                statics={"group": params["group"][i]},
                true_states=truth[i],
                params={k: v[i] for k, v in params.items() if k != "group"},
            ))
        meta = DatasetMeta(
            benchmark="cancer" if cfg.layer == "standard" else "eq6", bsv_layer=cfg.layer, gamma=cfg.gamma,
            y_max=cfg.y_max, seed=cfg.seed, state_names=self.state_names, outcome_index=0,
            channels=self.channels, static_names=self.static_names,
        )
        return Dataset(tuple(trajs), meta)


def generate_tumor(cfg: TumorConfig) -> Dataset:
    return TumorModel(cfg).generate()


# ---------------------------------------------------------------------------
# observation maps and ground truth

OBSERVATION_MAPS = {
    "identity": lambda u: u,
    "exp": np.exp,
    "square": np.square,
    "sin": np.sin,
}


def map_outcomes(values, name: str, lo: float, hi: float):
    """Min-max normalize with ``(lo, hi)``, apply the map, and scale back."""
    u = (np.asarray(values, dtype=float) - lo) / (hi - lo)
    return lo + (hi - lo) * OBSERVATION_MAPS[name](u)


def apply_observation_map(ds: Dataset, name: str) -> Dataset:
    """Replace observed outcomes (and the observed outcome state) by ``g(outcome)``."""
    if name not in OBSERVATION_MAPS:
        raise ValueError(f"unknown observation map {name!r}; choose from {sorted(OBSERVATION_MAPS)}")
    if name == "identity" or not len(ds):
        return ds
    allv = np.concatenate([tr.outcome for tr in ds])
    lo, hi = float(allv.min()), float(allv.max())
    if not hi > lo:
        raise ValueError("outcome column is constant; min-max scaling is undefined")
    j = ds.meta.outcome_index
    trajs = []
    for tr in ds:
        y = map_outcomes(tr.outcome, name, lo, hi)
        states = tr.states.copy()
        states[:, j] = y
        trajs.append(replace(tr, states=states, outcome=y))
    return Dataset(tuple(trajs), replace(ds.meta, obs_map=name, obs_range=(lo, hi)))


@dataclass
class GroundTruth:
    """Noise-free potential outcomes under hypothetical treatment plans."""

    model: OneCompartmentModel | TumorModel
    meta: DatasetMeta
    step: float = 1.0

    def counterfactual(self, trajs, starts, plans: Mapping[str, np.ndarray]) -> np.ndarray:
        """Outcomes after each planned interval.

        trajs : list of B trajectories carrying ``true_states`` and ``params``
        starts : (B,) start indices; plans : channel -> (B, tau) values
        Returns (B, tau) outcomes passed through the dataset's observation map.
        """
        x = np.stack([tr.true_states[s] for tr, s in zip(trajs, starts)])
        names = list(trajs[0].params)
        params = {k: np.array([tr.params[k] for tr in trajs]) for k in names}
        tau = next(iter(plans.values())).shape[1]
        out = np.empty((len(trajs), tau))
        for k in range(tau):
            x = self.model.advance(x, params, {c: v[:, k] for c, v in plans.items()}, self.step)
            out[:, k] = self.model.observe(x)
        if self.meta.obs_map != "identity":
            lo, hi = self.meta.obs_range
            out = map_outcomes(out, self.meta.obs_map, lo, hi)
        return out


def benchmark_model(meta: DatasetMeta, config=None):
    """Simulator matching a dataset's metadata (for ground-truth rollouts)."""
    if meta.benchmark == "eq5":
        return OneCompartmentModel(config or OneCompartmentConfig(layer=meta.bsv_layer))
    if meta.benchmark in ("eq6", "cancer"):
        return TumorModel(config or TumorConfig(layer=meta.bsv_layer))
    raise ValueError(f"no simulator for benchmark {meta.benchmark!r}")
