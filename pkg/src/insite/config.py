"""Experiment specifications and their ``key = value`` text format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .discovery import StlsqConfig
from .finetune import FinetuneConfig
from .library import PRESETS, FeatureLibrary, multilinear_library, preset_library
from .simgen import OBSERVATION_MAPS, OneCompartmentConfig, TumorConfig

BENCHMARKS = ("eq5", "eq6", "cancer")
METHODS = ("A-SINDy", "INSITE", "oracle", "single-ODE", "single-ODE+finetune")
HORIZONS = {"eq5": 30, "eq6": 60, "cancer": 60}
LIBRARY_VARIABLES = {"eq5": ("x0", "c{a}"), "eq6": ("x0", "x1"), "cancer": ("x0", "x1")}
POOLED_VARIABLES = {"eq5": ("x0", "a"), "eq6": ("x0", "x1", "radio"), "cancer": ("x0", "x1", "chemo", "radio")}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    benchmark: str
    layer: str = "A"
    gamma: float = 2.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    horizon: int | None = None
    library: str = "default"
    threshold: float | None = None
    ridge_alpha: float = 0.5
    max_sweeps: int = 20
    derivative_order: int = 2
    lam: float = 10.0
    tol: float = 1e-6
    max_iter: int = 200
    inner_step: float = 0.166
    window: int | None = None
    taus: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    methods: tuple[str, ...] = ("A-SINDy", "INSITE")
    obs_map: str = "identity"
    drop_fraction: float = 0.0
    eval_stride: int = 1
    obs_noise_sd: float | None = None
    offset_modes: tuple[float, ...] = ()
    output_dir: str = "runs"

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise SpecError(f"unknown benchmark {self.benchmark!r}; choose from {BENCHMARKS}")
        layers = ("standard",) if self.benchmark == "cancer" else ("A", "B", "C", "D")
        if self.benchmark == "cancer" and self.layer == "A":
            object.__setattr__(self, "layer", "standard")
        if self.layer not in layers:
            raise SpecError(f"layer {self.layer!r} invalid for {self.benchmark}; choose from {layers}")
        if not self.seeds:
            raise SpecError("seeds must be non-empty")
        if self.library not in PRESETS:
            raise SpecError(f"unknown library preset {self.library!r}; choose from {PRESETS}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise SpecError(f"unknown methods {bad}; choose from {METHODS}")
        if self.obs_map not in OBSERVATION_MAPS:
            raise SpecError(f"unknown obs_map {self.obs_map!r}")
        if not self.taus or min(self.taus) < 1:
            raise SpecError("taus must be positive")
        if self.horizon is None:
            object.__setattr__(self, "horizon", HORIZONS[self.benchmark])
        if self.threshold is None:
            object.__setattr__(self, "threshold", 0.1 if self.benchmark == "eq5" else 0.001)
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise SpecError("sample sizes must be positive")
        if self.horizon < max(self.taus) + 2:
            raise SpecError(f"horizon {self.horizon} too short for tau {max(self.taus)}")

    @property
    def tau_max(self) -> int:
        return max(self.taus)

    def stlsq(self) -> StlsqConfig:
        return StlsqConfig(self.threshold, self.ridge_alpha, self.max_sweeps)

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(self.lam, self.tol, self.max_iter, self.inner_step, self.window)

    def feature_library(self) -> FeatureLibrary:
        return preset_library(self.library, LIBRARY_VARIABLES[self.benchmark])

    def pooled_library(self) -> FeatureLibrary:
        return multilinear_library(POOLED_VARIABLES[self.benchmark], 2)

    def generator(self, seed: int, split: str, n: int):
        common = dict(n_patients=n, horizon=self.horizon, gamma=self.gamma, seed=seed, split=split,
                      inner_step=self.inner_step)
        if self.obs_noise_sd is not None:
            common["obs_noise_sd"] = self.obs_noise_sd
        if self.benchmark == "eq5":
            return OneCompartmentConfig(layer=self.layer, offset_modes=self.offset_modes, **common)
        return TumorConfig(layer=self.layer, **common)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _convert(name: str, raw: str, kind: str):
    raw = raw.strip()
    if raw.lower() == "none" and ("None" in kind):
        return None
    if kind.startswith("tuple"):
        inner = kind[kind.index("[") + 1:kind.index(",")]
        parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
        if len(parts) == 1 and ".." in parts[0]:
            lo, hi = parts[0].split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(_convert(name, p, inner) for p in parts)
    base = kind.split("|")[0].strip()
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    return raw


def parse_spec_text(text: str, source: str = "<spec>") -> ExperimentSpec:
    """Parse ``key = value`` lines; ``[section]`` headers and ``#`` comments are ignored."""
    types = {f.name: str(f.type) for f in fields(ExperimentSpec)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise SpecError(f"{source}:{lineno}: expected 'key = value'")
        if key not in types:
            raise SpecError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, val, types[key])
        except ValueError:
            raise SpecError(f"{source}:{lineno}: bad value for {key!r}: {val.strip()!r}") from None
    if "benchmark" not in values:
        raise SpecError(f"{source}: benchmark required")
    try:
        return ExperimentSpec(**values)
    except SpecError as exc:
        raise SpecError(f"{source}: {exc}") from None


def parse_spec(path) -> ExperimentSpec:
    path = Path(path)
    return parse_spec_text(path.read_text(encoding="utf-8"), str(path))


def with_overrides(spec: ExperimentSpec, **changes) -> ExperimentSpec:
    return replace(spec, **changes)
