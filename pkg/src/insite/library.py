"""Candidate-term libraries for linear-in-coefficients ODEs.

A library is an ordered list of variables and an ordered list of terms.  A term
is a product of non-negative integer powers of the variables, optionally
wrapped in a natural log.  Variable names may carry a ``{channel}`` template
(``"c{a}"``) that resolves to a static covariate per treatment regime.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LogDomainError(ValueError):
    pass


@dataclass(frozen=True)
class Term:
    powers: tuple[int, ...]
    log: bool = False

    def __post_init__(self):
        if any(p < 0 for p in self.powers):
            raise ValueError("term powers must be non-negative")
        if self.log and not any(self.powers):
            raise ValueError("log of a constant is not a term")

    def label(self, variables: Sequence[str]) -> str:
        parts = []
        for name, p in zip(variables, self.powers):
            if p == 1:
                parts.append(name)
            elif p > 1:
                parts.append(f"{name}^{p}")
        body = "*".join(parts) if parts else "1"
        return f"log({body})" if self.log else body


_FACTOR = re.compile(r"^(?P<name>[^\^*()]+?)(?:\^(?P<pow>\d+))?$")


def parse_term(text: str, variables: Sequence[str]) -> Term:
    """Inverse of :meth:`Term.label`."""
    text = text.strip().replace(" ", "")
    log = text.startswith("log(") and text.endswith(")")
    if log:
        text = text[4:-1]
    powers = [0] * len(variables)
    if text != "1":
        for factor in text.split("*"):
            m = _FACTOR.match(factor)
            if not m or m["name"] not in variables:
                raise ValueError(f"cannot parse term factor {factor!r}")
            powers[variables.index(m["name"])] += int(m["pow"] or 1)
    return Term(tuple(powers), log)


@dataclass(frozen=True)
class FeatureLibrary:
    variables: tuple[str, ...]
    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(set(self.variables)) != len(self.variables):
            raise ValueError("duplicate library variables")
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("duplicate library terms")
        for t in self.terms:
            if len(t.powers) != len(self.variables):
                raise ValueError("term arity does not match variable count")

    @classmethod
    def from_labels(cls, variables: Sequence[str], labels: Sequence[str]) -> "FeatureLibrary":
        variables = tuple(variables)
        return cls(variables, tuple(parse_term(s, variables) for s in labels))

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> list[str]:
        return [t.label(self.variables) for t in self.terms]

    @property
    def has_log(self) -> bool:
        return any(t.log for t in self.terms)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    @property
    def _powers(self) -> np.ndarray:
        return np.array([t.powers for t in self.terms], dtype=float).reshape(len(self.terms), len(self.variables))

    @property
    def _log_mask(self) -> np.ndarray:
        return np.array([t.log for t in self.terms], dtype=bool)

    def evaluate(self, inputs, log_floor: float | None = None) -> np.ndarray:
        """Term values for inputs of shape ``(..., n_variables)``.

        With ``log_floor=None`` a non-positive log argument raises
        :class:`LogDomainError`; otherwise arguments are clamped to the floor.
        """
        x = np.asarray(inputs, dtype=float)
        if x.shape[-1] != len(self.variables):
            raise ValueError(f"expected {len(self.variables)} inputs, got {x.shape[-1]}")
        mono = np.prod(x[..., None, :] ** self._powers, axis=-1)
        logs = self._log_mask
        if logs.any():
            arg = mono[..., logs]
            if log_floor is None:
                bad = ~(arg > 0)
                if bad.any():
                    which = np.flatnonzero(logs)[np.nonzero(bad.reshape(-1, logs.sum()).any(axis=0))[0][0]]
                    raise LogDomainError(f"log term {self.terms[which].label(self.variables)} needs a positive argument")
            else:
                arg = np.maximum(arg, log_floor)
            mono[..., logs] = np.log(arg)
        return mono

    def log_domain_ok(self, inputs) -> np.ndarray:
        """Per-row flag: every log term has a strictly positive argument."""
        x = np.asarray(inputs, dtype=float)
        logs = self._log_mask
        if not logs.any():
            return np.ones(x.shape[:-1], dtype=bool)
        arg = np.prod(x[..., None, :] ** self._powers[logs], axis=-1)
        return np.all(arg > 0, axis=-1)

    def jacobian(self, inputs, wrt: Sequence[int], log_floor: float = 1e-8) -> np.ndarray:
        """Derivatives of every term with respect to the variables in ``wrt``.

        Returns shape ``(..., n_terms, len(wrt))``.  Log terms with a clamped
        argument have zero derivative, matching :meth:`evaluate` with a floor.
        """
        x = np.asarray(inputs, dtype=float)
        pw = self._powers
        out = np.zeros(x.shape[:-1] + (len(self.terms), len(wrt)))
        for col, j in enumerate(wrt):
            pj = pw[:, j]
            lowered = pw.copy()
            lowered[:, j] = np.maximum(pj - 1, 0)
            out[..., col] = pj * np.prod(x[..., None, :] ** lowered, axis=-1)
        logs = self._log_mask
        if logs.any():
            mono = np.prod(x[..., None, :] ** pw[logs], axis=-1)
            live = mono > log_floor
            safe = np.where(live, mono, 1.0)
            out[..., logs, :] = np.where(live[..., None], out[..., logs, :] / safe[..., None], 0.0)
        return out


def evaluate_features(lib: FeatureLibrary, inputs) -> np.ndarray:
    """Row of term values in library order (strict log domain)."""
    return lib.evaluate(inputs)


def multilinear_library(variables: Sequence[str], degree: int = 2) -> FeatureLibrary:
    """Constant plus all products of distinct variables up to ``degree``."""
    variables = tuple(variables)
    n = len(variables)
    terms = [Term((0,) * n)]
    for k in range(1, degree + 1):
        for combo in itertools.combinations(range(n), k):
            terms.append(Term(tuple(1 if i in combo else 0 for i in range(n))))
    return FeatureLibrary(variables, tuple(terms))


def polynomial_library(variables: Sequence[str], degree: int) -> FeatureLibrary:
    """All monomials up to total ``degree``, graded then lexicographic."""
    variables = tuple(variables)
    n = len(variables)
    terms = []
    for k in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), k):
            terms.append(Term(tuple(combo.count(i) for i in range(n))))
    return FeatureLibrary(variables, tuple(terms))


PRESETS = ("constant", "linear", "default", "quadratic", "cubic", "cancer")


def preset_library(name: str, variables: Sequence[str]) -> FeatureLibrary:
    """Named libraries over ``variables``.

    ``cancer`` is written for two variables and covers the tumour model's
    product and log terms.
    """
    variables = tuple(variables)
    if name == "constant":
        return polynomial_library(variables, 0)
    if name == "linear":
        return polynomial_library(variables, 1)
    if name == "default":
        return multilinear_library(variables, 2)
    if name == "quadratic":
        return polynomial_library(variables, 2)
    if name == "cubic":
        return polynomial_library(variables, 3)
    if name == "cancer":
        if len(variables) != 2:
            raise ValueError("the cancer preset needs exactly two variables")
        a, b = variables
        labels = ["1", a, b, f"{a}*{b}", f"{a}^2*{b}", f"{a}*{b}^2", f"log({a})", f"log({b})"]
        return FeatureLibrary.from_labels(variables, labels)
    raise ValueError(f"unknown library preset {name!r}; choose from {PRESETS}")
