"""Benchmark definitions: parameter boxes, inflow profiles and targets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, OutOfRangeWarning

STOKES_TD = "stokes_td"
NS_STEADY = "ns_steady"
PROBLEMS = (STOKES_TD, NS_STEADY)

# (viscosity, stretch, target amplitude)
STOKES_BOX = ((0.01, 1.0), (1.0, 2.0), (0.01, 1.0))
# inflow amplitude; the text states [0.5, 1.5], the reported experiment [0.7, 1.5]
NS_BOX = ((0.7, 1.5),)
NS_BOX_TEXT = ((0.5, 1.5),)


def check_problem(problem):
    if problem not in PROBLEMS:
        raise InvalidArgumentError(f"unknown problem id {problem!r}; expected one of {PROBLEMS}")
    return problem


def default_box(problem):
    return STOKES_BOX if check_problem(problem) == STOKES_TD else NS_BOX


@dataclass(frozen=True)
class ParameterPoint:
    """A parameter vector tagged with its problem id.

    Points outside ``box`` are allowed (extrapolation) and flagged through
    :attr:`extrapolated`.
    """

    problem: str
    values: tuple
    box: tuple = field(default=None, compare=False)

    def __post_init__(self):
        check_problem(self.problem)
        values = tuple(float(v) for v in np.atleast_1d(self.values))
        arity = 3 if self.problem == STOKES_TD else 1
        if len(values) != arity:
            raise InvalidArgumentError(
                f"{self.problem} expects {arity} parameter component(s), got {len(values)}"
            )
        object.__setattr__(self, "values", values)
        if self.box is None:
            object.__setattr__(self, "box", default_box(self.problem))

    def __getitem__(self, i):
        return self.values[i]

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    @property
    def extrapolated(self):
        return not all(lo <= v <= hi for v, (lo, hi) in zip(self.values, self.box))

    def warn_if_outside(self):
        if self.extrapolated:
            warnings.warn(f"{self.problem} parameter {self.values} outside {self.box}",
                          OutOfRangeWarning, stacklevel=2)
        return self

    def as_array(self):
        return np.array(self.values)


def make_mu(problem, values, box=None):
    if isinstance(values, ParameterPoint):
        return values
    return ParameterPoint(problem, tuple(np.atleast_1d(values)), box)


def inflow_profile(problem, mu, x2, scale=1.0):
    """First component of the inlet velocity at heights ``x2``."""
    x2 = np.asarray(x2, dtype=float)
    if check_problem(problem) == STOKES_TD:
        # printed as 10(x2 - 1)(1 - x2); nonpositive, kept verbatim
        return scale * 10.0 * (x2 - 1.0) * (1.0 - x2)
    return scale * 10.0 * mu[0] * x2 * (2.0 - x2)


def target_profile(problem, mu, x2):
    """First component of the desired velocity at heights ``x2``."""
    y = np.asarray(x2, dtype=float)
    if check_problem(problem) == STOKES_TD:
        return mu[2] * (8.0 * (y**3 - y**2 - y + 1.0) + 2.0 * (-y**3 - y**2 + y + 1.0))
    s = y - 1.0
    return 10.0 * mu[0] * (0.8 * (s**3 - s**2 - s + 1.0) + 0.2 * (-s**3 - s**2 + y))
