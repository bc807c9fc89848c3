"""Parametric response-probability models with a logistic link.

The probability that the outcome is observed is modeled as

    pi(x, y; gamma) = 1 / (1 + exp(w(x, y)' gamma)),

where the feature map ``w`` is configured as a list of terms. Supported
terms: ``const``, ``y``, ``x<j>`` (1-based covariate index), and
``2log(x<j>)`` for log-scale covariates such as x1 = exp(z1/2).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

#: Evaluated probabilities are clamped to [PI_CLAMP, 1 - PI_CLAMP] so that
#: inverse-probability weights T/pi stay finite on extreme draws.
PI_CLAMP = 1e-6

_TERM_RE = re.compile(r"^(const|y|x(\d+)|2log\(x(\d+)\))$")


def _parse_term(term: str, r: int) -> str:
    m = _TERM_RE.match(term.strip())
    if m is None:
        raise ValueError(
            f"unknown feature term {term!r}; expected const, y, x<j> or 2log(x<j>)"
        )
    j = m.group(2) or m.group(3)
    if j is not None and not 1 <= int(j) <= r:
        raise ValueError(f"feature term {term!r} out of range for r={r} covariates")
    return m.group(1)


@dataclass(frozen=True)
class PropensityModel:
    """Logistic response model with a configurable linear index.

    Parameters
    ----------
    terms : sequence of str
        Feature terms building w(x, y), e.g. ``("const", "y")`` for the
        intercept-plus-outcome index or ``("2log(x1)", "y")`` when the
        index uses z1 = 2 log x1.
    r : int
        Covariate dimension the x-terms refer to.
    """

    terms: tuple[str, ...]
    r: int

    def __post_init__(self):
        parsed = tuple(_parse_term(t, self.r) for t in self.terms)
        if len(parsed) == 0:
            raise ValueError("feature map needs at least one term")
        if len(set(parsed)) != len(parsed):
            raise ValueError("duplicate feature terms")
        object.__setattr__(self, "terms", parsed)

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def uses_y(self) -> bool:
        return "y" in self.terms

    def feature_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Stack w(x_i, y_i) row-wise into an (n, p) matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        n = x.shape[0]
        cols = []
        for term in self.terms:
            if term == "const":
                cols.append(np.ones(n))
            elif term == "y":
                cols.append(y)
            elif term.startswith("2log"):
                j = int(term[7:-1])
                cols.append(2.0 * np.log(x[:, j - 1]))
            else:
                cols.append(x[:, int(term[1:]) - 1])
        return np.column_stack(cols)

    def _check_gamma(self, gamma: np.ndarray) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (self.p,):
            raise ValueError(
                f"gamma has shape {gamma.shape}, feature map has p={self.p} terms"
            )
        if not np.all(np.isfinite(gamma)):
            raise ValueError("gamma must be finite")
        return gamma

    def pi_values(self, gamma, features) -> tuple[np.ndarray, int]:
        """Vectorized pi = expit(-w'gamma), clamped; returns (pi, n_clamped)."""
        gamma = self._check_gamma(gamma)
        raw = expit(-(features @ gamma))
        pi = np.clip(raw, PI_CLAMP, 1.0 - PI_CLAMP)
        return pi, int(np.count_nonzero(raw != pi))

    def pi_gradients(self, gamma, features) -> tuple[np.ndarray, np.ndarray, int]:
        """Vectorized (pi, grad pi, n_clamped); grad pi = -pi (1-pi) w."""
        pi, n_clamped = self.pi_values(gamma, features)
        grad = -(pi * (1.0 - pi))[:, None] * features
        return pi, grad, n_clamped


def pi_value(model: PropensityModel, gamma, x, y) -> float:
    """Response probability at a single observation, clamped to (0, 1)."""
    feats = model.feature_matrix(np.atleast_2d(x), np.atleast_1d(float(y)))
    pi, _ = model.pi_values(gamma, feats)
    return float(pi[0])


def pi_gradient(model: PropensityModel, gamma, x, y) -> np.ndarray:
    """Gradient of pi with respect to gamma at a single observation."""
    feats = model.feature_matrix(np.atleast_2d(x), np.atleast_1d(float(y)))
    _, grad, _ = model.pi_gradients(gamma, feats)
    return grad[0]


@dataclass(frozen=True)
class ConstantPropensity:
    """Test stub: pi identically equal to ``value``, zero gradient.

    Useful for exercising no-missingness identities (with value=1 the
    weights T/pi reduce to T).
    """

    p: int = 1
    value: float = 1.0
    r: int = field(default=1)
    uses_y: bool = False

    def feature_matrix(self, x, y):
        return np.zeros((np.atleast_2d(x).shape[0], self.p))

    def pi_values(self, gamma, features):
        return np.full(features.shape[0], self.value), 0

    def pi_gradients(self, gamma, features):
        pi, _ = self.pi_values(gamma, features)
        return pi, np.zeros((features.shape[0], self.p)), 0
