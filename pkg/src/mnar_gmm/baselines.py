"""Comparison estimators: the MAR-naive IPW estimator and the kernel-based
efficient-score estimator (MK2) it is benchmarked against."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import root

from .data import ObservedSample
from .gmm_core import (
    DEFAULT_GAMMA_BOX,
    EstimationError,
    GmmFit,
    MomentSystem,
    _default_u,
    fit_two_step,
)
from .inference import VarianceEstimate, variance_estimate
from .linalg import sym_inverse
from .propensity import PropensityModel


@dataclass(frozen=True, eq=False)
class FeatureInstruments:
    """Instrument set equal to a covariate-only feature map.

    Duck-types the basis protocol of :class:`~mnar_gmm.gmm_core.MomentSystem`
    so the MAR estimator runs through the standard GMM pipeline with its own
    just-identified moment set.
    """

    model: PropensityModel

    @property
    def k(self) -> int:
        return self.model.p

    def matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.model.feature_matrix(x, np.zeros(x.shape[0]))


@dataclass(frozen=True, eq=False)
class MarFit:
    gamma: np.ndarray
    theta: float
    fit: GmmFit
    variance: VarianceEstimate

    @property
    def se_theta(self) -> float:
        return self.variance.se_theta

    @property
    def ci_theta(self) -> tuple[float, float]:
        return self.variance.ci_theta


def mar_estimate(
    sample: ObservedSample,
    mar_terms: tuple[str, ...],
    u_fn=_default_u,
    alpha: float = 0.05,
    box: float = DEFAULT_GAMMA_BOX,
) -> MarFit:
    """IPW estimator under a (misspecified) covariate-only response model.

    Fits the logistic model by GMM with the moment E[(1 - T/pi(X)) w(X)] = 0,
    w the model's own feature map, then IPW-averages U. The model must not
    reference y.
    """
    model = PropensityModel(terms=tuple(mar_terms), r=sample.r)
    if model.uses_y:
        raise ValueError("MAR response model must depend on covariates only")
    system = MomentSystem(
        basis=FeatureInstruments(model), model=model, u_fn=u_fn
    )
    fit = fit_two_step(system, sample, box=box)
    var = variance_estimate(system, sample, fit, alpha=alpha)
    return MarFit(gamma=fit.gamma_hat, theta=fit.theta_hat, fit=fit, variance=var)


@dataclass(frozen=True)
class Mk2Config:
    """Tuning for the kernel efficient-score estimator."""

    bandwidth: float
    score_tol: float = 1e-8
    root_xtol: float = 1e-12

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True, eq=False)
class Mk2Fit:
    gamma: np.ndarray
    theta: float
    score_norm: float
    converged: bool
    se_theta: float
    ci_theta: tuple[float, float]


class _Mk2Workspace:
    """Kernel machinery shared by the score, the solver and the sandwich.

    The Gaussian product-kernel matrix between query points (all rows) and
    donors (t=1 rows) is parameter free, so it is computed once. The
    conditional-expectation weights carry the donor's own 1/pi and the odds
    evaluated at the query covariates with the donor's outcome, exactly as
    the estimator is defined; a log-space max shift keeps the ratio stable
    for isolated queries at small bandwidths.
    """

    def __init__(self, sample: ObservedSample, model, config: Mk2Config, u_fn):
        if sample.n_observed == 0:
            raise EstimationError("no observed outcomes: E* is undefined")
        self.sample = sample
        self.model = model
        self.n = sample.n
        obs = sample.t == 1
        self.x_d = sample.x[obs]
        self.y_d = sample.y[obs]
        diff = (sample.x[:, None, :] - self.x_d[None, :, :]) / config.bandwidth
        self.log_kernel = -0.5 * np.einsum("ijk,ijk->ij", diff, diff)
        self.feats_own = model.feature_matrix(sample.x, sample.y_filled)
        # features at (query x_i, donor y_j): p slabs of (n, n_obs)
        n, m = self.n, self.x_d.shape[0]
        self.feats_cross = np.empty((model.p, n, m))
        for col, term in enumerate(model.terms):
            own = self.feats_own[:, col]
            if term == "y":
                self.feats_cross[col] = np.broadcast_to(
                    model.feature_matrix(self.x_d, self.y_d)[:, col], (n, m)
                )
            else:
                self.feats_cross[col] = np.broadcast_to(own[:, None], (n, m))
        self.u_vals = np.asarray(u_fn(sample.x, sample.y_filled), dtype=float)
        # U at (query x_i, donor y_j)
        x_rep = np.repeat(sample.x, m, axis=0)
        y_rep = np.tile(self.y_d, n)
        self.u_cross = np.asarray(u_fn(x_rep, y_rep), dtype=float).reshape(n, m)

    def _estar_weights(self, gamma):
        feats_d = self.model.feature_matrix(self.x_d, self.y_d)
        pi_d, _ = self.model.pi_values(gamma, feats_d)
        idx_cross = np.einsum("pnm,p->nm", self.feats_cross, gamma)
        from scipy.special import expit

        pi_cross = np.clip(expit(-idx_cross), 1e-12, 1 - 1e-12)
        odds_cross = (1.0 - pi_cross) / pi_cross
        log_w = self.log_kernel + np.log(odds_cross) - np.log(pi_d)[None, :]
        shift = log_w.max(axis=1, keepdims=True)
        w = np.exp(log_w - shift)
        den = w.sum(axis=1)
        if np.any(den <= 0.0) or not np.all(np.isfinite(den)):
            raise EstimationError(
                "conditional-expectation denominator vanished; "
                "bandwidth too small"
            )
        return w, den, pi_cross

    def conditional_means(self, gamma):
        """E*[grad pi/(1-pi) | x_i] (n, p) and E*[U | x_i] (n,)."""
        w, den, pi_cross = self._estar_weights(gamma)
        # grad pi/(1-pi) = -pi * w(x, y) for the logistic link
        e_score = np.empty((self.n, self.model.p))
        for col in range(self.model.p):
            g = -pi_cross * self.feats_cross[col]
            e_score[:, col] = (w * g).sum(axis=1) / den
        e_u = (w * self.u_cross).sum(axis=1) / den
        return e_score, e_u

    def score_rows(self, gamma, theta):
        """Per-observation stacked scores (S1', S2), an (n, p+1) matrix."""
        e_score, e_u = self.conditional_means(gamma)
        pi_own, _ = self.model.pi_values(gamma, self.feats_own)
        resid = 1.0 - self.sample.t / pi_own
        s1 = -resid[:, None] * e_score
        s2 = -self.sample.t * self.u_vals / pi_own + theta - resid * e_u
        return np.column_stack([s1, s2])

    def profiled_theta(self, gamma) -> float:
        """theta solving the mean of S2 = 0 (it enters linearly)."""
        _, e_u = self.conditional_means(gamma)
        pi_own, _ = self.model.pi_values(gamma, self.feats_own)
        resid = 1.0 - self.sample.t / pi_own
        return float(
            np.mean(self.sample.t * self.u_vals / pi_own + resid * e_u)
        )

    def mean_s1(self, gamma):
        e_score, _ = self.conditional_means(gamma)
        pi_own, _ = self.model.pi_values(gamma, self.feats_own)
        resid = 1.0 - self.sample.t / pi_own
        return (-resid[:, None] * e_score).mean(axis=0)


def estar(sample, model, gamma, g: Callable, x, h: float) -> float:
    """Kernel conditional expectation E*[g(Z) | X = x] at a single point.

    ``g(x, y)`` is evaluated at the query covariates with each donor's
    outcome, mirroring how the score estimator reads the display.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    obs = sample.t == 1
    if not np.any(obs):
        raise EstimationError("no observed outcomes: E* is undefined")
    x_d = sample.x[obs]
    y_d = sample.y[obs]
    feats_d = model.feature_matrix(x_d, y_d)
    pi_d, _ = model.pi_values(gamma, feats_d)
    x_q = np.broadcast_to(x, (x_d.shape[0], x.shape[0]))
    feats_q = model.feature_matrix(x_q, y_d)
    pi_q, _ = model.pi_values(gamma, feats_q)
    odds_q = (1.0 - pi_q) / pi_q
    log_w = -0.5 * np.sum(((x - x_d) / h) ** 2, axis=1) + np.log(odds_q) - np.log(pi_d)
    shift = log_w.max()
    w = np.exp(log_w - shift)
    den = w.sum()
    if den <= 0 or not np.isfinite(den):
        raise EstimationError("E* denominator vanished; bandwidth too small")
    g_vals = np.asarray([g(x, y) for y in y_d], dtype=float)
    return float((w * g_vals).sum() / den)


def mk2_estimate(
    sample: ObservedSample,
    model,
    config: Mk2Config,
    u_fn=_default_u,
    alpha: float = 0.05,
    starts: Optional[list] = None,
) -> Mk2Fit:
    """Solve the stacked kernel score equations for (gamma, theta).

    theta is profiled out of the scalar score; the remaining p equations
    are solved by a Powell hybrid root finder from a few fixed starts.
    The reported covariance is a sandwich on the estimated score system
    (a stand-in: the benchmark's own variance construction is not
    reproducible from its description).
    """
    ws = _Mk2Workspace(sample, model, config, u_fn)
    if starts is None:
        starts = [np.zeros(model.p), np.full(model.p, 0.5), np.full(model.p, -0.5)]
    best = None
    for start in starts:
        res = root(
            ws.mean_s1, np.asarray(start, float), method="hybr",
            options={"xtol": config.root_xtol},
        )
        norm = float(np.linalg.norm(ws.mean_s1(res.x)))
        if best is None or norm < best[1]:
            best = (res.x, norm)
        if norm < config.score_tol:
            break
    gamma, score_norm = best
    converged = score_norm < config.score_tol
    theta = ws.profiled_theta(gamma)

    eta = np.append(gamma, theta)
    rows = ws.score_rows(gamma, theta)
    meat = rows.T @ rows / ws.n
    bread = np.zeros((model.p + 1, model.p + 1))
    for k in range(model.p + 1):
        step = 1e-5 * max(1.0, abs(eta[k]))
        up, dn = eta.copy(), eta.copy()
        up[k] += step
        dn[k] -= step
        bread[:, k] = (
            ws.score_rows(up[:-1], up[-1]).mean(axis=0)
            - ws.score_rows(dn[:-1], dn[-1]).mean(axis=0)
        ) / (2 * step)
    bread_inv = np.linalg.inv(bread)
    v = bread_inv @ meat @ bread_inv.T
    se = float(np.sqrt(max(v[-1, -1], 0.0) / ws.n))
    from scipy.stats import norm as _norm

    z = _norm.ppf(1 - alpha / 2)
    return Mk2Fit(
        gamma=gamma,
        theta=theta,
        score_norm=score_norm,
        converged=converged,
        se_theta=se,
        ci_theta=(theta - z * se, theta + z * se),
    )
