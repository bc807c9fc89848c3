"""Sandwich variance estimation, confidence intervals, and the population
variance oracle used to check consistency on known designs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .basis import make_basis
from .gmm_core import GmmFit, MomentSystem, _Workspace
from .linalg import SingularMatrixError, sym_inverse


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    b_hat: np.ndarray
    d_hat: np.ndarray
    v_hat: np.ndarray
    se_theta: float
    ci_theta: tuple[float, float]
    level: float


def b_hat(system, sample, gamma) -> np.ndarray:
    """Jacobian of the sample moment vector at gamma, a (K+1, p+1) matrix.

    Block structure [[A, 0], [b', 1]]: the theta column is exactly the last
    unit vector. Only rows with t=1 contribute to the gamma block, carrying
    the weight T/pi^2 from differentiating T/pi.
    """
    return _Workspace(system, sample).jacobian(gamma)


def v_hat(
    bhat: np.ndarray,
    dhat: np.ndarray,
    *,
    n: int,
    theta_hat: float,
    alpha: float = 0.05,
) -> VarianceEstimate:
    """V-hat = (B' D^{-1} B)^{-1} with the normal-quantile CI for theta."""
    d_inv = sym_inverse(dhat, "moment covariance D-hat").inverse
    inner = bhat.T @ d_inv @ bhat
    try:
        v = sym_inverse(inner, "B' D^{-1} B").inverse
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"{exc}; check the propensity model or reduce K"
        ) from exc
    v = (v + v.T) / 2.0
    se = float(np.sqrt(v[-1, -1] / n))
    z = norm.ppf(1.0 - alpha / 2.0)
    return VarianceEstimate(
        b_hat=bhat,
        d_hat=dhat,
        v_hat=v,
        se_theta=se,
        ci_theta=(theta_hat - z * se, theta_hat + z * se),
        level=1.0 - alpha,
    )


def variance_estimate(
    system, sample, fit: GmmFit, alpha: float = 0.05
) -> VarianceEstimate:
    """Variance of a two-step fit: B-hat at gamma-hat, D-hat from step II."""
    return v_hat(
        b_hat(system, sample, fit.gamma_hat),
        fit.d_hat,
        n=sample.n,
        theta_hat=fit.theta_hat,
        alpha=alpha,
    )


@dataclass(frozen=True, eq=False)
class PopulationMoments:
    """Monte Carlo approximation of the population B, D and V_K."""

    b: np.ndarray
    d: np.ndarray
    v_k: np.ndarray


def vk_population_oracle(
    scenario, k: int, m_draws: int = 1_000_000, seed: int = 0
) -> PopulationMoments:
    """Population V_K for a simulation scenario at the true parameters.

    Draws M complete (X, Y) pairs from the scenario and integrates the
    response indicator analytically (E[T|Z] = pi), which removes one layer
    of Monte Carlo noise without changing the estimand.
    """
    from . import dgp  # deferred: dgp pulls in no inference machinery

    scen = dgp.scenario_info(scenario)
    rng = np.random.default_rng(seed)
    x, y = dgp.sample_xy(scen.name, m_draws, rng)
    model = dgp.propensity_model(scen.name)
    basis = make_basis(x, k)
    u = basis.matrix(x)
    feats = model.feature_matrix(x, y)
    pi, grad_pi, _ = model.pi_gradients(scen.gamma0, feats)
    u_vals = y  # target functional U(Z) = Y in all scenarios
    theta0 = scen.theta0

    gp_over_pi = grad_pi / pi[:, None]
    b = np.zeros((k + 1, model.p + 1))
    b[:-1, :-1] = u.T @ gp_over_pi / m_draws
    b[-1, :-1] = u_vals @ gp_over_pi / m_draws
    b[-1, -1] = 1.0

    odds = (1.0 - pi) / pi
    d = np.zeros((k + 1, k + 1))
    d[:-1, :-1] = (odds[:, None] * u).T @ u / m_draws
    d[:-1, -1] = u.T @ (odds * u_vals) / m_draws
    d[-1, :-1] = d[:-1, -1]
    d[-1, -1] = float(
        np.mean(theta0**2 - 2.0 * theta0 * u_vals + u_vals**2 / pi)
    )

    d_inv = sym_inverse(d, "population D").inverse
    v_k = sym_inverse(b.T @ d_inv @ b, "population B' D^{-1} B").inverse
    return PopulationMoments(b=b, d=d, v_k=(v_k + v_k.T) / 2.0)
