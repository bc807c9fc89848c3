"""Data-driven choice of the number of moments K.

Two criteria:

* ``balance`` — refit per K and minimize the aggregate Kolmogorov-Smirnov
  distance between the plain and the IPW-weighted empirical covariate CDFs.
* ``mse`` — evaluate the Donald-Newey higher-order MSE of the propensity
  coefficients at a single preliminary estimate and minimize over K.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import make_basis
from .data import ObservedSample
from .gmm_core import (
    DEFAULT_GAMMA_BOX,
    EstimationError,
    GmmFit,
    MomentSystem,
    _Workspace,
    _default_u,
    fit_two_step,
    step1_estimate,
)
from .linalg import SingularMatrixError, sym_inverse


class KSelectionError(EstimationError):
    """No candidate K produced a usable criterion value."""


def default_k_max(r: int) -> int:
    """Upper bound of the K grid: 7 for scalar covariates, 10 otherwise."""
    return 7 if r <= 1 else 10


def _ipw_weights(sample: ObservedSample, model, gamma) -> np.ndarray:
    feats = model.feature_matrix(sample.x, sample.y_filled)
    pi, _ = model.pi_values(gamma, feats)
    return sample.t / pi


def weighted_cdf(sample: ObservedSample, model, gamma, j: int, x: float) -> float:
    """IPW-weighted empirical CDF of covariate j at x (not capped at 1)."""
    w = _ipw_weights(sample, model, gamma)
    return float(np.sum(w * (sample.x[:, j] <= x)) / sample.n)


def _sup_cdf_gap(xj: np.ndarray, w: np.ndarray) -> float:
    """sup_x |F_plain(x) - F_weighted(x)| for one coordinate.

    Both CDFs are right-continuous step functions jumping at the sample
    points, so the sup is attained at a jump from one side or the other;
    ties are merged so the step values are exact.
    """
    order = np.argsort(xj, kind="stable")
    xs = xj[order]
    n = xs.shape[0]
    cum_plain = np.arange(1, n + 1, dtype=float)
    cum_w = np.cumsum(w[order])
    # index of the last row in each tie group = CDF value at that point
    last = np.nonzero(np.r_[xs[1:] != xs[:-1], True])[0]
    f_plain = cum_plain[last] / n
    f_w = cum_w[last] / n
    gap = np.abs(f_plain - f_w)
    gap_left = np.abs(np.r_[0.0, f_plain[:-1] - f_w[:-1]])
    return float(max(gap.max(), gap_left.max()))


def balance_criterion(sample: ObservedSample, model, gamma) -> float:
    """Aggregate KS distance D_N between plain and weighted covariate CDFs."""
    w = _ipw_weights(sample, model, gamma)
    return sum(_sup_cdf_gap(sample.x[:, j], w) for j in range(sample.r))


@dataclass(frozen=True, eq=False)
class DonaldNeweyParts:
    """All sample quantities entering the higher-order MSE criterion."""

    n: int
    k: int
    rho: np.ndarray          # (n,)   1 - T/pi at the preliminary estimate
    grad_rho: np.ndarray     # (n, p)
    upsilon: np.ndarray      # (K, K) rho^2-weighted basis second moment
    gamma_mat: np.ndarray    # (K, p)
    omega: np.ndarray        # (p, p)
    d_tilde: np.ndarray      # (n, p)
    eta_tilde: np.ndarray    # (n, p)
    xi_diag: np.ndarray      # (n,)
    d_star: np.ndarray       # (n, p)
    upsilon_inv: np.ndarray
    omega_inv: np.ndarray


def donald_newey_parts(
    sample: ObservedSample, basis, model, gamma_check
) -> DonaldNeweyParts:
    """Assemble the criterion inputs at a preliminary estimate gamma_check."""
    system = MomentSystem(basis=basis, model=model)
    ws = _Workspace(system, sample)
    n = ws.n
    pi, grad_pi, _ = model.pi_gradients(gamma_check, ws.feats)
    rho = 1.0 - ws.t / pi
    grad_rho = (ws.t / pi**2)[:, None] * grad_pi
    u = ws.u_mat
    upsilon = u.T @ ((rho**2)[:, None] * u) / n
    upsilon_inv = sym_inverse(upsilon, "Upsilon").inverse
    gamma_mat = u.T @ grad_rho / n
    omega = gamma_mat.T @ upsilon_inv @ gamma_mat
    omega_inv = sym_inverse(omega, "Omega").inverse
    gram_inv = sym_inverse(ws.gram, "basis Gram matrix").inverse
    d_tilde = u @ gram_inv @ gamma_mat
    eta_tilde = grad_rho - d_tilde
    xi_diag = np.einsum("ij,jk,ik->i", u, upsilon_inv, u) / n
    d_star = u @ upsilon_inv @ gamma_mat
    return DonaldNeweyParts(
        n=n,
        k=basis.k,
        rho=rho,
        grad_rho=grad_rho,
        upsilon=upsilon,
        gamma_mat=gamma_mat,
        omega=omega,
        d_tilde=d_tilde,
        eta_tilde=eta_tilde,
        xi_diag=xi_diag,
        d_star=d_star,
        upsilon_inv=upsilon_inv,
        omega_inv=omega_inv,
    )


def bias_term(parts: DonaldNeweyParts, tvec) -> float:
    """Higher-order bias component in direction t."""
    a = parts.omega_inv @ np.asarray(tvec, dtype=float)
    return float(np.sum(parts.xi_diag * parts.rho * (parts.eta_tilde @ a)))


def variance_term(parts: DonaldNeweyParts, tvec) -> float:
    """Higher-order variance component in direction t."""
    tvec = np.asarray(tvec, dtype=float)
    a = parts.omega_inv @ tvec
    inner = (parts.d_star * (parts.rho**2)[:, None] - parts.grad_rho) @ a
    correction = float(
        tvec
        @ parts.omega_inv
        @ parts.gamma_mat.T
        @ parts.upsilon_inv
        @ parts.gamma_mat
        @ parts.omega_inv
        @ tvec
    )
    return float(np.sum(parts.xi_diag * inner**2) - correction)


def mse_criterion(parts: DonaldNeweyParts) -> float:
    """S_GMM(K): higher-order MSE summed over the coordinate directions."""
    p = parts.gamma_mat.shape[1]
    total = 0.0
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        total += bias_term(parts, e) ** 2 / parts.n + variance_term(parts, e)
    return float(total)


@dataclass(frozen=True, eq=False)
class KScanResult:
    method: str
    candidates: tuple[int, ...]
    criteria: dict[int, float]
    chosen_k: int
    fits: dict[int, GmmFit]
    skipped: dict[int, str]

    @property
    def chosen_fit(self) -> Optional[GmmFit]:
        return self.fits.get(self.chosen_k)


def select_k(
    sample: ObservedSample,
    model,
    method: str = "balance",
    k_max: Optional[int] = None,
    u_fn=_default_u,
    standardize: bool = True,
    box: float = DEFAULT_GAMMA_BOX,
) -> KScanResult:
    """Scan K = p..k_max and return the criterion path plus the argmin.

    The balance method refits the full two-step estimator per K (the
    weighted CDF depends on K through gamma-hat); the mse method evaluates
    every K at one preliminary step-1 estimate obtained at K = p. Ties
    break to the smallest K; candidates whose linear algebra degenerates
    are skipped with a recorded reason.
    """
    if method not in ("balance", "mse"):
        raise ValueError(f"unknown selection method {method!r}")
    p = model.p
    if k_max is None:
        k_max = default_k_max(sample.r)
    if k_max < p:
        raise ValueError(f"k_max={k_max} is below the number of parameters p={p}")
    if sample.n <= k_max:
        raise ValueError(f"need N > k_max; got N={sample.n}, k_max={k_max}")
    candidates = tuple(range(p, k_max + 1))
    criteria: dict[int, float] = {}
    fits: dict[int, GmmFit] = {}
    skipped: dict[int, str] = {}

    gamma_check = None
    if method == "mse":
        basis_p = make_basis(sample.x, p, standardize=standardize)
        step1 = step1_estimate(
            MomentSystem(basis=basis_p, model=model, u_fn=u_fn), sample, box=box
        )
        gamma_check = step1.gamma

    for k in candidates:
        basis = make_basis(sample.x, k, standardize=standardize)
        try:
            if method == "balance":
                fit = fit_two_step(
                    MomentSystem(basis=basis, model=model, u_fn=u_fn),
                    sample,
                    box=box,
                )
                fits[k] = fit
                value = balance_criterion(sample, model, fit.gamma_hat)
            else:
                parts = donald_newey_parts(sample, basis, model, gamma_check)
                value = mse_criterion(parts)
        except (SingularMatrixError, EstimationError) as exc:
            skipped[k] = str(exc)
            continue
        if not np.isfinite(value):
            skipped[k] = "criterion not finite"
            continue
        criteria[k] = value

    if not criteria:
        raise KSelectionError(
            f"every candidate K was skipped: {skipped}"
        )
    chosen = min(criteria, key=lambda k: (criteria[k], k))
    return KScanResult(
        method=method,
        candidates=candidates,
        criteria=criteria,
        chosen_k=chosen,
        fits=fits,
        skipped=skipped,
    )
