"""Stacked moment system and the two-step GMM estimator.

The K+1 sample moments at (gamma, theta) are

    (1/N) sum_i [ (1 - T_i/pi_i) u_K(X_i)' ,  theta - (T_i/pi_i) U(Z_i) ]',

with pi_i = pi(Z_i; gamma). Rows with t=0 enter only through the basis
term (their weight T/pi is exactly zero), so missing outcomes are never
needed. theta appears linearly in the last moment and is profiled out of
every optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .data import ObservedSample
from .linalg import SingularMatrixError, SymInverse, sym_inverse

#: optimizer stops at this projected-gradient norm ...
GRAD_TOL = 1e-9
#: ... or after this many iterations, whichever comes first
MAX_ITER = 500
#: half-width of the default compact parameter box for gamma
DEFAULT_GAMMA_BOX = 10.0
#: number of random multi-start points (the origin is always added)
N_MULTISTART = 5
#: fixed entropy for the multi-start sampler: estimation is deterministic
_MULTISTART_SEED = 1729


class EstimationError(RuntimeError):
    pass


class MomentEvaluationError(EstimationError):
    pass


class WeightingMatrixError(EstimationError):
    pass


def _default_u(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Binds a sieve basis, a propensity model and a target functional U(Z).

    ``basis`` may be any object exposing ``k`` and ``matrix(x) -> (n, k)``;
    normally a :class:`~mnar_gmm.basis.BasisSpec`.
    """

    basis: object
    model: object
    u_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] = _default_u

    @property
    def k(self) -> int:
        return self.basis.k

    @property
    def p(self) -> int:
        return self.model.p


class _Workspace:
    """Precomputed per-(system, sample) arrays for fast moment evaluation."""

    def __init__(self, system: MomentSystem, sample: ObservedSample):
        if sample.n < system.k + 1 or sample.n < system.p + 1:
            raise ValueError(
                f"need N >= K+1 and N >= p+1; got N={sample.n}, "
                f"K={system.k}, p={system.p}"
            )
        self.system = system
        self.n = sample.n
        self.t = sample.t.astype(float)
        y_filled = sample.y_filled
        self.u_mat = system.basis.matrix(sample.x)  # (n, K)
        self.feats = system.model.feature_matrix(sample.x, y_filled)  # (n, p)
        u_vals = np.asarray(system.u_fn(sample.x, y_filled), dtype=float)
        self.u_vals = u_vals  # meaningful only where t=1
        self.gram = self.u_mat.T @ self.u_mat / self.n

    def pi(self, gamma):
        return self.system.model.pi_values(gamma, self.feats)

    def parts(self, gamma):
        """(pi, n_clamped, b, a): first-block moments b and a = IPW mean of U."""
        pi, n_clamped = self.pi(gamma)
        w = 1.0 - self.t / pi
        b = self.u_mat.T @ w / self.n
        a = np.sum(self.t * self.u_vals / pi) / self.n
        return pi, n_clamped, b, a

    def moments(self, gamma, theta):
        _, n_clamped, b, a = self.parts(gamma)
        return np.concatenate([b, [theta - a]]), n_clamped

    def g_matrix(self, gamma, theta):
        """Per-observation moment contributions, an (n, K+1) matrix."""
        pi, _ = self.pi(gamma)
        w = 1.0 - self.t / pi
        return np.column_stack(
            [w[:, None] * self.u_mat, theta - self.t * self.u_vals / pi]
        )

    def jacobian(self, gamma):
        """d moments / d (gamma, theta), a (K+1, p+1) matrix.

        Only t=1 rows contribute to the gamma block (the T factor), so the
        Jacobian is computable from observed data.
        """
        pi, grad_pi, _ = self.system.model.pi_gradients(gamma, self.feats)
        coef = self.t / pi**2
        jac = np.zeros((self.system.k + 1, self.system.p + 1))
        jac[:-1, :-1] = self.u_mat.T @ (coef[:, None] * grad_pi) / self.n
        jac[-1, :-1] = (coef * self.u_vals) @ grad_pi / self.n
        jac[-1, -1] = 1.0
        return jac


@dataclass(frozen=True, eq=False)
class Step1Fit:
    gamma: np.ndarray
    theta: float
    objective_value: float
    converged: bool
    n_clamps: int
    w0_inverse: np.ndarray


@dataclass(frozen=True, eq=False)
class Weighting:
    """Second-step weighting: the (ridged) inverse of D-hat."""

    d_hat: np.ndarray
    w: np.ndarray
    ridge: float


@dataclass(frozen=True, eq=False)
class GmmFit:
    gamma_hat: np.ndarray
    theta_hat: float
    step1: Step1Fit
    objective_value: float
    weighting: np.ndarray
    d_hat: np.ndarray
    n_clamps: int
    converged: bool
    k: int


def moment_vector(system, sample, gamma, theta) -> np.ndarray:
    """Sample moment vector (1/N) G_K(gamma, theta), length K+1."""
    ws = _Workspace(system, sample)
    m, n_clamped = ws.moments(gamma, theta)
    if not np.all(np.isfinite(m)):
        raise MomentEvaluationError(
            f"non-finite moment vector at gamma={gamma} "
            f"({n_clamped} of {ws.n} propensities clamped)"
        )
    return m


def objective(system, sample, gamma, theta, w: np.ndarray) -> float:
    """Quadratic form m' W m in the sample moments; W must be symmetric."""
    w = np.asarray(w, dtype=float)
    if w.shape != (system.k + 1, system.k + 1):
        raise ValueError("weighting matrix has wrong shape")
    if not np.allclose(w, w.T, atol=1e-10):
        raise ValueError("weighting matrix must be symmetric (within 1e-10)")
    m = moment_vector(system, sample, gamma, theta)
    return float(m @ w @ m)


def _profiled(ws: _Workspace, w: np.ndarray):
    """Objective in gamma with theta profiled out of the last moment.

    For fixed gamma the first-order condition in theta is linear:
    (W m)_last = 0. The gradient in gamma uses the envelope theorem.
    """
    w_last = w[-1, :-1]
    w_ll = w[-1, -1]

    def fun(gamma):
        _, n_clamped, b, a = ws.parts(gamma)
        resid = -(w_last @ b) / w_ll  # theta* - a
        m = np.concatenate([b, [resid]])
        wm = w @ m
        q = float(m @ wm)
        jac = ws.jacobian(gamma)
        grad = 2.0 * (jac[:, :-1].T @ wm)
        return q, grad, a + resid, n_clamped

    return fun


def _multistart_points(p: int, box: float) -> list[np.ndarray]:
    rng = np.random.default_rng(_MULTISTART_SEED)
    starts = [np.zeros(p)]
    starts.extend(rng.uniform(-box, box, (N_MULTISTART, p)))
    return starts


def _minimize(ws, w, starts, box):
    fun = _profiled(ws, w)
    bounds = [(-box, box)] * ws.system.p
    best = None
    for start in starts:
        res = minimize(
            lambda g: fun(g)[:2],
            np.clip(start, -box, box),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": MAX_ITER, "ftol": 1e-16, "gtol": GRAD_TOL},
        )
        if best is None or res.fun < best.fun:
            best = res
    q, _, theta, n_clamped = fun(best.x)
    return best.x, float(theta), float(q), bool(best.success), n_clamped


def step1_estimate(system, sample, box: float = DEFAULT_GAMMA_BOX) -> Step1Fit:
    """First step: minimize with the block-diagonal weighting W0^{-1}.

    W0 = diag(empirical basis Gram, 1); theta solves its first-order
    condition in closed form given gamma (here simply the IPW mean of U).
    """
    ws = _Workspace(system, sample)
    gram_inv = sym_inverse(ws.gram, "basis Gram matrix")
    k = system.k
    w0_inv = np.zeros((k + 1, k + 1))
    w0_inv[:k, :k] = gram_inv.inverse
    w0_inv[k, k] = 1.0
    gamma, theta, q, ok, n_clamped = _minimize(
        ws, w0_inv, _multistart_points(system.p, box), box
    )
    return Step1Fit(
        gamma=gamma,
        theta=theta,
        objective_value=q,
        converged=ok,
        n_clamps=n_clamped,
        w0_inverse=w0_inv,
    )


def best_weighting(system, sample, gamma, theta) -> Weighting:
    """Inverse of D-hat = (1/N) sum g g' evaluated at the step-1 estimates."""
    ws = _Workspace(system, sample)
    g = ws.g_matrix(gamma, theta)
    d_hat = g.T @ g / ws.n
    try:
        inv = sym_inverse(d_hat, "moment covariance D-hat")
    except SingularMatrixError as exc:
        raise WeightingMatrixError(
            f"{exc}; try a smaller K than {system.k}"
        ) from exc
    return Weighting(d_hat=d_hat, w=inv.inverse, ridge=inv.ridge)


def step2_estimate(
    system,
    sample,
    weighting: Weighting,
    step1: Step1Fit,
    box: float = DEFAULT_GAMMA_BOX,
) -> GmmFit:
    """Second step: minimize with W = D-hat^{-1}, warm-started at step 1."""
    ws = _Workspace(system, sample)
    gamma, theta, q, ok, n_clamped = _minimize(
        ws, weighting.w, [step1.gamma], box
    )
    return GmmFit(
        gamma_hat=gamma,
        theta_hat=theta,
        step1=step1,
        objective_value=q,
        weighting=weighting.w,
        d_hat=weighting.d_hat,
        n_clamps=n_clamped,
        converged=ok and step1.converged,
        k=system.k,
    )


def fit_two_step(system, sample, box: float = DEFAULT_GAMMA_BOX) -> GmmFit:
    """Full two-step pipeline: step 1, best weighting, step 2."""
    step1 = step1_estimate(system, sample, box=box)
    weighting = best_weighting(system, sample, step1.gamma, step1.theta)
    return step2_estimate(system, sample, weighting, step1, box=box)
