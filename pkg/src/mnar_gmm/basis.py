"""Power-series sieve basis with multi-index enumeration and diagnostics.

The basis consists of monomials x~^lambda(k) of the standardized covariate,
ordered by total degree with graded-lexicographic tie-breaking, and always
starting with the constant (lambda(1) = 0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class GramConditioningWarning(UserWarning):
    """Empirical basis Gram matrix is close to rank deficient."""


def enumerate_multi_indices(r: int, k: int) -> list[tuple[int, ...]]:
    """First ``k`` multi-indices in r variables, graded lexicographic order.

    Total degree is nondecreasing; within a degree, indices are ordered
    lexicographically with the first coordinate heaviest, e.g. for r=2,
    degree 2: (2,0), (1,1), (0,2).
    """
    if r < 1 or k < 1:
        raise ValueError("need r >= 1 and k >= 1")
    out: list[tuple[int, ...]] = []
    degree = 0
    while len(out) < k:
        out.extend(sorted(_compositions(degree, r), reverse=True))
        degree += 1
    return out[:k]


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Immutable description of a standardized power-series basis.

    ``shift`` and ``scale`` define the per-coordinate affine map
    x~ = (x - shift) / scale applied before monomial evaluation.
    """

    r: int
    k: int
    multi_indices: tuple[tuple[int, ...], ...]
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.multi_indices[0] != (0,) * self.r:
            raise ValueError("first basis function must be the constant")
        degrees = [sum(m) for m in self.multi_indices]
        if any(a > b for a, b in zip(degrees, degrees[1:])):
            raise ValueError("total degree must be nondecreasing")
        if len(set(self.multi_indices)) != self.k:
            raise ValueError("multi-indices must be distinct")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale must be positive")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.shift) / self.scale

    def matrix(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the basis at each row of x; returns an (n, K) matrix."""
        xt = self.standardize(x)
        n = xt.shape[0]
        max_deg = max(sum(m) for m in self.multi_indices)
        # per-coordinate power table: powers[j][d] = x~_j ** d
        powers = [
            np.vander(xt[:, j], max_deg + 1, increasing=True) for j in range(self.r)
        ]
        out = np.empty((n, self.k))
        for col, lam in enumerate(self.multi_indices):
            v = np.ones(n)
            for j, d in enumerate(lam):
                if d:
                    v = v * powers[j][:, d]
            out[:, col] = v
        return out


def make_basis(
    x: np.ndarray, k: int, standardize: bool = True, shift=None, scale=None
) -> BasisSpec:
    """Build a K-function basis, standardizing covariates by sample moments.

    Raw powers of skewed covariates destroy Gram conditioning; the affine
    map changes nothing about the span (the constant is always included).
    Explicit ``shift``/``scale`` override the sample moments.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = x.shape[1]
    if shift is None:
        shift = x.mean(axis=0) if standardize else np.zeros(r)
    if scale is None:
        scale = x.std(axis=0) if standardize else np.ones(r)
        scale = np.where(np.asarray(scale) > 0, scale, 1.0)
    return BasisSpec(
        r=r,
        k=k,
        multi_indices=tuple(enumerate_multi_indices(r, k)),
        shift=np.asarray(shift, dtype=float),
        scale=np.asarray(scale, dtype=float),
    )


def eval_basis(spec: BasisSpec, x) -> np.ndarray:
    """Basis vector u_K(x) at a single covariate point."""
    return spec.matrix(np.atleast_2d(np.asarray(x, dtype=float)))[0]


@dataclass(frozen=True, eq=False)
class BasisGram:
    gram: np.ndarray
    min_eig: float
    max_eig: float


def gram_diagnostics(spec: BasisSpec, x: np.ndarray) -> BasisGram:
    """Empirical Gram matrix (1/N) sum u u' with extreme eigenvalues.

    Raises if N < K (the moment system would be rank deficient) and warns
    when the eigenvalue ratio indicates near-singularity.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n < spec.k:
        raise ValueError(f"need at least K={spec.k} observations, got {n}")
    u = spec.matrix(x)
    gram = u.T @ u / n
    eigs = np.linalg.eigvalsh(gram)
    min_eig, max_eig = float(eigs[0]), float(eigs[-1])
    if min_eig < 1e-8 * max_eig:
        warnings.warn(
            f"basis Gram nearly singular (min eig {min_eig:.3e}, "
            f"max eig {max_eig:.3e}); consider a smaller K",
            GramConditioningWarning,
            stacklevel=2,
        )
    return BasisGram(gram=gram, min_eig=min_eig, max_eig=max_eig)
