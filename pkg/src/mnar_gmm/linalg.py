"""Ridge-protected symmetric matrix inversion shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: ridge is added when min eig < RIDGE_TRIGGER * max eig
RIDGE_TRIGGER = 1e-12
#: added ridge, relative to trace/K
RIDGE_SCALE = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    """Symmetric matrix is rank deficient beyond ridge rescue."""


@dataclass(frozen=True, eq=False)
class SymInverse:
    inverse: np.ndarray
    ridge: float
    min_eig: float
    max_eig: float


def sym_inverse(mat: np.ndarray, what: str = "matrix") -> SymInverse:
    """Invert a symmetric matrix via eigendecomposition with a small ridge.

    A ridge of RIDGE_SCALE * trace/K is added when the spectrum indicates
    near singularity; if the ridged spectrum is still not positive the
    matrix is declared singular.
    """
    k = mat.shape[0]
    evals, evecs = np.linalg.eigh(mat)
    min_eig, max_eig = float(evals[0]), float(evals[-1])
    ridge = 0.0
    if max_eig <= 0:
        raise SingularMatrixError(f"{what} has no positive eigenvalues")
    if min_eig < RIDGE_TRIGGER * max_eig:
        ridge = RIDGE_SCALE * float(np.trace(mat)) / k
        evals = evals + ridge
        if evals[0] <= 0:
            raise SingularMatrixError(
                f"{what} is rank deficient beyond ridge rescue "
                f"(min eig {min_eig:.3e}, max eig {max_eig:.3e})"
            )
    inv = (evecs / evals) @ evecs.T
    return SymInverse(inverse=inv, ridge=ridge, min_eig=min_eig, max_eig=max_eig)
