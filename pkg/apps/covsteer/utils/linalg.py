"""
Symmetric-matrix helpers used across the moment, tightening and SDP layers.
"""

import numpy as np
import scipy.linalg

from ..exceptions import ValidationError


PSD_CLAMP_TOL = 1e-10


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Return (M + M^T) / 2."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def min_eig(M: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part of M."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(scipy.linalg.eigvalsh(symmetrize(M))[0])


def clamp_psd(M: np.ndarray, tol: float = PSD_CLAMP_TOL, field: str = "matrix") -> np.ndarray:
    """
    Clamp eigenvalues in [-tol, 0) to zero.

    Args:
        M: Square matrix (symmetrized first)
        tol: Largest negative eigenvalue magnitude that is tolerated
        field: Field name for error messages

    Returns:
        Symmetric PSD matrix (M itself, symmetrized, when no clamp was needed)

    Raises:
        ValidationError: If an eigenvalue lies below -tol
    """
    S = symmetrize(M)
    if S.size == 0:
        return S
    w, V = scipy.linalg.eigh(S)
    if w[0] < -tol:
        raise ValidationError(
            f"{field} is not positive semidefinite (min eigenvalue {w[0]:.3e})",
            field=field,
        )
    if w[0] >= 0.0:
        return S
    w = np.where(w < 0.0, 0.0, w)
    return symmetrize((V * w) @ V.T)


def psd_sqrt(M: np.ndarray, field: str = "matrix") -> np.ndarray:
    """Symmetric square root F with F @ F = M, via eigendecomposition."""
    S = clamp_psd(M, field=field)
    if S.size == 0:
        return S
    w, V = scipy.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    return symmetrize((V * np.sqrt(w)) @ V.T)
