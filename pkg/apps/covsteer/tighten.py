"""
covsteer - Constraint Tightening
Boole risk allocation, Cantelli tightening, the nominal covariance schedule
and the tangent-line upper bounds that make the tightened constraints affine
in the covariance variables.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import serialization
from .exceptions import DimensionError, ValidationError
from .model import HalfspaceConstraint, ProblemInstance


LAMBDA_FLOOR = 1e-12
INDEFINITE_TOL = 1e-12


def allocate_risk(p_total: float, n: int, weights: Optional[Sequence[float]] = None) -> List[float]:
    """
    Split a joint violation budget over n constraints (Boole's inequality).

    Args:
        p_total: Joint budget in (0, 0.5)
        n: Number of constraints (>= 1)
        weights: Optional positive weights; uniform split when omitted

    Returns:
        Per-constraint budgets summing to p_total

    Raises:
        ValidationError: On an out-of-range budget, count or weight vector
    """
    if not (0.0 < p_total < 0.5):
        raise ValidationError(f"p_total must lie in (0, 0.5), got {p_total}", field="p_total")
    if n < 1:
        raise ValidationError(f"need at least one constraint, got n={n}", field="n")

    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValidationError(f"weights must have length {n}, got {w.shape}", field="weights")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise ValidationError("weights must be finite and nonnegative", field="weights")
        if not np.any(w > 0.0):
            raise ValidationError("weights must not all be zero", field="weights")
        if np.any(w == 0.0):
            raise ValidationError("every constraint needs a positive share of the risk budget", field="weights")

    shares = [float(p_total * wi / w.sum()) for wi in w]
    # last entry absorbs rounding so the sum is p_total
    shares[-1] = p_total - math.fsum(shares[:-1])
    return shares


def cantelli_factor(p: float) -> float:
    """sqrt((1 - p) / p)."""
    return math.sqrt((1.0 - p) / p)


def _quad(alpha: np.ndarray, Sigma: np.ndarray) -> float:
    alpha = np.asarray(alpha, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (alpha.size, alpha.size):
        raise DimensionError(f"covariance must be {alpha.size}x{alpha.size}, got {Sigma.shape}", "Sigma")
    return float(alpha @ Sigma @ alpha)


def cantelli_residual(con: HalfspaceConstraint, x_bar: np.ndarray, Sigma: np.ndarray) -> float:
    """
    alpha^T x_bar + sqrt(alpha^T Sigma alpha) sqrt((1-p)/p) - beta.

    A nonpositive residual bounds Pr(alpha^T x >= beta) by p for every
    distribution with these first two moments.
    """
    var = _quad(con.alpha, Sigma)
    if var < -INDEFINITE_TOL:
        raise ValidationError(f"alpha^T Sigma alpha = {var:.3e} is negative; Sigma is indefinite", field="Sigma")
    return float(con.alpha @ np.asarray(x_bar, dtype=float)) + math.sqrt(max(var, 0.0)) * cantelli_factor(con.p) - con.beta


def tangent_coefficients(con: HalfspaceConstraint, lam: float):
    """
    Coefficients (a, b) of the tangent bound a * (alpha^T Sigma alpha) + b of
    sqrt(alpha^T Sigma alpha) * sqrt((1-p)/p), taken at alpha^T Sigma alpha = lam.
    """
    if not (lam >= LAMBDA_FLOOR):
        raise ValidationError(f"linearization point {lam:.3e} below floor {LAMBDA_FLOOR:g}", field="lambda")
    kappa = cantelli_factor(con.p)
    root = math.sqrt(lam)
    return kappa / (2.0 * root), kappa * root / 2.0


def tangent_residual(con: HalfspaceConstraint, lam: float, x_bar: np.ndarray, Sigma_bar: np.ndarray) -> float:
    """Affine-in-Sigma upper bound of ``cantelli_residual``; exact at lam = alpha^T Sigma alpha."""
    slope, offset = tangent_coefficients(con, lam)
    return float(con.alpha @ np.asarray(x_bar, dtype=float)) + offset + slope * _quad(con.alpha, Sigma_bar) - con.beta


def nominal_schedule(Sigma_I: np.ndarray, Sigma_F: np.ndarray, N: int) -> np.ndarray:
    """Linear interpolation from Sigma_I (k = 0) to Sigma_F (k = N-1), shape (N, n, n)."""
    Sigma_I = np.asarray(Sigma_I, dtype=float)
    Sigma_F = np.asarray(Sigma_F, dtype=float)
    if Sigma_I.shape != Sigma_F.shape or Sigma_I.ndim != 2:
        raise DimensionError(f"Sigma_I {Sigma_I.shape} and Sigma_F {Sigma_F.shape} differ", "Sigma_F")
    if N == 1:
        return Sigma_I[None, :, :].copy()
    t = np.arange(N, dtype=float) / (N - 1)
    out = Sigma_I[None] + t[:, None, None] * (Sigma_F - Sigma_I)[None]
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def linearization_points(schedule: np.ndarray, constraints: Sequence[HalfspaceConstraint]) -> np.ndarray:
    """lambda[i, k] = max(alpha_i^T schedule[k] alpha_i, LAMBDA_FLOOR)."""
    schedule = np.asarray(schedule, dtype=float)
    if not constraints:
        return np.zeros((0, schedule.shape[0]))
    alpha = np.vstack([c.alpha for c in constraints])
    if schedule.ndim != 3 or schedule.shape[1:] != (alpha.shape[1], alpha.shape[1]):
        raise DimensionError(
            f"schedule of shape {schedule.shape} does not match constraint dimension {alpha.shape[1]}",
            "schedule",
        )
    lam = np.einsum("ia,kab,ib->ik", alpha, schedule, alpha)
    return np.maximum(lam, LAMBDA_FLOOR)


@dataclass(frozen=True, eq=False)
class LinearizationSchedule:
    """Tangent points per constraint and step; rows index constraints, columns k."""
    lambda_state: np.ndarray   # (N_s, N)
    lambda_input: np.ndarray   # (N_c, N)
    Sigma_nom: np.ndarray      # (N, n_x, n_x)

    @property
    def N(self) -> int:
        return self.Sigma_nom.shape[0]


def default_input_points(constraints: Sequence[HalfspaceConstraint], N: int) -> np.ndarray:
    """Input variance at which each Cantelli bound is active for a zero-mean input."""
    if not constraints:
        return np.zeros((0, N))
    lam = [max(c.beta ** 2 * c.p / (1.0 - c.p), LAMBDA_FLOOR) for c in constraints]
    return np.repeat(np.array(lam)[:, None], N, axis=1)


def initial_schedule(instance: ProblemInstance) -> LinearizationSchedule:
    """First-iterate schedule: interpolate Sigma_I -> Sigma_F_eff for the state."""
    boundary = instance.boundary
    Sigma_nom = nominal_schedule(boundary.Sigma_I, boundary.Sigma_F_eff, boundary.N)
    return LinearizationSchedule(
        lambda_state=linearization_points(Sigma_nom, instance.chance.state_constraints),
        lambda_input=default_input_points(instance.chance.input_constraints, boundary.N),
        Sigma_nom=Sigma_nom,
    )


def schedule_from_solution(instance: ProblemInstance, sol) -> LinearizationSchedule:
    """Re-linearize at the relaxed covariances of a previous solve."""
    N = instance.N
    Sigma_x = np.asarray(sol.Sigma_bar_x, dtype=float)[:N]
    Sigma_u = np.asarray(sol.Sigma_bar_u, dtype=float)[:N]
    return LinearizationSchedule(
        lambda_state=linearization_points(Sigma_x, instance.chance.state_constraints),
        lambda_input=linearization_points(Sigma_u, instance.chance.input_constraints),
        Sigma_nom=Sigma_x,
    )


def schedule_to_csv(schedule: LinearizationSchedule) -> str:
    rows = []
    for kind, lam in (("state", schedule.lambda_state), ("input", schedule.lambda_input)):
        for i in range(lam.shape[0]):
            for k in range(lam.shape[1]):
                rows.append([kind, i, k, float(lam[i, k])])
    return serialization.csv_text(["kind", "constraint_index", "k", "lambda"], rows)
