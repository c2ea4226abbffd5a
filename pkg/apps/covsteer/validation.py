"""
covsteer - Problem Instance Validation
Enumerates every violated invariant of a ProblemInstance. Violations are data:
``validate`` never raises and never mutates its input.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .model import HalfspaceConstraint, ProblemInstance
from .utils.linalg import PSD_CLAMP_TOL, min_eig


SYMMETRY_TOL = 1e-10
RISK_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Violation:
    """One violated invariant."""
    field: str
    message: str
    kind: str = "invariant"  # "dimension" or "invariant"

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


class ProblemValidator:
    """Collects invariant violations of a problem instance, field by field."""

    def __init__(self, symmetry_tol: float = SYMMETRY_TOL, psd_tol: float = PSD_CLAMP_TOL):
        """
        Initialize validator.

        Args:
            symmetry_tol: Absolute asymmetry tolerated in symmetric matrices
            psd_tol: Eigenvalue magnitude below zero tolerated for PSD weights
        """
        self.symmetry_tol = symmetry_tol
        self.psd_tol = psd_tol
        self._violations: List[Violation] = []

    def _add(self, field_name: str, message: str, kind: str = "invariant") -> None:
        self._violations.append(Violation(field_name, message, kind))

    def check_shape(self, value: np.ndarray, shape: tuple, field_name: str) -> bool:
        """Record a dimension violation unless ``value.shape == shape``."""
        if value.shape != shape:
            self._add(field_name, f"expected shape {shape}, got {value.shape}", "dimension")
            return False
        return True

    def check_finite(self, value: np.ndarray, field_name: str) -> None:
        if not np.all(np.isfinite(value)):
            self._add(field_name, "contains non-finite entries")

    def check_symmetric(self, value: np.ndarray, field_name: str) -> bool:
        if np.max(np.abs(value - value.T), initial=0.0) > self.symmetry_tol:
            self._add(field_name, "not symmetric")
            return False
        return True

    def check_positive_definite(self, value: np.ndarray, field_name: str) -> None:
        if value.size and min_eig(value) <= 0.0:
            self._add(field_name, f"{field_name.split('.')[-1]} not positive definite")

    def check_psd(self, value: np.ndarray, field_name: str, tol: float = 0.0) -> None:
        if value.size and min_eig(value) < -tol:
            self._add(field_name, f"{field_name.split('.')[-1]} not positive semidefinite")

    def check_open_interval(self, value: float, low: float, high: float,
                            field_name: str, label: str) -> None:
        if not (math.isfinite(value) and low < value < high):
            self._add(field_name, f"{label} must lie in ({low:g}, {high:g}), got {value:g}")

    def check_constraints(self, constraints: Sequence[HalfspaceConstraint], dim: int,
                          total: float, prefix: str, label: str) -> None:
        for idx, con in enumerate(constraints):
            field_name = f"{prefix}[{idx}]"
            if not self.check_shape(con.alpha, (dim,), f"{field_name}.alpha"):
                continue
            self.check_finite(con.alpha, f"{field_name}.alpha")
            if not np.any(con.alpha != 0.0):
                self._add(f"{field_name}.alpha", f"constraint {idx}: alpha is the zero vector")
            if not (math.isfinite(con.beta) and con.beta >= 0.0):
                self._add(f"{field_name}.beta", f"constraint {idx}: beta must be >= 0, got {con.beta:g}")
            self.check_open_interval(con.p, 0.0, 0.5, f"{field_name}.p", f"constraint {idx}: p")
        if constraints:
            budget = sum(con.p for con in constraints)
            if budget > total + RISK_SUM_TOL:
                self._add(prefix, f"risk budget exceeded: sum of p = {budget:g} > {label} = {total:g}")

    def validate(self, instance: ProblemInstance) -> List[Violation]:
        """
        Validate a complete problem instance.

        Args:
            instance: Instance to check

        Returns:
            List of violations (empty when valid)
        """
        self._violations = []
        model, boundary, chance, cost = instance.model, instance.boundary, instance.chance, instance.cost
        n_x, n_u, N = model.n_x, model.n_u, boundary.N

        for name in ("A_bar", "B_bar", "d_bar", "A_tilde", "B_tilde", "d_tilde"):
            self.check_finite(getattr(model, name), f"system.{name}")

        if N < 1:
            self._add("boundary.N", f"N must be >= 1, got {N}")

        for name, shape in (("mu_I", (n_x,)), ("mu_F", (n_x,))):
            value = getattr(boundary, name)
            if self.check_shape(value, shape, f"boundary.{name}"):
                self.check_finite(value, f"boundary.{name}")

        if self.check_shape(boundary.Sigma_I, (n_x, n_x), "boundary.Sigma_I"):
            self.check_finite(boundary.Sigma_I, "boundary.Sigma_I")
            if np.all(np.isfinite(boundary.Sigma_I)) and self.check_symmetric(boundary.Sigma_I, "boundary.Sigma_I"):
                self.check_positive_definite(boundary.Sigma_I, "boundary.Sigma_I")

        if self.check_shape(boundary.Sigma_F, (n_x, n_x), "boundary.Sigma_F"):
            self.check_finite(boundary.Sigma_F, "boundary.Sigma_F")
            if np.all(np.isfinite(boundary.Sigma_F)) and self.check_symmetric(boundary.Sigma_F, "boundary.Sigma_F"):
                self.check_psd(boundary.Sigma_F, "boundary.Sigma_F", tol=self.psd_tol)

        eps = boundary.sigma_f_regularization
        if not (math.isfinite(eps) and eps >= 0.0):
            self._add("sigma_f_regularization", f"must be >= 0, got {eps:g}")

        self.check_open_interval(chance.p_x_total, 0.0, 0.5, "chance.p_x_total", "p_x")
        self.check_open_interval(chance.p_u_total, 0.0, 0.5, "chance.p_u_total", "p_u")
        self.check_constraints(chance.state_constraints, n_x, chance.p_x_total,
                               "chance.state_constraints", "p_x_total")
        self.check_constraints(chance.input_constraints, n_u, chance.p_u_total,
                               "chance.input_constraints", "p_u_total")

        self._check_weight(cost.Q, (n_x, n_x), "cost.Q")
        self._check_weight(cost.R, (n_u, n_u), "cost.R")
        for name, dim in (("Q_seq", n_x), ("R_seq", n_u)):
            seq = getattr(cost, name)
            if seq is None:
                continue
            if self.check_shape(seq, (N, dim, dim), f"cost.{name}"):
                for k in range(N):
                    self._check_weight(seq[k], (dim, dim), f"cost.{name}[{k}]")

        return list(self._violations)

    def _check_weight(self, value: np.ndarray, shape: tuple, field_name: str) -> None:
        if not self.check_shape(value, shape, field_name):
            return
        self.check_finite(value, field_name)
        if np.all(np.isfinite(value)) and self.check_symmetric(value, field_name):
            self.check_psd(value, field_name, tol=self.psd_tol)


def validate(instance: ProblemInstance) -> List[Violation]:
    """Enumerate every violated invariant of ``instance`` (empty when valid)."""
    return ProblemValidator().validate(instance)


def first_dimension_violation(violations: Sequence[Violation]) -> Optional[Violation]:
    for violation in violations:
        if violation.kind == "dimension":
            return violation
    return None
