"""
covsteer - Problem Model
Domain types for finite-horizon covariance steering of

    x_{k+1} = (A_bar + sum_j A_tilde[j] q_jk) x_k
            + (B_bar + sum_j B_tilde[j] q_jk) u_k
            + d_bar + sum_j d_tilde[j] q_jk,      q_jk ~ N(0, 1) i.i.d.

All types are frozen dataclasses holding read-only float arrays. Construction
only coerces shapes; semantic invariants are checked by ``validation.validate``.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DimensionError
from . import serialization


def _frozen_array(value: Any, ndim: int, field_name: str,
                  empty_shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.size == 0 and empty_shape is not None:
        arr = arr.reshape(empty_shape)
    if arr.ndim != ndim:
        raise DimensionError(
            f"{field_name} must have {ndim} dimension(s), got shape {arr.shape}",
            field=field_name,
        )
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Nominal matrices and the m multiplicative/additive disturbance channels."""
    A_bar: np.ndarray
    B_bar: np.ndarray
    d_bar: np.ndarray
    A_tilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    B_tilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    d_tilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        A = _frozen_array(self.A_bar, 2, "system.A_bar")
        B = _frozen_array(self.B_bar, 2, "system.B_bar")
        n_x, n_u = A.shape[0], B.shape[1]
        d = _frozen_array(self.d_bar, 1, "system.d_bar")
        At = _frozen_array(self.A_tilde, 3, "system.A_tilde", (0, n_x, n_x))
        Bt = _frozen_array(self.B_tilde, 3, "system.B_tilde", (0, n_x, n_u))
        dt = _frozen_array(self.d_tilde, 2, "system.d_tilde", (0, n_x))

        if A.shape != (n_x, n_x):
            raise DimensionError(f"system.A_bar must be square, got {A.shape}", "system.A_bar")
        if B.shape[0] != n_x:
            raise DimensionError(f"system.B_bar must have {n_x} rows, got {B.shape[0]}", "system.B_bar")
        if d.shape != (n_x,):
            raise DimensionError(f"system.d_bar must have length {n_x}, got {d.shape[0]}", "system.d_bar")
        m = At.shape[0]
        if At.shape[1:] != (n_x, n_x):
            raise DimensionError(f"system.A_tilde entries must be {n_x}x{n_x}", "system.A_tilde")
        if Bt.shape != (m, n_x, n_u):
            raise DimensionError(
                f"system.B_tilde must hold {m} matrices of shape {n_x}x{n_u}, got {Bt.shape}",
                "system.B_tilde",
            )
        if dt.shape != (m, n_x):
            raise DimensionError(
                f"system.d_tilde must hold {m} vectors of length {n_x}, got {dt.shape}",
                "system.d_tilde",
            )

        object.__setattr__(self, "A_bar", A)
        object.__setattr__(self, "B_bar", B)
        object.__setattr__(self, "d_bar", d)
        object.__setattr__(self, "A_tilde", At)
        object.__setattr__(self, "B_tilde", Bt)
        object.__setattr__(self, "d_tilde", dt)

    @property
    def n_x(self) -> int:
        return self.A_bar.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_bar.shape[1]

    @property
    def m(self) -> int:
        return self.A_tilde.shape[0]


@dataclass(frozen=True, eq=False)
class BoundaryMoments:
    """Initial/terminal moments and horizon length."""
    mu_I: np.ndarray
    Sigma_I: np.ndarray
    mu_F: np.ndarray
    Sigma_F: np.ndarray
    N: int
    sigma_f_regularization: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu_I", _frozen_array(self.mu_I, 1, "boundary.mu_I"))
        object.__setattr__(self, "Sigma_I", _frozen_array(self.Sigma_I, 2, "boundary.Sigma_I"))
        object.__setattr__(self, "mu_F", _frozen_array(self.mu_F, 1, "boundary.mu_F"))
        object.__setattr__(self, "Sigma_F", _frozen_array(self.Sigma_F, 2, "boundary.Sigma_F"))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "sigma_f_regularization", float(self.sigma_f_regularization))

    @property
    def Sigma_F_eff(self) -> np.ndarray:
        """Terminal covariance bound actually enforced: Sigma_F + eps * I."""
        eps = self.sigma_f_regularization
        if eps == 0.0:
            return np.array(self.Sigma_F)
        return np.array(self.Sigma_F) + eps * np.eye(self.Sigma_F.shape[0])


@dataclass(frozen=True, eq=False)
class HalfspaceConstraint:
    """Chance constraint Pr(alpha^T v >= beta) <= p on a state or input."""
    alpha: np.ndarray
    beta: float
    p: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, 1, "alpha"))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "p", float(self.p))


@dataclass(frozen=True, eq=False)
class ChanceSpec:
    """State/input halfspace constraints and their joint risk budgets."""
    state_constraints: Tuple[HalfspaceConstraint, ...] = ()
    input_constraints: Tuple[HalfspaceConstraint, ...] = ()
    p_x_total: float = 0.1
    p_u_total: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "state_constraints", tuple(self.state_constraints))
        object.__setattr__(self, "input_constraints", tuple(self.input_constraints))
        object.__setattr__(self, "p_x_total", float(self.p_x_total))
        object.__setattr__(self, "p_u_total", float(self.p_u_total))


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Stage cost x^T Q_k x + u^T R_k u; per-step sequences are optional."""
    Q: np.ndarray
    R: np.ndarray
    Q_seq: Optional[np.ndarray] = None
    R_seq: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen_array(self.Q, 2, "cost.Q"))
        object.__setattr__(self, "R", _frozen_array(self.R, 2, "cost.R"))
        if self.Q_seq is not None:
            object.__setattr__(self, "Q_seq", _frozen_array(self.Q_seq, 3, "cost.Q_seq"))
        if self.R_seq is not None:
            object.__setattr__(self, "R_seq", _frozen_array(self.R_seq, 3, "cost.R_seq"))

    def stage(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Weights (Q_k, R_k) for step k."""
        Q_k = self.Q_seq[k] if self.Q_seq is not None else self.Q
        R_k = self.R_seq[k] if self.R_seq is not None else self.R
        return Q_k, R_k


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Complete covariance steering problem statement."""
    model: SystemModel
    boundary: BoundaryMoments
    chance: ChanceSpec
    cost: CostWeights
    name: Optional[str] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.boundary.N

    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def n_u(self) -> int:
        return self.model.n_u

    @property
    def m(self) -> int:
        return self.model.m

    def with_regularization(self, eps: float) -> "ProblemInstance":
        """Copy whose terminal bound is Sigma_F + eps * I."""
        boundary = dataclasses.replace(self.boundary, sigma_f_regularization=float(eps))
        return dataclasses.replace(self, boundary=boundary)


def naive_variant(instance: ProblemInstance) -> ProblemInstance:
    """
    Planning model of the naive baseline.

    Zeroes every multiplicative channel (A_tilde, B_tilde) and keeps the
    additive channels d_tilde. Idempotent; m = 0 instances are fixed points.
    """
    model = instance.model
    naive_model = dataclasses.replace(
        model,
        A_tilde=np.zeros_like(model.A_tilde),
        B_tilde=np.zeros_like(model.B_tilde),
    )
    return dataclasses.replace(instance, model=naive_model)


def _constraint_entry(con: HalfspaceConstraint) -> Dict[str, Any]:
    return {"alpha": con.alpha, "beta": con.beta, "p": con.p}


def to_document(instance: ProblemInstance) -> Dict[str, Any]:
    """Configuration document (JSON schema of ``load_config``) for an instance."""
    model, boundary, chance, cost = instance.model, instance.boundary, instance.chance, instance.cost
    cost_doc: Dict[str, Any] = {"Q": cost.Q, "R": cost.R}
    if cost.Q_seq is not None:
        cost_doc["Q_seq"] = cost.Q_seq
    if cost.R_seq is not None:
        cost_doc["R_seq"] = cost.R_seq
    doc: Dict[str, Any] = {
        "system": {
            "A_bar": model.A_bar,
            "B_bar": model.B_bar,
            "d_bar": model.d_bar,
            "A_tilde": model.A_tilde,
            "B_tilde": model.B_tilde,
            "d_tilde": model.d_tilde,
        },
        "boundary": {
            "mu_I": boundary.mu_I,
            "Sigma_I": boundary.Sigma_I,
            "mu_F": boundary.mu_F,
            "Sigma_F": boundary.Sigma_F,
            "N": boundary.N,
        },
        "chance": {
            "p_x_total": chance.p_x_total,
            "p_u_total": chance.p_u_total,
            "state_constraints": [_constraint_entry(c) for c in chance.state_constraints],
            "input_constraints": [_constraint_entry(c) for c in chance.input_constraints],
        },
        "cost": cost_doc,
        "sigma_f_regularization": boundary.sigma_f_regularization,
    }
    if instance.name is not None:
        doc["name"] = instance.name
    if instance.meta:
        doc["meta"] = dict(instance.meta)
    return doc


def serialize(instance: ProblemInstance) -> str:
    """JSON text that ``load_config`` maps back to an equal instance."""
    return serialization.dumps(to_document(instance))


def instances_equal(a: ProblemInstance, b: ProblemInstance) -> bool:
    """Exact equality of all numeric content."""
    return serialize(a) == serialize(b)


def stack_constraints(constraints: Sequence[HalfspaceConstraint], dim: int):
    """Arrays (alpha [n_c, dim], beta [n_c], p [n_c]) for vectorized checks."""
    if not constraints:
        return np.zeros((0, dim)), np.zeros(0), np.zeros(0)
    alpha = np.vstack([c.alpha for c in constraints])
    beta = np.array([c.beta for c in constraints])
    p = np.array([c.p for c in constraints])
    return alpha, beta, p
