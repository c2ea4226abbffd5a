"""
covsteer - Exact Moment Propagation
First and second moments of the closed loop under an affine policy
u_k = L_k (x_k - x_bar_k) + c_k. This is the ground-truth oracle used for
certification and cost evaluation.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from . import serialization
from .exceptions import ConfigError, DimensionError, NonFiniteError
from .model import CostWeights, ProblemInstance, SystemModel
from .utils.linalg import symmetrize


@dataclass(frozen=True, eq=False)
class Policy:
    """Feedback gains L[k] (n_u x n_x) and feedforward c[k] (n_u), k = 0..N-1."""
    L: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=float)
        c = np.array(self.c, dtype=float)
        if L.ndim != 3 or c.ndim != 2:
            raise DimensionError(f"policy L must be 3-D and c 2-D, got {L.shape} and {c.shape}", "policy")
        if L.shape[0] != c.shape[0] or L.shape[1] != c.shape[1]:
            raise DimensionError(f"policy L {L.shape} and c {c.shape} disagree", "policy")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(c))):
            raise NonFiniteError("policy contains non-finite entries")
        L.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "c", c)

    @property
    def N(self) -> int:
        return self.L.shape[0]

    @property
    def n_u(self) -> int:
        return self.L.shape[1]

    @property
    def n_x(self) -> int:
        return self.L.shape[2]

    @classmethod
    def zeros(cls, N: int, n_u: int, n_x: int) -> "Policy":
        return cls(np.zeros((N, n_u, n_x)), np.zeros((N, n_u)))

    def check_compatible(self, instance: ProblemInstance) -> None:
        """Raise DimensionError unless the policy fits ``instance``."""
        expected = (instance.N, instance.n_u, instance.n_x)
        if (self.N, self.n_u, self.n_x) != expected:
            raise DimensionError(
                f"policy shape (N, n_u, n_x) = {(self.N, self.n_u, self.n_x)} "
                f"does not match instance {expected}",
                field="policy",
            )

    def to_dict(self) -> Dict[str, Any]:
        return {"N": self.N, "n_x": self.n_x, "n_u": self.n_u, "L": self.L, "c": self.c}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Policy":
        try:
            N, n_x, n_u = int(data["N"]), int(data["n_x"]), int(data["n_u"])
            L = np.array(data["L"], dtype=float).reshape(N, n_u, n_x)
            c = np.array(data["c"], dtype=float).reshape(N, n_u)
        except KeyError as e:
            raise ConfigError(f"policy document missing field {e}", field=str(e))
        except (TypeError, ValueError) as e:
            raise DimensionError(f"policy arrays inconsistent with header: {e}", field="policy")
        return cls(L, c)


def save_policy(path: Union[str, Path], policy: Policy) -> Path:
    return serialization.write_json(path, policy.to_dict())


def load_policy(path: Union[str, Path]) -> Policy:
    try:
        data = serialization.read_json(path)
    except OSError as e:
        raise ConfigError(f"cannot read policy {path}: {e}", field=str(path))
    except ValueError as e:
        raise ConfigError(f"malformed policy document {path}: {e}", field=str(path))
    return Policy.from_dict(data)


@dataclass(frozen=True, eq=False)
class MeanTrajectory:
    x_bar: np.ndarray   # (N+1, n_x)
    u_bar: np.ndarray   # (N, n_u)


@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Exact means and covariances along the horizon."""
    x_bar: np.ndarray     # (N+1, n_x)
    Sigma_x: np.ndarray   # (N+1, n_x, n_x)
    u_bar: np.ndarray     # (N, n_u)
    Sigma_u: np.ndarray   # (N, n_u, n_u)
    Sigma_xu: np.ndarray  # (N, n_x, n_u)

    @property
    def N(self) -> int:
        return self.u_bar.shape[0]


def propagate_mean(model: SystemModel, c: np.ndarray, mu_I: np.ndarray, N: int) -> MeanTrajectory:
    """
    Nominal mean recursion x_bar[k+1] = A_bar x_bar[k] + B_bar c[k] + d_bar.

    Raises:
        DimensionError: If c or mu_I do not match the model
    """
    c = np.asarray(c, dtype=float)
    mu_I = np.asarray(mu_I, dtype=float)
    if c.shape != (N, model.n_u):
        raise DimensionError(f"feedforward must have shape {(N, model.n_u)}, got {c.shape}", "c")
    if mu_I.shape != (model.n_x,):
        raise DimensionError(f"mu_I must have length {model.n_x}, got {mu_I.shape}", "mu_I")

    x_bar = np.empty((N + 1, model.n_x))
    x_bar[0] = mu_I
    for k in range(N):
        x_bar[k + 1] = model.A_bar @ x_bar[k] + model.B_bar @ c[k] + model.d_bar
    return MeanTrajectory(x_bar=x_bar, u_bar=c.copy())


def noise_offsets(model: SystemModel, x_bar: np.ndarray, u_bar: np.ndarray) -> np.ndarray:
    """Vectors A_tilde[j] x_bar + B_tilde[j] u_bar + d_tilde[j], stacked as (m, n_x)."""
    return (
        np.einsum("jab,b->ja", model.A_tilde, x_bar)
        + np.einsum("jab,b->ja", model.B_tilde, u_bar)
        + model.d_tilde
    )


def covariance_step(model: SystemModel, Sigma_x: np.ndarray, Sigma_xu: np.ndarray,
                    Sigma_u: np.ndarray, x_bar: np.ndarray, u_bar: np.ndarray) -> np.ndarray:
    """One step of the exact state covariance recursion (symmetrized)."""
    A, B = model.A_bar, model.B_bar
    S = A @ Sigma_x @ A.T + A @ Sigma_xu @ B.T + B @ Sigma_xu.T @ A.T + B @ Sigma_u @ B.T
    for Aj, Bj, vj in zip(model.A_tilde, model.B_tilde, noise_offsets(model, x_bar, u_bar)):
        S = S + (
            Aj @ Sigma_x @ Aj.T
            + Aj @ Sigma_xu @ Bj.T
            + Bj @ Sigma_xu.T @ Aj.T
            + Bj @ Sigma_u @ Bj.T
            + np.outer(vj, vj)
        )
    return symmetrize(S)


def propagate_covariance(model: SystemModel, policy: Policy, means: MeanTrajectory,
                         Sigma_I: np.ndarray) -> MomentTrajectory:
    """
    Exact covariance recursion with Sigma_u = L Sigma_x L^T and Sigma_xu = Sigma_x L^T.

    Args:
        model: System dynamics
        policy: Affine policy
        means: Output of ``propagate_mean`` for the same policy
        Sigma_I: Initial covariance

    Returns:
        Complete MomentTrajectory

    Raises:
        DimensionError: On shape mismatch
        NonFiniteError: If the recursion overflows (unstable closed loop)
    """
    N = policy.N
    n_x, n_u = model.n_x, model.n_u
    if (policy.n_x, policy.n_u) != (n_x, n_u):
        raise DimensionError(
            f"policy dimensions (n_x={policy.n_x}, n_u={policy.n_u}) do not match model ({n_x}, {n_u})",
            "policy",
        )
    if means.x_bar.shape != (N + 1, n_x) or means.u_bar.shape != (N, n_u):
        raise DimensionError("mean trajectory does not match policy horizon", "means")
    Sigma_I = np.asarray(Sigma_I, dtype=float)
    if Sigma_I.shape != (n_x, n_x):
        raise DimensionError(f"Sigma_I must be {n_x}x{n_x}, got {Sigma_I.shape}", "Sigma_I")

    Sigma_x = np.empty((N + 1, n_x, n_x))
    Sigma_u = np.empty((N, n_u, n_u))
    Sigma_xu = np.empty((N, n_x, n_u))
    Sigma_x[0] = symmetrize(Sigma_I)
    for k in range(N):
        L = policy.L[k]
        Sigma_xu[k] = Sigma_x[k] @ L.T
        Sigma_u[k] = symmetrize(L @ Sigma_x[k] @ L.T)
        Sigma_x[k + 1] = covariance_step(
            model, Sigma_x[k], Sigma_xu[k], Sigma_u[k], means.x_bar[k], means.u_bar[k]
        )
        if not np.all(np.isfinite(Sigma_x[k + 1])):
            raise NonFiniteError(f"covariance became non-finite at step {k + 1}", step=k + 1)

    return MomentTrajectory(
        x_bar=np.array(means.x_bar), Sigma_x=Sigma_x,
        u_bar=np.array(means.u_bar), Sigma_u=Sigma_u, Sigma_xu=Sigma_xu,
    )


def propagate(instance: ProblemInstance, policy: Policy) -> MomentTrajectory:
    """Mean and covariance of ``instance`` under ``policy`` from the initial moments."""
    policy.check_compatible(instance)
    means = propagate_mean(instance.model, policy.c, instance.boundary.mu_I, instance.N)
    return propagate_covariance(instance.model, policy, means, instance.boundary.Sigma_I)


def closed_loop_transition(model: SystemModel, policy: Policy, k_end: Optional[int] = None) -> np.ndarray:
    """Product (A_bar + B_bar L_{k-1}) ... (A_bar + B_bar L_0) for a deterministic system."""
    k_end = policy.N if k_end is None else k_end
    Phi = np.eye(model.n_x)
    for k in range(k_end):
        Phi = (model.A_bar + model.B_bar @ policy.L[k]) @ Phi
    return Phi


def exact_cost(traj: MomentTrajectory, cost: CostWeights) -> float:
    """Expected stage cost summed over k = 0..N-1."""
    total = 0.0
    for k in range(traj.N):
        Q, R = cost.stage(k)
        if Q.shape != traj.Sigma_x[k].shape or R.shape != traj.Sigma_u[k].shape:
            raise DimensionError("cost weights do not match trajectory dimensions", "cost")
        x, u = traj.x_bar[k], traj.u_bar[k]
        total += float(x @ Q @ x + np.trace(Q @ traj.Sigma_x[k]) + u @ R @ u + np.trace(R @ traj.Sigma_u[k]))
    return total


def trajectory_rows(traj: MomentTrajectory):
    n_x, n_u = traj.x_bar.shape[1], traj.u_bar.shape[1]
    header: List[str] = ["k"]
    header += [f"x_bar_{i}" for i in range(n_x)]
    header += [f"Sigma_x_{i}{j}" for i in range(n_x) for j in range(n_x)]
    header += [f"u_bar_{i}" for i in range(n_u)]
    header += [f"Sigma_u_{i}{j}" for i in range(n_u) for j in range(n_u)]
    rows = []
    for k in range(traj.N + 1):
        row: List[Any] = [k, *traj.x_bar[k], *traj.Sigma_x[k].ravel()]
        if k < traj.N:
            row += [*traj.u_bar[k], *traj.Sigma_u[k].ravel()]
        else:
            row += [""] * (n_u + n_u * n_u)
        rows.append(row)
    return header, rows


def trajectory_to_csv(traj: MomentTrajectory) -> str:
    header, rows = trajectory_rows(traj)
    return serialization.csv_text(header, rows)
