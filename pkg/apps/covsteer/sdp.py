"""
covsteer - Convex Covariance Steering Program
Assembles the relaxed semidefinite program, extracts its solution, recovers
the affine feedback policy, certifies it against the exact moments and
optionally re-linearizes the tangent bounds until the objective settles.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import moments, tighten
from .backends import SolveOutcome, SolverBackend, SolverSettings, SolveStatus, get_backend
from .conic import AffineExpr, ConicProgram, bmat, vstack
from .exceptions import (
    DimensionError,
    InfeasibleProblemError,
    PolicyRecoveryError,
    SolverError,
)
from .model import ProblemInstance
from .moments import MomentTrajectory, Policy
from .monitoring import get_monitor
from .tighten import LinearizationSchedule, tangent_coefficients
from .utils.linalg import min_eig, psd_sqrt, symmetrize
from .utils.logger import setup_logger


logger = setup_logger(__name__)

TOL_MEAN = 1e-6
TOL_PSD = 1e-7
TOL_RES = 1e-8
TOL_OBJECTIVE = 1e-6
RECOVERY_JITTER = 1e-10


def _trace_with(W: np.ndarray, X: AffineExpr) -> AffineExpr:
    """tr(W X) as a 1x1 expression."""
    w = sp.csr_matrix(np.asarray(W, dtype=float).T.reshape(1, -1))
    return AffineExpr(w @ X.A, w @ X.b, (1, 1))


def assemble(instance: ProblemInstance, schedule: LinearizationSchedule) -> ConicProgram:
    """
    Build the relaxed conic program for ``instance`` linearized at ``schedule``.

    Args:
        instance: Valid problem instance
        schedule: Tangent points matching the instance's constraints and horizon

    Returns:
        ConicProgram with var_map names x_k, u_k, c_k, Sx_k, Sux_k, Su_k,
        Sj_<j>_<k>

    Raises:
        DimensionError: If the schedule does not match the instance
        ValidationError: If a cost weight is indefinite beyond the clamp
    """
    model, boundary, chance = instance.model, instance.boundary, instance.chance
    N, n_x, n_u, m = instance.N, instance.n_x, instance.n_u, instance.m
    n_s, n_c = len(chance.state_constraints), len(chance.input_constraints)
    if schedule.lambda_state.shape != (n_s, N) or schedule.lambda_input.shape != (n_c, N):
        raise DimensionError(
            f"schedule shapes {schedule.lambda_state.shape}/{schedule.lambda_input.shape} "
            f"do not match constraints ({n_s}, {N})/({n_c}, {N})",
            field="schedule",
        )

    prog = ConicProgram(meta={"N": N, "n_x": n_x, "n_u": n_u, "m": m})
    for k in range(N + 1):
        prog.add_variable(f"x_{k}", n_x)
    for k in range(N):
        prog.add_variable(f"u_{k}", n_u)
        prog.add_variable(f"c_{k}", n_u)
    for k in range(N + 1):
        prog.add_variable(f"Sx_{k}", n_x, n_x, symmetric=True)
    for k in range(N):
        prog.add_variable(f"Sux_{k}", n_u, n_x)
        prog.add_variable(f"Su_{k}", n_u, n_u, symmetric=True)
        for j in range(m):
            prog.add_variable(f"Sj_{j}_{k}", n_x, n_x, symmetric=True)

    x = [prog.var(f"x_{k}") for k in range(N + 1)]
    Sx = [prog.var(f"Sx_{k}") for k in range(N + 1)]
    u = [prog.var(f"u_{k}") for k in range(N)]
    one = prog.const(1.0)
    A, B = model.A_bar, model.B_bar

    # means
    prog.add_equality(x[0] - boundary.mu_I, "mean_initial")
    for k in range(N):
        prog.add_equality(x[k + 1] - x[k].lmul(A) - u[k].lmul(B) - model.d_bar, f"mean_step_{k}")
        prog.add_equality(u[k] - prog.var(f"c_{k}"), f"feedforward_{k}")
    prog.add_equality(x[N] - boundary.mu_F, "mean_terminal")

    # relaxed covariance recursion
    prog.add_equality((Sx[0] - boundary.Sigma_I).upper(), "cov_initial")
    for k in range(N):
        U = prog.var(f"Sux_{k}")
        Su = prog.var(f"Su_{k}")
        rhs = Sx[k].congruence(A) + U.T.congruence(A, B) + U.congruence(B, A) + Su.congruence(B)
        for j in range(m):
            Aj, Bj = model.A_tilde[j], model.B_tilde[j]
            Sj = prog.var(f"Sj_{j}_{k}")
            rhs = (
                rhs + Sx[k].congruence(Aj) + U.T.congruence(Aj, Bj)
                + U.congruence(Bj, Aj) + Su.congruence(Bj) + Sj
            )
            v = x[k].lmul(Aj) + u[k].lmul(Bj) + model.d_tilde[j].reshape(-1, 1)
            prog.add_psd(bmat([[Sj, v], [v.T, one]]), f"noise_{j}_{k}")
        prog.add_equality((Sx[k + 1] - rhs).upper(), f"cov_step_{k}")
        prog.add_psd(bmat([[Su, U], [U.T, Sx[k]]]), f"input_cov_{k}")
    prog.add_psd(prog.const(boundary.Sigma_F_eff) - Sx[N], "terminal_cov")

    # tangent-line chance constraints, k = 0..N-1
    rows: List[AffineExpr] = []
    for i, con in enumerate(chance.state_constraints):
        a = con.alpha.reshape(1, -1)
        for k in range(N):
            slope, offset = tangent_coefficients(con, float(schedule.lambda_state[i, k]))
            res = x[k].lmul(a) + Sx[k].congruence(a) * slope + (offset - con.beta)
            rows.append(-res)
    for i, con in enumerate(chance.input_constraints):
        a = con.alpha.reshape(1, -1)
        for k in range(N):
            slope, offset = tangent_coefficients(con, float(schedule.lambda_input[i, k]))
            res = u[k].lmul(a) + prog.var(f"Su_{k}").congruence(a) * slope + (offset - con.beta)
            rows.append(-res)
    if rows:
        prog.add_nonneg(vstack(rows), "tangent")

    # covariance terms are linear; mean terms enter as ||Q^{1/2} x||^2 + ||R^{1/2} u||^2
    objective = prog.const(0.0)
    for k in range(N):
        Q, R = instance.cost.stage(k)
        F_Q, F_R = psd_sqrt(Q, field="cost.Q"), psd_sqrt(R, field="cost.R")
        prog.add_square(x[k].lmul(F_Q), f"state_mean_cost_{k}")
        prog.add_square(u[k].lmul(F_R), f"input_mean_cost_{k}")
        objective = objective + _trace_with(Q, Sx[k]) + _trace_with(R, prog.var(f"Su_{k}"))
    prog.set_objective(objective)
    return prog


@dataclass(frozen=True, eq=False)
class RelaxedSolution:
    """Decision variables of a solved program; arrays are None unless optimal."""
    status: SolveStatus
    objective_value: Optional[float] = None
    c: Optional[np.ndarray] = None              # (N, n_u)
    x_bar: Optional[np.ndarray] = None          # (N+1, n_x)
    u_bar: Optional[np.ndarray] = None          # (N, n_u)
    Sigma_bar_x: Optional[np.ndarray] = None    # (N+1, n_x, n_x)
    Sigma_bar_ux: Optional[np.ndarray] = None   # (N, n_u, n_x)
    Sigma_bar_u: Optional[np.ndarray] = None    # (N, n_u, n_u)
    Sigma_bar_j: Optional[np.ndarray] = None    # (m, N, n_x, n_x)
    z: Optional[np.ndarray] = None

    @property
    def is_optimal(self) -> bool:
        return self.status.is_optimal

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status.outcome.value,
            "iterations": self.status.iterations,
            "primal_residual": self.status.primal_residual,
            "dual_residual": self.status.dual_residual,
            "duality_gap": self.status.duality_gap,
            "message": self.status.message,
            "objective_value": self.objective_value,
            "c": self.c,
            "x_bar": self.x_bar,
            "u_bar": self.u_bar,
            "Sigma_bar_x": self.Sigma_bar_x,
            "Sigma_bar_ux": self.Sigma_bar_ux,
            "Sigma_bar_u": self.Sigma_bar_u,
            "Sigma_bar_j": self.Sigma_bar_j,
        }


def extract_solution(program: ConicProgram, status: SolveStatus, z: np.ndarray,
                     objective: float) -> RelaxedSolution:
    meta = program.meta
    N, m = meta["N"], meta["m"]
    vm = program.var_map

    def get(name: str) -> np.ndarray:
        return vm[name].extract(z)

    return RelaxedSolution(
        status=status,
        objective_value=float(objective),
        c=np.array([get(f"c_{k}").ravel() for k in range(N)]),
        x_bar=np.array([get(f"x_{k}").ravel() for k in range(N + 1)]),
        u_bar=np.array([get(f"u_{k}").ravel() for k in range(N)]),
        Sigma_bar_x=np.array([get(f"Sx_{k}") for k in range(N + 1)]),
        Sigma_bar_ux=np.array([get(f"Sux_{k}") for k in range(N)]),
        Sigma_bar_u=np.array([get(f"Su_{k}") for k in range(N)]),
        Sigma_bar_j=np.array([[get(f"Sj_{j}_{k}") for k in range(N)] for j in range(m)]).reshape(
            m, N, meta["n_x"], meta["n_x"]
        ),
        z=np.asarray(z, dtype=float),
    )


def solve_relaxation(program: ConicProgram, backend: Optional[SolverBackend] = None,
                     settings: Optional[SolverSettings] = None) -> RelaxedSolution:
    """
    Solve ``program`` and map the solution back onto named variables.

    Non-optimal outcomes return a RelaxedSolution carrying only the status.
    """
    backend = backend or get_backend("clarabel")
    with get_monitor().measure("solve", {"backend": backend.name, "num_vars": program.num_vars}):
        result = backend.solve(program, settings)
    if not result.status.is_optimal:
        return RelaxedSolution(status=result.status)
    return extract_solution(program, result.status, result.x, result.objective)


def recover_policy(sol: RelaxedSolution) -> Policy:
    """
    Gains L_k with L_k Sigma_bar_x[k] = Sigma_bar_ux[k], via Cholesky.

    Raises:
        PolicyRecoveryError: If a Sigma_bar_x[k] stays singular after jitter
    """
    if not sol.is_optimal or sol.Sigma_bar_x is None:
        raise PolicyRecoveryError("cannot recover a policy from a non-optimal solution")
    N = sol.c.shape[0]
    n_u, n_x = sol.Sigma_bar_ux.shape[1:]
    L = np.zeros((N, n_u, n_x))
    for k in range(N):
        S = symmetrize(sol.Sigma_bar_x[k])
        scale = float(np.trace(S))
        if not (scale > 0.0 and math.isfinite(scale)):
            raise PolicyRecoveryError(f"Sigma_bar_x[{k}] has nonpositive trace", step=k)
        if min_eig(S) <= RECOVERY_JITTER * scale:
            S = S + RECOVERY_JITTER * scale * np.eye(n_x)
        try:
            factor = scipy.linalg.cho_factor(S, lower=True)
        except np.linalg.LinAlgError:
            raise PolicyRecoveryError(f"Sigma_bar_x[{k}] is singular", step=k)
        L[k] = scipy.linalg.cho_solve(factor, sol.Sigma_bar_ux[k].T).T
    return Policy(L, np.array(sol.c))


@dataclass
class Certificate:
    """Exact-moment feasibility checks of a policy on a problem instance."""
    exact_traj: MomentTrajectory
    exact_cost: float
    terminal_mean_error: float
    terminal_cov_margin: float
    worst_state_residual: Optional[float]
    worst_input_residual: Optional[float]
    dominance_margin: Optional[float] = None
    objective_gap: Optional[float] = None
    passed: bool = False
    failures: List[str] = field(default_factory=list)
    max_violation: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass": self.passed,
            "failures": list(self.failures),
            "exact_cost": self.exact_cost,
            "terminal_mean_error": self.terminal_mean_error,
            "terminal_cov_margin": self.terminal_cov_margin,
            "worst_state_residual": self.worst_state_residual,
            "worst_input_residual": self.worst_input_residual,
            "dominance_margin": self.dominance_margin,
            "objective_gap": self.objective_gap,
            "max_violation": self.max_violation,
            "tolerances": {"mean": TOL_MEAN, "psd": TOL_PSD, "residual": TOL_RES, "objective": TOL_OBJECTIVE},
            "terminal_x_bar": self.exact_traj.x_bar[-1],
            "terminal_Sigma_x": self.exact_traj.Sigma_x[-1],
        }


def _worst(constraints, means: np.ndarray, covs: np.ndarray) -> Optional[float]:
    if not constraints:
        return None
    return max(
        tighten.cantelli_residual(con, means[k], covs[k])
        for con in constraints
        for k in range(covs.shape[0])
    )


def certify(instance: ProblemInstance, policy: Policy, sol: Optional[RelaxedSolution] = None) -> Certificate:
    """
    Check ``policy`` on the true dynamics of ``instance``.

    Dominance and objective gap are evaluated only when a relaxed solution is
    supplied. Failures are recorded, never raised.
    """
    traj = moments.propagate(instance, policy)
    N = instance.N
    Sigma_F = instance.boundary.Sigma_F_eff
    failures: List[str] = []
    violations: List[float] = [0.0]

    mean_err = float(np.max(np.abs(traj.x_bar[N] - instance.boundary.mu_F), initial=0.0))
    if mean_err > TOL_MEAN:
        failures.append(f"terminal mean error {mean_err:.3e} > {TOL_MEAN:g}")
    violations.append(mean_err - TOL_MEAN)

    cov_margin = min_eig(Sigma_F - traj.Sigma_x[N])
    cov_tol = TOL_PSD * (1.0 + np.linalg.norm(Sigma_F, 2))
    if cov_margin < -cov_tol:
        failures.append(f"terminal covariance margin {cov_margin:.3e} < -{cov_tol:.3e}")
    violations.append(-cov_margin - cov_tol)

    worst_x = _worst(instance.chance.state_constraints, traj.x_bar[:N], traj.Sigma_x[:N])
    worst_u = _worst(instance.chance.input_constraints, traj.u_bar, traj.Sigma_u)
    for label, worst in (("state", worst_x), ("input", worst_u)):
        if worst is not None:
            if worst > TOL_RES:
                failures.append(f"worst {label} Cantelli residual {worst:.3e} > {TOL_RES:g}")
            violations.append(worst - TOL_RES)

    dominance = gap = None
    cost = moments.exact_cost(traj, instance.cost)
    if sol is not None and sol.is_optimal:
        dominance = math.inf
        for k in range(N + 1):
            margin = min_eig(sol.Sigma_bar_x[k] - traj.Sigma_x[k])
            dominance = min(dominance, margin)
            tol = TOL_PSD * (1.0 + np.linalg.norm(sol.Sigma_bar_x[k], 2))
            if margin < -tol:
                failures.append(f"relaxed covariance does not dominate exact at k={k} ({margin:.3e})")
                violations.append(-margin - tol)
        gap = float(sol.objective_value - cost)
        gap_tol = TOL_OBJECTIVE * (1.0 + abs(sol.objective_value))
        if gap < -gap_tol:
            failures.append(f"relaxed objective below exact cost by {-gap:.3e}")
        violations.append(-gap - gap_tol)

    cert = Certificate(
        exact_traj=traj,
        exact_cost=cost,
        terminal_mean_error=mean_err,
        terminal_cov_margin=cov_margin,
        worst_state_residual=worst_x,
        worst_input_residual=worst_u,
        dominance_margin=dominance,
        objective_gap=gap,
        passed=not failures,
        failures=failures,
        max_violation=float(max(max(violations), 0.0)),
    )
    logger.info(
        "certify.finished",
        passed=cert.passed,
        terminal_mean_error=mean_err,
        terminal_cov_margin=cov_margin,
        worst_state_residual=worst_x,
        dominance_margin=dominance,
    )
    return cert


@dataclass
class IterationRecord:
    iteration: int
    status: str
    objective: Optional[float]
    passed: Optional[bool]
    max_violation: Optional[float]


@dataclass
class RelinearizationResult:
    solution: RelaxedSolution
    policy: Policy
    certificate: Certificate
    log: List[IterationRecord]
    warning: Optional[str] = None
    best_iteration: int = 1


def _raise_for_status(status: SolveStatus, backend_name: str) -> None:
    if status.outcome is SolveOutcome.PRIMAL_INFEASIBLE:
        raise InfeasibleProblemError("convex program reported primal infeasible", status=status)
    raise SolverError(
        f"solver terminated with {status.outcome.value}",
        backend=backend_name,
        diagnostics={
            "outcome": status.outcome.value,
            "iterations": status.iterations,
            "primal_residual": status.primal_residual,
            "dual_residual": status.dual_residual,
            "message": status.message,
        },
    )


def iterate_relinearize(instance: ProblemInstance, max_iters: int = 1, rel_tol: float = 1e-4,
                        backend: Optional[SolverBackend] = None,
                        settings: Optional[SolverSettings] = None) -> RelinearizationResult:
    """
    Solve, then re-linearize the tangent bounds at the previous relaxed
    covariances until the objective changes by at most
    rel_tol * max(1, |J_prev|) or ``max_iters`` solves have run.

    Returns:
        Best iterate: lowest objective among certified iterates, otherwise the
        lowest certificate violation

    Raises:
        InfeasibleProblemError: If the first solve is infeasible
        SolverError: If the first solve fails otherwise
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    backend = backend or get_backend("clarabel")
    monitor = get_monitor()

    schedule = tighten.initial_schedule(instance)
    log: List[IterationRecord] = []
    iterates = []
    warning: Optional[str] = None
    prev_objective: Optional[float] = None

    for it in range(1, max_iters + 1):
        with monitor.measure("assemble", {"iteration": it}):
            program = assemble(instance, schedule)
        sol = solve_relaxation(program, backend, settings)
        if not sol.is_optimal:
            log.append(IterationRecord(it, sol.status.outcome.value, None, None, None))
            if it == 1:
                _raise_for_status(sol.status, backend.name)
            warning = f"iteration {it} terminated with {sol.status.outcome.value}; keeping earlier iterate"
            logger.warning("relinearize.stopped", iteration=it, status=sol.status.outcome.value)
            break
        try:
            policy = recover_policy(sol)
        except PolicyRecoveryError as e:
            if it == 1:
                raise
            warning = f"iteration {it}: {e.message}; keeping earlier iterate"
            logger.warning("relinearize.stopped", iteration=it, error=e.message)
            break
        with monitor.measure("certify", {"iteration": it}):
            cert = certify(instance, policy, sol)
        iterates.append((it, sol, policy, cert))
        log.append(IterationRecord(it, sol.status.outcome.value, sol.objective_value, cert.passed, cert.max_violation))
        logger.info("relinearize.iteration", iteration=it, objective=sol.objective_value, passed=cert.passed)

        if prev_objective is not None and abs(sol.objective_value - prev_objective) <= rel_tol * max(1.0, abs(prev_objective)):
            break
        prev_objective = sol.objective_value
        schedule = tighten.schedule_from_solution(instance, sol)

    certified = [entry for entry in iterates if entry[3].passed]
    if certified:
        best = min(certified, key=lambda e: e[1].objective_value)
    else:
        best = min(iterates, key=lambda e: e[3].max_violation)
    it, sol, policy, cert = best
    return RelinearizationResult(sol, policy, cert, log, warning, best_iteration=it)


@dataclass
class PlanResult:
    result: RelinearizationResult
    instance: ProblemInstance
    regularization: float
    fell_back: bool = False


def _fallback_worthy(error: Exception) -> bool:
    if isinstance(error, InfeasibleProblemError):
        return True
    return isinstance(error, SolverError) and error.diagnostics.get("outcome") == SolveOutcome.NUMERICAL_FAILURE.value


def plan(instance: ProblemInstance, backend: Optional[SolverBackend] = None,
         settings: Optional[SolverSettings] = None, iters: int = 1, rel_tol: float = 1e-4,
         fallback_regularization: float = 1e-4) -> PlanResult:
    """
    Run ``iterate_relinearize``; when the strict terminal bound is reported
    infeasible (or the solver fails numerically) and no regularization is set,
    retry once with Sigma_F + fallback_regularization * I.
    """
    try:
        result = iterate_relinearize(instance, iters, rel_tol, backend, settings)
        return PlanResult(result, instance, instance.boundary.sigma_f_regularization)
    except (InfeasibleProblemError, SolverError) as e:
        if not (_fallback_worthy(e) and instance.boundary.sigma_f_regularization == 0.0
                and fallback_regularization > 0.0):
            raise
        logger.warning(
            "plan.fallback_regularization",
            reason=e.message,
            regularization=fallback_regularization,
        )
    relaxed = instance.with_regularization(fallback_regularization)
    result = iterate_relinearize(relaxed, iters, rel_tol, backend, settings)
    return PlanResult(result, relaxed, fallback_regularization, fell_back=True)
