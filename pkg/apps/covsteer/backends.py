"""
covsteer - Conic Solver Backends
Pluggable adapters from ConicProgram to mature conic optimizers.
"""

import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from .conic import ConicProgram
from .exceptions import BackendRegistryError, SolverError
from .utils.logger import setup_logger


logger = setup_logger(__name__)

SQRT2 = math.sqrt(2.0)


class SolveOutcome(Enum):
    """Termination class of a conic solve."""
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    NUMERICAL_FAILURE = "NumericalFailure"
    ITERATION_LIMIT = "IterationLimit"
    TIME_LIMIT = "TimeLimit"


@dataclass(frozen=True)
class SolveStatus:
    outcome: SolveOutcome
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    duality_gap: float = float("nan")
    solve_time: float = 0.0
    message: str = ""

    @property
    def is_optimal(self) -> bool:
        return self.outcome is SolveOutcome.OPTIMAL

    @property
    def is_infeasible(self) -> bool:
        return self.outcome is SolveOutcome.PRIMAL_INFEASIBLE


class SolverSettings(BaseModel):
    """Termination settings shared by every backend."""
    abs_tol: float = Field(default=1e-8, gt=0)
    rel_tol: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=20000, gt=0)
    verbose: bool = False
    time_limit_seconds: Optional[float] = Field(default=None, gt=0)


@dataclass(frozen=True, eq=False)
class SolveResult:
    status: SolveStatus
    x: Optional[np.ndarray]
    objective: Optional[float]


class SolverBackend(ABC):
    """Base class for conic solver backends."""

    def __init__(self, name: str, version: str = "1.0"):
        """
        Initialize backend.

        Args:
            name: Registry name
            version: Adapter version
        """
        self.name = name
        self.version = version
        self.enabled = True

    @abstractmethod
    def solve(self, program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
        """
        Solve a conic program.

        Args:
            program: Program to solve
            settings: Termination settings (defaults when omitted)

        Returns:
            SolveResult; x and objective are set only for an optimal outcome

        Raises:
            SolverError: If the optimizer itself fails to run
        """

    def get_info(self) -> Dict[str, Any]:
        return {"name": self.name, "version": self.version, "enabled": self.enabled}

    def _finish(self, program: ConicProgram, status: SolveStatus, x: Optional[np.ndarray]) -> SolveResult:
        log = logger.info if status.is_optimal else logger.warning
        if status.is_optimal and x is not None:
            x = np.asarray(x, dtype=float)
            objective = program.objective_value(x)
        else:
            x, objective = None, None
        log(
            "solve.finished",
            backend=self.name,
            status=status.outcome.value,
            iterations=status.iterations,
            objective=objective,
            primal_residual=status.primal_residual,
            dual_residual=status.dual_residual,
            solve_time=round(status.solve_time, 4),
        )
        return SolveResult(status=status, x=x, objective=objective)


def psd_svec_rows(s: int):
    """Row indices (into the row-major s x s vectorization) and scales of the
    column-major upper triangle with off-diagonals scaled by sqrt(2)."""
    rows, scales = [], []
    for j in range(s):
        for i in range(j + 1):
            rows.append(i * s + j)
            scales.append(1.0 if i == j else SQRT2)
    return np.array(rows, dtype=int), np.array(scales)


# Clarabel status name -> outcome. AlmostSolved is deliberately not Optimal.
CLARABEL_STATUS_MAP = {
    "Solved": SolveOutcome.OPTIMAL,
    "PrimalInfeasible": SolveOutcome.PRIMAL_INFEASIBLE,
    "AlmostPrimalInfeasible": SolveOutcome.PRIMAL_INFEASIBLE,
    "DualInfeasible": SolveOutcome.DUAL_INFEASIBLE,
    "AlmostDualInfeasible": SolveOutcome.DUAL_INFEASIBLE,
    "MaxIterations": SolveOutcome.ITERATION_LIMIT,
    "MaxTime": SolveOutcome.TIME_LIMIT,
    "AlmostSolved": SolveOutcome.NUMERICAL_FAILURE,
    "NumericalError": SolveOutcome.NUMERICAL_FAILURE,
    "InsufficientProgress": SolveOutcome.NUMERICAL_FAILURE,
}


class ClarabelBackend(SolverBackend):
    """Direct adapter to the Clarabel interior-point solver."""

    def __init__(self):
        super().__init__("clarabel", "1.0")

    def build_problem(self, program: ConicProgram):
        """
        Clarabel standard form: A z + s = b, s in K, i.e. A = -G, b = g for
        each cone expression G z + g. Squared objective terms become P.
        """
        import clarabel

        A_parts: List[sp.csr_matrix] = []
        b_parts: List[np.ndarray] = []
        cones: List[Any] = []

        zero = program.blocks("zero")
        nonneg = program.blocks("nonneg")
        if zero:
            A_parts += [-c.expr.A for c in zero]
            b_parts += [c.expr.b for c in zero]
            cones.append(clarabel.ZeroConeT(sum(c.dim for c in zero)))
        if nonneg:
            A_parts += [-c.expr.A for c in nonneg]
            b_parts += [c.expr.b for c in nonneg]
            cones.append(clarabel.NonnegativeConeT(sum(c.dim for c in nonneg)))
        for c in program.blocks("soc"):
            A_parts.append(-c.expr.A)
            b_parts.append(c.expr.b)
            cones.append(clarabel.SecondOrderConeT(c.dim))
        for c in program.blocks("psd"):
            rows, scales = psd_svec_rows(c.dim)
            D = sp.diags(scales)
            A_parts.append(-(D @ c.expr.A[rows]))
            b_parts.append(scales * c.expr.b[rows])
            cones.append(clarabel.PSDTriangleConeT(c.dim))

        n = program.num_vars
        A = sp.vstack(A_parts, format="csc") if A_parts else sp.csc_matrix((0, n))
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        # Clarabel minimizes 1/2 z^T P z + q^T z with P upper triangular
        H, h, _ = program.quadratic_form()
        P = sp.triu(2.0 * H, format="csc")
        q = program.objective if program.objective is not None else np.zeros(n)
        return P, np.asarray(q, dtype=float) + h, A, b, cones

    def solve(self, program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
        import clarabel

        settings = settings or SolverSettings()
        P, q, A, b, cones = self.build_problem(program)

        opts = clarabel.DefaultSettings()
        opts.verbose = settings.verbose
        opts.max_iter = settings.max_iterations
        opts.tol_gap_abs = settings.abs_tol
        opts.tol_gap_rel = settings.rel_tol
        opts.tol_feas = settings.abs_tol
        if settings.time_limit_seconds is not None:
            opts.time_limit = float(settings.time_limit_seconds)

        start = time.perf_counter()
        try:
            solver = clarabel.DefaultSolver(P, q, A, b, cones, opts)
            sol = solver.solve()
        except Exception as e:
            raise SolverError(f"Clarabel failed: {e}", backend=self.name,
                              diagnostics={"num_vars": program.num_vars, "rows": int(A.shape[0])})
        elapsed = time.perf_counter() - start

        status_name = str(sol.status).split(".")[-1]
        outcome = CLARABEL_STATUS_MAP.get(status_name, SolveOutcome.NUMERICAL_FAILURE)
        obj_p = float(getattr(sol, "obj_val", float("nan")))
        obj_d = float(getattr(sol, "obj_val_dual", float("nan")))
        status = SolveStatus(
            outcome=outcome,
            iterations=int(getattr(sol, "iterations", 0)),
            primal_residual=float(getattr(sol, "r_prim", float("nan"))),
            dual_residual=float(getattr(sol, "r_dual", float("nan"))),
            duality_gap=abs(obj_p - obj_d),
            solve_time=float(getattr(sol, "solve_time", elapsed)),
            message=status_name,
        )
        return self._finish(program, status, np.array(sol.x) if outcome is SolveOutcome.OPTIMAL else None)


class CvxpyBackend(SolverBackend):
    """Hands the same program to any cvxpy-supported conic solver (default SCS)."""

    def __init__(self, solver: str = "SCS"):
        super().__init__("cvxpy" if solver.upper() == "SCS" else f"cvxpy:{solver.upper()}", "1.0")
        self.solver = solver.upper()

    def _solver_options(self, settings: SolverSettings) -> Dict[str, Any]:
        if self.solver == "SCS":
            opts = {"eps_abs": settings.abs_tol, "eps_rel": settings.rel_tol,
                    "max_iters": settings.max_iterations}
            if settings.time_limit_seconds is not None:
                opts["time_limit_secs"] = settings.time_limit_seconds
            return opts
        if self.solver == "CLARABEL":
            opts = {"tol_gap_abs": settings.abs_tol, "tol_gap_rel": settings.rel_tol,
                    "tol_feas": settings.abs_tol, "max_iter": settings.max_iterations}
            if settings.time_limit_seconds is not None:
                opts["time_limit"] = settings.time_limit_seconds
            return opts
        return {}

    def build_problem(self, program: ConicProgram):
        import cvxpy as cp

        z = cp.Variable(program.num_vars)
        constraints = []
        for c in program.cones:
            expr = c.expr.A @ z + c.expr.b
            if c.kind == "zero":
                constraints.append(expr == 0)
            elif c.kind == "nonneg":
                constraints.append(expr >= 0)
            elif c.kind == "soc":
                constraints.append(cp.SOC(expr[0], expr[1:]))
            else:
                s = c.dim
                M = cp.reshape(expr, (s, s), order="C")
                constraints.append((M + M.T) / 2 >> 0)
        q = program.objective if program.objective is not None else np.zeros(program.num_vars)
        objective = q @ z + program.objective_constant
        for e in program.squares:
            objective = objective + cp.sum_squares(e.A @ z + e.b)
        problem = cp.Problem(cp.Minimize(objective), constraints)
        return problem, z

    def solve(self, program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
        import cvxpy as cp

        settings = settings or SolverSettings()
        problem, z = self.build_problem(program)
        start = time.perf_counter()
        try:
            problem.solve(solver=self.solver, verbose=settings.verbose, **self._solver_options(settings))
        except cp.error.SolverError as e:
            elapsed = time.perf_counter() - start
            status = SolveStatus(SolveOutcome.NUMERICAL_FAILURE, solve_time=elapsed, message=str(e))
            return self._finish(program, status, None)
        except Exception as e:
            raise SolverError(f"cvxpy/{self.solver} failed: {e}", backend=self.name)
        elapsed = time.perf_counter() - start

        outcome = {
            cp.OPTIMAL: SolveOutcome.OPTIMAL,
            cp.INFEASIBLE: SolveOutcome.PRIMAL_INFEASIBLE,
            cp.INFEASIBLE_INACCURATE: SolveOutcome.PRIMAL_INFEASIBLE,
            cp.UNBOUNDED: SolveOutcome.DUAL_INFEASIBLE,
            cp.UNBOUNDED_INACCURATE: SolveOutcome.DUAL_INFEASIBLE,
            cp.USER_LIMIT: SolveOutcome.ITERATION_LIMIT,
        }.get(problem.status, SolveOutcome.NUMERICAL_FAILURE)
        stats = problem.solver_stats
        iterations = getattr(stats, "num_iters", None) or 0
        status = SolveStatus(
            outcome=outcome,
            iterations=int(iterations),
            solve_time=float(getattr(stats, "solve_time", None) or elapsed),
            message=str(problem.status),
        )
        return self._finish(program, status, z.value if outcome is SolveOutcome.OPTIMAL else None)


class BackendRegistry:
    """Registry for managing solver backends."""

    def __init__(self):
        self._backends: Dict[str, SolverBackend] = {}

    def register(self, backend: SolverBackend) -> None:
        """
        Register a backend.

        Raises:
            BackendRegistryError: If the name is already taken
        """
        if backend.name in self._backends:
            raise BackendRegistryError(f"Backend '{backend.name}' already registered", backend.name)
        self._backends[backend.name] = backend

    def unregister(self, name: str) -> None:
        if name not in self._backends:
            raise BackendRegistryError(f"Backend '{name}' not found", name)
        del self._backends[name]

    def get(self, name: str) -> SolverBackend:
        """
        Look up a backend by name; ``cvxpy:<SOLVER>`` names are created on demand.

        Raises:
            BackendRegistryError: If not found or disabled
        """
        if name.startswith("cvxpy:"):
            candidate = CvxpyBackend(name.split(":", 1)[1])
            name = candidate.name
            if name not in self._backends:
                self.register(candidate)
        if name not in self._backends:
            raise BackendRegistryError(
                f"Backend '{name}' not found (available: {', '.join(sorted(self._backends))})", name
            )
        backend = self._backends[name]
        if not backend.enabled:
            raise BackendRegistryError(f"Backend '{name}' is disabled", name)
        return backend

    def list_backends(self) -> List[Dict[str, Any]]:
        return [b.get_info() for b in self._backends.values()]


_registry: Optional[BackendRegistry] = None


def get_registry() -> BackendRegistry:
    """Process-wide registry holding the built-in backends."""
    global _registry
    if _registry is None:
        _registry = BackendRegistry()
        _registry.register(ClarabelBackend())
        _registry.register(CvxpyBackend())
    return _registry


def get_backend(name: str = "clarabel") -> SolverBackend:
    return get_registry().get(name)
