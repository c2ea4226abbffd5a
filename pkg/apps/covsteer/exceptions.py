"""
covsteer - Custom Exception Hierarchy
Error handling for configuration, planning, certification and simulation.
"""

from typing import Any, Dict, List, Optional


class CovSteerError(Exception):
    """Base exception for all covsteer errors."""
    def __init__(self, message: str, error_code: str = "COVSTEER_ERROR"):
        self.message = message
        self.error_code = error_code
        super().__init__(self.message)


class ConfigError(CovSteerError):
    """Raised when a configuration document cannot be parsed."""
    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message, "CONFIG_ERROR")


class DimensionError(CovSteerError):
    """Raised when array shapes are inconsistent."""
    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message, "DIMENSION_ERROR")


class ValidationError(CovSteerError):
    """Raised when a problem instance violates an invariant."""
    def __init__(self, message: str, field: Optional[str] = None,
                 violations: Optional[List[Any]] = None):
        self.field = field
        self.violations = violations or []
        super().__init__(message, "VALIDATION_ERROR")


class NonFiniteError(CovSteerError):
    """Raised when a moment recursion overflows."""
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message, "NON_FINITE_ERROR")


class SolverError(CovSteerError):
    """Raised when a conic backend fails."""
    def __init__(self, message: str, backend: Optional[str] = None,
                 diagnostics: Optional[Dict[str, Any]] = None):
        self.backend = backend
        self.diagnostics = diagnostics or {}
        super().__init__(message, "SOLVER_ERROR")


class InfeasibleProblemError(CovSteerError):
    """Raised when the convex program is reported infeasible."""
    def __init__(self, message: str, status: Any = None):
        self.status = status
        super().__init__(message, "INFEASIBLE_ERROR")


class PolicyRecoveryError(CovSteerError):
    """Raised when a feedback gain cannot be recovered."""
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message, "POLICY_RECOVERY_ERROR")


class SimulationError(CovSteerError):
    """Raised when a Monte Carlo rollout diverges."""
    def __init__(self, message: str, rollout: Optional[int] = None,
                 step: Optional[int] = None):
        self.rollout = rollout
        self.step = step
        super().__init__(message, "SIMULATION_ERROR")


class BackendRegistryError(CovSteerError):
    """Raised when solver backend registration or lookup fails."""
    def __init__(self, message: str, backend_name: Optional[str] = None):
        self.backend_name = backend_name
        super().__init__(message, "BACKEND_ERROR")
