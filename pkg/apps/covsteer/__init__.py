"""
covsteer - Covariance Steering Under Multiplicative Noise

Plans affine feedback policies that move the state distribution of a
discrete-time linear system with state- and input-dependent noise from
given initial moments to a terminal mean and covariance bound, while
meeting halfspace chance constraints. Components:
- Exact first/second moment propagation
- Tangent-line tightening of Cantelli chance constraints
- Conic program assembly with Clarabel / CVXPY backends
- Exact-moment certification and iterative re-linearization
- Reproducible Monte Carlo validation and comparison
"""

from .exceptions import (
    CovSteerError,
    ConfigError,
    DimensionError,
    ValidationError,
    NonFiniteError,
    SolverError,
    InfeasibleProblemError,
    PolicyRecoveryError,
    SimulationError,
    BackendRegistryError
)

from .model import (
    SystemModel,
    BoundaryMoments,
    HalfspaceConstraint,
    ChanceSpec,
    CostWeights,
    ProblemInstance,
    naive_variant
)

from .config import (
    CovSteerSettings,
    load_config,
    load_config_file
)

from .moments import (
    Policy,
    MomentTrajectory,
    propagate,
    exact_cost
)

from .tighten import (
    LinearizationSchedule,
    allocate_risk,
    cantelli_factor,
    initial_schedule
)

from .backends import (
    SolveOutcome,
    SolveStatus,
    SolverSettings,
    SolverBackend,
    ClarabelBackend,
    CvxpyBackend,
    BackendRegistry,
    get_backend
)

from .sdp import (
    RelaxedSolution,
    Certificate,
    assemble,
    solve_relaxation,
    recover_policy,
    certify,
    iterate_relinearize,
    plan
)

from .montecarlo import (
    EnsembleStats,
    run_batch,
    compare
)

__version__ = "0.1.0"

__all__ = [
    # Exceptions
    "CovSteerError",
    "ConfigError",
    "DimensionError",
    "ValidationError",
    "NonFiniteError",
    "SolverError",
    "InfeasibleProblemError",
    "PolicyRecoveryError",
    "SimulationError",
    "BackendRegistryError",
    # Model
    "SystemModel",
    "BoundaryMoments",
    "HalfspaceConstraint",
    "ChanceSpec",
    "CostWeights",
    "ProblemInstance",
    "naive_variant",
    # Config
    "CovSteerSettings",
    "load_config",
    "load_config_file",
    # Moments
    "Policy",
    "MomentTrajectory",
    "propagate",
    "exact_cost",
    # Tightening
    "LinearizationSchedule",
    "allocate_risk",
    "cantelli_factor",
    "initial_schedule",
    # Backends
    "SolveOutcome",
    "SolveStatus",
    "SolverSettings",
    "SolverBackend",
    "ClarabelBackend",
    "CvxpyBackend",
    "BackendRegistry",
    "get_backend",
    # Planning
    "RelaxedSolution",
    "Certificate",
    "assemble",
    "solve_relaxation",
    "recover_policy",
    "certify",
    "iterate_relinearize",
    "plan",
    # Monte Carlo
    "EnsembleStats",
    "run_batch",
    "compare",
]
