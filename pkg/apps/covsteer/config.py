"""
covsteer - Configuration
Problem documents (JSON, parsed with pydantic) and runtime settings
(environment variables with the COVSTEER_ prefix, via pydantic-settings).
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pydantic
from pydantic import BaseModel, ConfigDict, Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError, DimensionError, ValidationError
from .model import (
    BoundaryMoments,
    ChanceSpec,
    CostWeights,
    HalfspaceConstraint,
    ProblemInstance,
    SystemModel,
)
from .tighten import allocate_risk
from .utils.linalg import clamp_psd
from .utils.logger import setup_logger
from .validation import first_dimension_violation, validate


logger = setup_logger(__name__)

Matrix = List[List[float]]
Vector = List[float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    A_bar: Matrix
    B_bar: Matrix
    d_bar: Vector
    A_tilde: List[Matrix] = Field(default_factory=list)
    B_tilde: List[Matrix] = Field(default_factory=list)
    d_tilde: List[Vector] = Field(default_factory=list)


class BoundarySection(_Section):
    mu_I: Vector
    Sigma_I: Matrix
    mu_F: Vector
    Sigma_F: Matrix
    N: int


class ConstraintEntry(_Section):
    alpha: Vector
    beta: float
    p: Optional[float] = None


class ChanceSection(_Section):
    p_x_total: float
    p_u_total: float
    state_constraints: List[ConstraintEntry] = Field(default_factory=list)
    input_constraints: List[ConstraintEntry] = Field(default_factory=list)


class CostSection(_Section):
    Q: Matrix
    R: Matrix
    Q_seq: Optional[List[Matrix]] = None
    R_seq: Optional[List[Matrix]] = None


class ConfigDocument(_Section):
    """Top-level problem document."""
    system: SystemSection
    boundary: BoundarySection
    chance: ChanceSection
    cost: CostSection
    sigma_f_regularization: float = 0.0
    name: Optional[str] = None
    description: Optional[str] = None
    meta: Dict[str, Any] = Field(default_factory=dict)


class CovSteerSettings(BaseSettings):
    """Runtime settings; CLI flags override environment values."""
    model_config = SettingsConfigDict(env_prefix="COVSTEER_", extra="ignore")

    backend: str = "clarabel"
    abs_tol: float = Field(default=1e-8, gt=0)
    rel_tol: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=20000, gt=0)
    time_limit_seconds: Optional[float] = Field(default=None, gt=0)
    verbose: bool = False
    log_level: str = "INFO"
    log_json: bool = False
    workers: int = Field(default=1, ge=1)
    fallback_regularization: float = Field(default=1e-4, ge=0)

    def solver_settings(self):
        """SolverSettings for the backend layer."""
        from .backends import SolverSettings

        return SolverSettings(
            abs_tol=self.abs_tol,
            rel_tol=self.rel_tol,
            max_iterations=self.max_iterations,
            time_limit_seconds=self.time_limit_seconds,
            verbose=self.verbose,
        )


def _field_path(loc) -> str:
    parts: List[str] = []
    for item in loc:
        if isinstance(item, int):
            parts.append(f"[{item}]")
        else:
            parts.append(("." if parts else "") + str(item))
    return "".join(parts)


def _constraints(entries: List[ConstraintEntry], total: float) -> List[HalfspaceConstraint]:
    if not entries:
        return []
    missing = [i for i, e in enumerate(entries) if e.p is None]
    # omitted budgets share whatever the explicit ones leave, uniformly
    defaults: List[float] = []
    if missing:
        explicit = sum(e.p for e in entries if e.p is not None)
        remaining = total - explicit
        if 0.0 < remaining < 0.5:
            defaults = allocate_risk(remaining, len(missing))
        else:
            defaults = [remaining / len(missing)] * len(missing)
    fill = iter(defaults)
    return [
        HalfspaceConstraint(e.alpha, e.beta, e.p if e.p is not None else next(fill))
        for e in entries
    ]


def _build_instance(doc: ConfigDocument) -> ProblemInstance:
    s, b, c, w = doc.system, doc.boundary, doc.chance, doc.cost
    model = SystemModel(s.A_bar, s.B_bar, s.d_bar, s.A_tilde, s.B_tilde, s.d_tilde)
    boundary = BoundaryMoments(b.mu_I, b.Sigma_I, b.mu_F, b.Sigma_F, b.N, doc.sigma_f_regularization)
    chance = ChanceSpec(
        state_constraints=_constraints(c.state_constraints, c.p_x_total),
        input_constraints=_constraints(c.input_constraints, c.p_u_total),
        p_x_total=c.p_x_total,
        p_u_total=c.p_u_total,
    )
    cost = CostWeights(w.Q, w.R, w.Q_seq, w.R_seq)
    return ProblemInstance(model, boundary, chance, cost, name=doc.name, meta=dict(doc.meta))


def _clamp_costs(instance: ProblemInstance) -> ProblemInstance:
    cost = instance.cost
    Q = clamp_psd(cost.Q, field="cost.Q")
    R = clamp_psd(cost.R, field="cost.R")
    Q_seq = None if cost.Q_seq is None else [clamp_psd(q, field="cost.Q_seq") for q in cost.Q_seq]
    R_seq = None if cost.R_seq is None else [clamp_psd(r, field="cost.R_seq") for r in cost.R_seq]
    return ProblemInstance(
        instance.model, instance.boundary, instance.chance,
        CostWeights(Q, R, Q_seq, R_seq),
        name=instance.name, meta=instance.meta,
    )


def load_config(text: Union[str, bytes]) -> ProblemInstance:
    """
    Parse and validate a problem document.

    Args:
        text: JSON document

    Returns:
        Validated ProblemInstance with Q/R clamped to PSD

    Raises:
        ConfigError: Malformed document, unknown or missing field, wrong type
        DimensionError: Inconsistent matrix/vector sizes
        ValidationError: Any other invariant violation (all are listed)
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed configuration document: {e.msg} (line {e.lineno})")

    try:
        doc = ConfigDocument.model_validate(raw)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        path = _field_path(first["loc"])
        raise ConfigError(f"{path}: {first['msg']}", field=path)

    try:
        instance = _build_instance(doc)
    except ValueError as e:
        # ragged nested lists
        raise DimensionError(f"inconsistent array dimensions: {e}")

    violations = validate(instance)
    dim = first_dimension_violation(violations)
    if dim is not None:
        raise DimensionError(dim.message, field=dim.field)
    if violations:
        first = violations[0]
        raise ValidationError(
            "; ".join(v.message for v in violations),
            field=first.field,
            violations=[str(v) for v in violations],
        )

    instance = _clamp_costs(instance)
    logger.debug(
        "config.loaded",
        name=instance.name, n_x=instance.n_x, n_u=instance.n_u, m=instance.m, N=instance.N,
    )
    return instance


def load_config_file(path: Union[str, Path]) -> ProblemInstance:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e}", field=str(path))
    return load_config(text)
