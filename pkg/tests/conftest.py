"""
Shared fixtures: small hand-checkable instances and the planar double
integrator reference configurations.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from apps.covsteer import (
    BoundaryMoments,
    ChanceSpec,
    CostWeights,
    HalfspaceConstraint,
    ProblemInstance,
    SystemModel,
    load_config_file,
)


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _mat(value, n):
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    return arr if arr.shape == (n, n) else float(value) * np.eye(n)


@pytest.fixture
def make_scalar():
    """Factory for one-dimensional instances (n_x = n_u = 1)."""

    def build(A=1.0, B=1.0, d=0.0, A_tilde=(), B_tilde=(), d_tilde=(),
              mu_I=1.0, Sigma_I=1.0, mu_F=0.0, Sigma_F=100.0, N=1,
              Q=1.0, R=1.0, state=(), inputs=(), p_x_total=0.4, p_u_total=0.4,
              regularization=0.0):
        m = len(d_tilde)
        A_tilde = list(A_tilde) or [0.0] * m
        B_tilde = list(B_tilde) or [0.0] * m
        model = SystemModel(
            [[A]], [[B]], [d],
            [[[a]] for a in A_tilde] if m else np.zeros((0, 1, 1)),
            [[[b]] for b in B_tilde] if m else np.zeros((0, 1, 1)),
            [[v] for v in d_tilde] if m else np.zeros((0, 1)),
        )
        boundary = BoundaryMoments([mu_I], [[Sigma_I]], [mu_F], [[Sigma_F]], N, regularization)
        chance = ChanceSpec(
            state_constraints=[HalfspaceConstraint([a], b, p) for a, b, p in state],
            input_constraints=[HalfspaceConstraint([a], b, p) for a, b, p in inputs],
            p_x_total=p_x_total,
            p_u_total=p_u_total,
        )
        return ProblemInstance(model, boundary, chance, CostWeights([[Q]], [[R]]))

    return build


@pytest.fixture
def make_instance():
    """Factory for general instances from plain arrays."""

    def build(A, B, d=None, A_tilde=None, B_tilde=None, d_tilde=None, mu_I=None,
              Sigma_I=1.0, mu_F=None, Sigma_F=1.0, N=1, Q=1.0, R=1.0,
              state=(), inputs=(), p_x_total=0.4, p_u_total=0.4):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        n_x, n_u = A.shape[0], B.shape[1]
        model = SystemModel(
            A, B,
            np.zeros(n_x) if d is None else d,
            np.zeros((0, n_x, n_x)) if A_tilde is None else A_tilde,
            np.zeros((0, n_x, n_u)) if B_tilde is None else B_tilde,
            np.zeros((0, n_x)) if d_tilde is None else d_tilde,
        )
        boundary = BoundaryMoments(
            np.zeros(n_x) if mu_I is None else mu_I, _mat(Sigma_I, n_x),
            np.zeros(n_x) if mu_F is None else mu_F, _mat(Sigma_F, n_x), N,
        )
        chance = ChanceSpec(
            state_constraints=[HalfspaceConstraint(a, b, p) for a, b, p in state],
            input_constraints=[HalfspaceConstraint(a, b, p) for a, b, p in inputs],
            p_x_total=p_x_total,
            p_u_total=p_u_total,
        )
        return ProblemInstance(model, boundary, chance, CostWeights(_mat(Q, n_x), _mat(R, n_u)))

    return build


@pytest.fixture
def config_path():
    """Path of a reference configuration by noise intensity."""

    def path(theta: str = "0.1") -> Path:
        return CONFIG_DIR / f"double_integrator_theta_{theta}.json"

    return path


@pytest.fixture
def double_integrator_doc(config_path):
    return json.loads(config_path("0.1").read_text(encoding="utf-8"))


@pytest.fixture
def double_integrator(config_path):
    return load_config_file(config_path("0.1"))
