"""
covsteer - Monte Carlo Simulation
Ground-truth rollouts of the closed loop with multiplicative and additive
Gaussian noise. Every rollout owns a random stream derived from
(master_seed, rollout_index), and rollouts run in fixed-size chunks, so the
statistics do not depend on the worker count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import serialization
from .exceptions import DimensionError, SimulationError
from .model import ProblemInstance, SystemModel, stack_constraints
from .moments import MeanTrajectory, Policy, propagate_mean
from .monitoring import get_monitor
from .utils.linalg import min_eig, symmetrize
from .utils.logger import setup_logger


logger = setup_logger(__name__)

CHUNK_SIZE = 256
DEFAULT_KEEP_PATHS = 100


@dataclass(frozen=True, eq=False)
class NoiseSequence:
    """Standard normal draws q[j, k] for one rollout, with their provenance."""
    q: np.ndarray  # (m, N)
    master_seed: Optional[int] = None
    rollout_index: Optional[int] = None

    @staticmethod
    def rng(master_seed: int, rollout_index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(rollout_index),))
        )

    @classmethod
    def draw(cls, rng: np.random.Generator, m: int, N: int,
             master_seed: Optional[int] = None, rollout_index: Optional[int] = None) -> "NoiseSequence":
        return cls(rng.standard_normal((m, N)), master_seed, rollout_index)


def draw_rollout(master_seed: int, rollout_index: int, mu_I: np.ndarray, chol_I: np.ndarray,
                 m: int, N: int) -> Tuple[np.ndarray, NoiseSequence]:
    """Initial state, then noise, from the rollout's own stream."""
    rng = NoiseSequence.rng(master_seed, rollout_index)
    x0 = mu_I + chol_I @ rng.standard_normal(mu_I.size)
    return x0, NoiseSequence.draw(rng, m, N, master_seed, rollout_index)


def simulate_paths(model: SystemModel, policy: Policy, x_bar: np.ndarray,
                   x0: np.ndarray, q: np.ndarray):
    """
    Propagate a batch of rollouts.

    Args:
        model: True dynamics
        policy: Affine policy
        x_bar: Planned mean states (N+1, n_x) used by the feedback law
        x0: Initial states (b, n_x)
        q: Noise (b, m, N)

    Returns:
        (X (b, N+1, n_x), U (b, N, n_u), first_bad_step (b,), -1 when finite)
    """
    b = x0.shape[0]
    N = policy.N
    X = np.full((b, N + 1, model.n_x), np.nan)
    U = np.full((b, N, model.n_u), np.nan)
    bad = np.full(b, -1, dtype=int)
    X[:, 0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            x = X[:, k]
            u = (x - x_bar[k]) @ policy.L[k].T + policy.c[k]
            nxt = x @ model.A_bar.T + u @ model.B_bar.T + model.d_bar
            for j in range(model.m):
                nxt = nxt + q[:, j, k, None] * (x @ model.A_tilde[j].T + u @ model.B_tilde[j].T + model.d_tilde[j])
            U[:, k] = u
            X[:, k + 1] = nxt
            newly = (bad < 0) & ~np.all(np.isfinite(nxt), axis=1)
            bad[newly] = k + 1
    return X, U, bad


@dataclass(frozen=True, eq=False)
class SamplePath:
    x: np.ndarray  # (N+1, n_x)
    u: np.ndarray  # (N, n_u)


def rollout(model: SystemModel, policy: Policy, x0: np.ndarray, mean_traj: MeanTrajectory,
            noise: NoiseSequence) -> SamplePath:
    """
    One closed-loop sample path u_k = L_k (x_k - x_bar_k) + c_k.

    Raises:
        SimulationError: If the state becomes non-finite (names the step)
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,) or noise.q.shape != (model.m, policy.N):
        raise DimensionError("initial state or noise shape does not match model/policy", "rollout")
    X, U, bad = simulate_paths(model, policy, mean_traj.x_bar, x0[None, :], noise.q[None])
    if bad[0] >= 0:
        raise SimulationError(f"state became non-finite at step {bad[0]}",
                              rollout=noise.rollout_index, step=int(bad[0]))
    return SamplePath(x=X[0], u=U[0])


@dataclass(eq=False)
class EnsembleStats:
    """Empirical statistics of a batch of rollouts."""
    M: int
    master_seed: int
    diverged: int
    emp_mean: np.ndarray                   # (N+1, n_x)
    emp_cov: np.ndarray                    # (N+1, n_x, n_x)
    violation_freq_state: np.ndarray       # (N_s, N)
    violation_freq_input: np.ndarray       # (N_c, N)
    emp_cost_mean: float
    emp_cost_stderr: float
    terminal_cov_vs_F: float
    terminal_cov_stderr: float
    terminal_cov_margin: float
    emp_cov_stderr_terminal: np.ndarray    # (n_x, n_x)
    diverged_rollouts: List[Dict[str, int]] = field(default_factory=list)
    sample_indices: Optional[np.ndarray] = None
    sample_paths: Optional[np.ndarray] = None   # (keep, N+1, n_x)

    @property
    def N(self) -> int:
        return self.emp_mean.shape[0] - 1

    @property
    def n_x(self) -> int:
        return self.emp_mean.shape[1]

    @property
    def M_valid(self) -> int:
        return self.M - self.diverged

    def to_dict(self) -> Dict[str, Any]:
        return {
            "M": self.M,
            "M_valid": self.M_valid,
            "master_seed": self.master_seed,
            "diverged": self.diverged,
            "diverged_rollouts": list(self.diverged_rollouts),
            "emp_mean": self.emp_mean,
            "emp_cov": self.emp_cov,
            "violation_freq_state": self.violation_freq_state,
            "violation_freq_input": self.violation_freq_input,
            "emp_cost_mean": self.emp_cost_mean,
            "emp_cost_stderr": self.emp_cost_stderr,
            "terminal_cov_vs_F": self.terminal_cov_vs_F,
            "terminal_cov_stderr": self.terminal_cov_stderr,
            "terminal_cov_margin": self.terminal_cov_margin,
            "emp_cov_stderr_terminal": self.emp_cov_stderr_terminal,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnsembleStats":
        try:
            emp_mean = np.array(data["emp_mean"], dtype=float)
            N = emp_mean.shape[0] - 1
            vs = np.array(data["violation_freq_state"], dtype=float).reshape(-1, N)
            vi = np.array(data["violation_freq_input"], dtype=float).reshape(-1, N)
            return cls(
                M=int(data["M"]),
                master_seed=int(data["master_seed"]),
                diverged=int(data["diverged"]),
                emp_mean=emp_mean,
                emp_cov=np.array(data["emp_cov"], dtype=float),
                violation_freq_state=vs,
                violation_freq_input=vi,
                emp_cost_mean=_opt_float(data["emp_cost_mean"]),
                emp_cost_stderr=_opt_float(data["emp_cost_stderr"]),
                terminal_cov_vs_F=_opt_float(data["terminal_cov_vs_F"]),
                terminal_cov_stderr=_opt_float(data["terminal_cov_stderr"]),
                terminal_cov_margin=_opt_float(data["terminal_cov_margin"]),
                emp_cov_stderr_terminal=np.array(
                    [[_opt_float(v) for v in row] for row in data["emp_cov_stderr_terminal"]]
                ).reshape(emp_mean.shape[1], emp_mean.shape[1]),
                diverged_rollouts=list(data.get("diverged_rollouts", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DimensionError(f"malformed statistics document: {e}", field="stats")


def _opt_float(value: Any) -> float:
    """JSON null (a non-finite value on write) reads back as inf."""
    return math.inf if value is None else float(value)


def _sample_cov(X: np.ndarray) -> np.ndarray:
    """Unbiased covariance of rows of X, shape (n, n); zero for fewer than 2 rows."""
    M = X.shape[0]
    if M < 2:
        return np.zeros((X.shape[1], X.shape[1]))
    D = X - X.mean(axis=0)
    return symmetrize(D.T @ D / (M - 1))


def jackknife_terminal(samples: np.ndarray, Sigma_F: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Leave-one-out standard errors of min_eig(Sigma_F - cov) and of each
    covariance entry, from rank-one downdates of the scatter matrix.
    """
    M, n = samples.shape
    if M < 3:
        return math.inf, np.full((n, n), math.inf)
    mean = samples.mean(axis=0)
    D = samples - mean
    S = D.T @ D
    scale = M / (M - 1.0)
    covs = (S[None] - scale * np.einsum("ia,ib->iab", D, D)) / max(M - 2, 1)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    thetas = np.linalg.eigvalsh(Sigma_F[None] - covs)[:, 0]
    factor = (M - 1.0) / M
    se_theta = math.sqrt(factor * float(np.sum((thetas - thetas.mean()) ** 2)))
    se_cov = np.sqrt(factor * np.sum((covs - covs.mean(axis=0)) ** 2, axis=0))
    return se_theta, se_cov


def _chunk_runner(instance: ProblemInstance, policy: Policy, x_bar: np.ndarray,
                  chol_I: np.ndarray, master_seed: int):
    model = instance.model
    N, m = instance.N, instance.m
    mu_I = instance.boundary.mu_I

    def run(indices: Sequence[int]):
        x0 = np.empty((len(indices), model.n_x))
        q = np.empty((len(indices), m, N))
        for row, idx in enumerate(indices):
            x0[row], noise = draw_rollout(master_seed, idx, mu_I, chol_I, m, N)
            q[row] = noise.q
        return simulate_paths(model, policy, x_bar, x0, q)

    return run


def run_batch(instance: ProblemInstance, policy: Policy, M: int, master_seed: int,
              workers: int = 1, keep_paths: int = DEFAULT_KEEP_PATHS) -> EnsembleStats:
    """
    Simulate M rollouts of ``policy`` on the true dynamics of ``instance``.

    Args:
        instance: Truth model, initial moments, constraints and costs
        policy: Affine policy (dimensions must match the instance)
        M: Rollout count (>= 2)
        master_seed: Seed from which every rollout stream is derived
        workers: Thread count; does not change the results
        keep_paths: Number of leading rollouts kept for paths.csv

    Returns:
        EnsembleStats; diverged rollouts are excluded from moments and listed

    Raises:
        DimensionError: If the policy does not fit the instance or M < 2
    """
    if M < 2:
        raise DimensionError(f"need at least 2 rollouts, got M={M}", field="M")
    policy.check_compatible(instance)
    model, chance = instance.model, instance.chance
    N = instance.N

    means = propagate_mean(model, policy.c, instance.boundary.mu_I, N)
    chol_I = np.linalg.cholesky(symmetrize(instance.boundary.Sigma_I))
    runner = _chunk_runner(instance, policy, means.x_bar, chol_I, master_seed)
    chunks = [list(range(s, min(s + CHUNK_SIZE, M))) for s in range(0, M, CHUNK_SIZE)]

    with get_monitor().measure("simulate", {"M": M, "workers": workers}):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                parts = list(executor.map(runner, chunks))
        else:
            parts = [runner(chunk) for chunk in chunks]

    X = np.concatenate([p[0] for p in parts])
    U = np.concatenate([p[1] for p in parts])
    bad = np.concatenate([p[2] for p in parts])
    ok = bad < 0
    diverged_rollouts = [{"rollout": int(i), "step": int(bad[i])} for i in np.flatnonzero(~ok)]
    if diverged_rollouts:
        logger.warning("simulate.diverged", count=len(diverged_rollouts), first=diverged_rollouts[0])
    Xv, Uv = X[ok], U[ok]
    M_valid = Xv.shape[0]
    if M_valid < 2:
        raise SimulationError(f"only {M_valid} of {M} rollouts stayed finite")

    emp_mean = Xv.mean(axis=0)
    emp_cov = np.array([_sample_cov(Xv[:, k]) for k in range(N + 1)])

    def frequencies(constraints, V: np.ndarray) -> np.ndarray:
        alpha, beta, _ = stack_constraints(constraints, V.shape[2])
        if alpha.shape[0] == 0:
            return np.zeros((0, N))
        proj = np.einsum("ia,mka->imk", alpha, V[:, :N])
        return (proj > beta[:, None, None]).mean(axis=1)

    freq_x = frequencies(chance.state_constraints, Xv)
    freq_u = frequencies(chance.input_constraints, Uv)

    costs = np.zeros(M_valid)
    for k in range(N):
        Q, R = instance.cost.stage(k)
        costs += np.einsum("ma,ab,mb->m", Xv[:, k], Q, Xv[:, k])
        costs += np.einsum("ma,ab,mb->m", Uv[:, k], R, Uv[:, k])

    Sigma_F = instance.boundary.Sigma_F_eff
    terminal = min_eig(Sigma_F - emp_cov[N])
    se_theta, se_cov = jackknife_terminal(Xv[:, N], Sigma_F)

    keep = np.flatnonzero(ok)[:max(keep_paths, 0)]
    stats = EnsembleStats(
        M=M,
        master_seed=int(master_seed),
        diverged=int(M - M_valid),
        emp_mean=emp_mean,
        emp_cov=emp_cov,
        violation_freq_state=freq_x,
        violation_freq_input=freq_u,
        emp_cost_mean=float(costs.mean()),
        emp_cost_stderr=float(costs.std(ddof=1) / math.sqrt(M_valid)),
        terminal_cov_vs_F=terminal,
        terminal_cov_stderr=se_theta,
        terminal_cov_margin=3.0 * se_theta,
        emp_cov_stderr_terminal=se_cov,
        diverged_rollouts=diverged_rollouts,
        sample_indices=keep,
        sample_paths=X[keep],
    )
    logger.info(
        "simulate.finished",
        M=M,
        diverged=stats.diverged,
        terminal_cov_vs_F=terminal,
        terminal_cov_margin=stats.terminal_cov_margin,
        emp_cost_mean=stats.emp_cost_mean,
    )
    return stats


def paths_to_csv(stats: EnsembleStats) -> str:
    """paths.csv: one row per (rollout, k) of the kept subsample."""
    n_x = stats.n_x
    header = ["rollout", "k"] + [f"x_{i}" for i in range(n_x)]
    rows = []
    if stats.sample_paths is not None:
        for idx, path in zip(stats.sample_indices, stats.sample_paths):
            for k in range(path.shape[0]):
                rows.append([int(idx), k, *path[k]])
    return serialization.csv_text(header, rows)


def read_paths_csv(path) -> Dict[int, np.ndarray]:
    """Rollout index -> (N+1, n_x) array from a paths.csv file."""
    records = serialization.read_csv(path)
    grouped: Dict[int, List[Tuple[int, List[float]]]] = {}
    for rec in records:
        coords = sorted((k for k in rec if k.startswith("x_")), key=lambda s: int(s[2:]))
        grouped.setdefault(int(rec["rollout"]), []).append(
            (int(rec["k"]), [float(rec[c]) for c in coords])
        )
    return {idx: np.array([v for _, v in sorted(rows)]) for idx, rows in grouped.items()}


def _worst(freq: np.ndarray) -> Optional[float]:
    return float(freq.max()) if freq.size else None


def compare(a: EnsembleStats, b: EnsembleStats, Sigma_F: np.ndarray,
            labels: Tuple[str, str] = ("a", "b")) -> Dict[str, Any]:
    """
    Side-by-side report of two ensembles simulated on the same truth model.

    A run's terminal bound is respected iff min_eig(Sigma_F - emp_cov[N]) is at
    least minus its jackknife margin.

    Raises:
        DimensionError: On different horizons or state dimensions
    """
    if a.N != b.N or a.n_x != b.n_x:
        raise DimensionError(
            f"cannot compare runs with (N, n_x) = {(a.N, a.n_x)} and {(b.N, b.n_x)}", field="stats"
        )
    Sigma_F = np.asarray(Sigma_F, dtype=float)
    if Sigma_F.shape != (a.n_x, a.n_x):
        raise DimensionError(f"Sigma_F must be {a.n_x}x{a.n_x}", field="Sigma_F")

    runs: Dict[str, Dict[str, Any]] = {}
    for label, stats in zip(labels, (a, b)):
        vs_F = min_eig(Sigma_F - stats.emp_cov[-1])
        respected = vs_F >= -stats.terminal_cov_margin
        runs[label] = {
            "M": stats.M,
            "diverged": stats.diverged,
            "terminal_cov_vs_F": vs_F,
            "terminal_cov_margin": stats.terminal_cov_margin,
            "terminal_bound_respected": bool(respected),
            "verdict": "terminal bound respected" if respected else "terminal bound violated",
            "worst_violation_freq_state": _worst(stats.violation_freq_state),
            "worst_violation_freq_input": _worst(stats.violation_freq_input),
            "emp_cost_mean": stats.emp_cost_mean,
            "emp_cost_stderr": stats.emp_cost_stderr,
        }
    order = sorted(labels, key=lambda lbl: (runs[lbl]["emp_cost_mean"], labels.index(lbl)))
    return {"labels": list(labels), "runs": runs, "cost_order": order}


COMPARE_METRICS = (
    "M",
    "diverged",
    "terminal_cov_vs_F",
    "terminal_cov_margin",
    "terminal_bound_respected",
    "worst_violation_freq_state",
    "worst_violation_freq_input",
    "emp_cost_mean",
    "emp_cost_stderr",
)


def compare_to_csv(report: Dict[str, Any]) -> str:
    labels = report["labels"]
    rows = []
    for metric in COMPARE_METRICS:
        row: List[Any] = [metric]
        for label in labels:
            value = report["runs"][label][metric]
            row.append("" if value is None else value)
        rows.append(row)
    return serialization.csv_text(["metric", *labels], rows)
