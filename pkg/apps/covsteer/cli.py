"""
covsteer - Command Line Interface
Batch front end: solve, simulate, compare, emit-plot-data, backends.

Exit codes: 0 success/certified, 1 error, 2 infeasible, 3 uncertified.
"""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from . import serialization
from .config import CovSteerSettings, load_config_file
from .exceptions import CovSteerError, InfeasibleProblemError
from .manifest import RunManifest
from .model import naive_variant
from .monitoring import get_monitor
from .moments import load_policy, save_policy, trajectory_to_csv
from .montecarlo import EnsembleStats, compare, compare_to_csv, paths_to_csv, read_paths_csv, run_batch
from .plotdata import ELLIPSE_SIGMA, constraint_lines_csv, ellipse_csv, ellipse_points, parse_pair
from .sdp import assemble, plan
from .tighten import initial_schedule, schedule_to_csv
from .backends import get_backend, get_registry
from .utils.logger import configure_logging, setup_logger


EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_UNCERTIFIED = 3

app = typer.Typer(
    name="covsteer",
    help="Chance-constrained covariance steering under multiplicative noise.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console(stderr=True)
logger = setup_logger(__name__)


def _settings(**overrides: Any) -> CovSteerSettings:
    base = CovSteerSettings()
    updates = {k: v for k, v in overrides.items() if v is not None}
    settings = base.model_copy(update=updates)
    configure_logging(settings.log_level, settings.log_json)
    return settings


def _run(manifest: RunManifest, body: Callable[[], int], quiet: bool) -> None:
    """Run a command body, map errors to exit codes, finish the manifest."""
    try:
        code = body()
    except InfeasibleProblemError as e:
        logger.error("command.infeasible", command=manifest.command, error=e.message)
        if not quiet:
            console.print(f"[bold red]infeasible:[/] {escape(e.message)}")
        code = EXIT_INFEASIBLE
    except CovSteerError as e:
        logger.error("command.failed", command=manifest.command, error=e.message, error_code=e.error_code)
        console.print(f"[bold red]error ({e.error_code}):[/] {escape(e.message)}")
        code = EXIT_ERROR
    except OSError as e:
        logger.error("command.io_error", command=manifest.command, error=str(e))
        console.print(f"[bold red]I/O error:[/] {escape(str(e))}")
        code = EXIT_ERROR
    except Exception as e:
        logger.error("command.crashed", command=manifest.command, error=str(e), error_type=type(e).__name__)
        manifest.finish(EXIT_ERROR)
        raise
    logger.info("command.timings", command=manifest.command, stages=get_monitor().summary())
    manifest.finish(code)
    raise typer.Exit(code=code)


def _start(command: str, out_dir: Path, config: Optional[Path], settings: Dict[str, Any],
           seed: Optional[int] = None, inputs: Optional[Dict[str, Path]] = None) -> RunManifest:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.create(command, out_dir, config, settings, seed, inputs)
        manifest.write()
    except OSError as e:
        console.print(f"[bold red]I/O error:[/] {escape(str(e))}")
        raise typer.Exit(code=EXIT_ERROR)
    return manifest


def _summary(title: str, rows: List[tuple]) -> None:
    table = Table(title=title, show_header=True, header_style="bold")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    for name, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        table.add_row(name, str(value))
    console.print(table)


@app.command()
def solve(
    config: Path = typer.Option(..., "--config", "-c", help="Problem document (JSON)"),
    out_dir: Path = typer.Option(Path("out"), "--out-dir", "-o", help="Artifact directory"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Recorded in the manifest only"),
    iters: int = typer.Option(1, "--iters", min=1, help="Re-linearization iterations"),
    rel_tol_iter: float = typer.Option(1e-4, "--rel-tol-iter", help="Re-linearization stop tolerance"),
    abs_tol: Optional[float] = typer.Option(None, "--abs-tol", help="Solver absolute tolerance"),
    rel_tol: Optional[float] = typer.Option(None, "--rel-tol", help="Solver relative tolerance"),
    max_iters: Optional[int] = typer.Option(None, "--max-iters", help="Solver iteration limit"),
    time_limit: Optional[float] = typer.Option(None, "--time-limit", help="Solver time limit (s)"),
    backend: Optional[str] = typer.Option(None, "--backend", help="clarabel | cvxpy | cvxpy:<SOLVER>"),
    fallback_regularization: Optional[float] = typer.Option(
        None, "--fallback-regularization", help="eps for Sigma_F + eps*I retry (0 disables)"
    ),
    naive: bool = typer.Option(False, "--naive", help="Plan on the model without multiplicative noise"),
    dump_program: bool = typer.Option(False, "--dump-program", help="Write program.json"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Suppress the summary table"),
):
    """Plan a policy: writes solution.json, policy.json, certificate.json."""
    settings = _settings(
        abs_tol=abs_tol, rel_tol=rel_tol, max_iterations=max_iters,
        time_limit_seconds=time_limit, backend=backend,
        fallback_regularization=fallback_regularization,
    )
    manifest = _start(
        "solve", out_dir, config,
        {**settings.model_dump(), "iters": iters, "rel_tol_iter": rel_tol_iter, "naive": naive},
        seed,
    )

    def body() -> int:
        instance = load_config_file(config)
        if naive:
            instance = naive_variant(instance)
        solver = get_backend(settings.backend)
        if dump_program:
            schedule = initial_schedule(instance)
            serialization.write_json(out_dir / "program.json", assemble(instance, schedule).to_debug_dict())
            (out_dir / "schedule.csv").write_text(schedule_to_csv(schedule), encoding="utf-8")

        outcome = plan(
            instance, solver, settings.solver_settings(), iters=iters, rel_tol=rel_tol_iter,
            fallback_regularization=settings.fallback_regularization,
        )
        result = outcome.result
        solution_doc = {
            **result.solution.to_dict(),
            "sigma_f_regularization": outcome.regularization,
            "fallback_used": outcome.fell_back,
            "planning_model": "naive" if naive else "true",
            "best_iteration": result.best_iteration,
            "iterations_log": result.log,
            "warning": result.warning,
        }
        serialization.write_json(out_dir / "solution.json", solution_doc)
        save_policy(out_dir / "policy.json", result.policy)
        serialization.write_json(out_dir / "certificate.json", result.certificate.to_dict())
        (out_dir / "moments.csv").write_text(trajectory_to_csv(result.certificate.exact_traj), encoding="utf-8")

        cert = result.certificate
        if not quiet:
            _summary(f"covsteer solve: {config.name}", [
                ("status", result.solution.status.outcome.value),
                ("objective", result.solution.objective_value),
                ("exact cost", cert.exact_cost),
                ("regularization", outcome.regularization),
                ("terminal mean error", cert.terminal_mean_error),
                ("terminal cov margin", cert.terminal_cov_margin),
                ("worst state residual", cert.worst_state_residual),
                ("dominance margin", cert.dominance_margin),
                ("certified", cert.passed),
            ])
        if result.solution.is_optimal and cert.passed:
            return EXIT_OK
        for failure in cert.failures:
            console.print(f"[yellow]uncertified:[/] {escape(failure)}")
        return EXIT_UNCERTIFIED

    _run(manifest, body, quiet)


@app.command()
def simulate(
    config: Path = typer.Option(..., "--config", "-c", help="Truth problem document"),
    policy: Path = typer.Option(..., "--policy", "-p", help="policy.json from solve"),
    out_dir: Path = typer.Option(Path("out"), "--out-dir", "-o"),
    rollouts: int = typer.Option(2000, "--rollouts", "-M", min=2, help="Rollout count"),
    seed: int = typer.Option(0, "--seed", help="Master seed"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Worker threads"),
    paths: int = typer.Option(100, "--paths", min=0, help="Rollouts kept in paths.csv"),
    quiet: bool = typer.Option(False, "--quiet", "-q"),
):
    """Monte Carlo rollouts: writes stats.json and paths.csv."""
    settings = _settings(workers=workers)
    manifest = _start(
        "simulate", out_dir, config,
        {"rollouts": rollouts, "paths": paths, "workers": settings.workers},
        seed, {"policy": policy},
    )

    def body() -> int:
        instance = load_config_file(config)
        pol = load_policy(policy)
        stats = run_batch(instance, pol, rollouts, seed, workers=settings.workers, keep_paths=paths)
        serialization.write_json(out_dir / "stats.json", stats.to_dict())
        (out_dir / "paths.csv").write_text(paths_to_csv(stats), encoding="utf-8")
        if not quiet:
            worst = stats.violation_freq_state.max() if stats.violation_freq_state.size else None
            _summary(f"covsteer simulate: {config.name}", [
                ("rollouts", stats.M),
                ("diverged", stats.diverged),
                ("terminal cov vs Sigma_F", stats.terminal_cov_vs_F),
                ("jackknife margin", stats.terminal_cov_margin),
                ("worst state violation freq", None if worst is None else float(worst)),
                ("cost mean", stats.emp_cost_mean),
                ("cost stderr", stats.emp_cost_stderr),
            ])
        return EXIT_OK

    _run(manifest, body, quiet)


@app.command("compare")
def compare_cmd(
    truth: Path = typer.Option(..., "--truth", help="Truth problem document both policies run on"),
    policy_a: Path = typer.Option(..., "--policy-a"),
    policy_b: Path = typer.Option(..., "--policy-b"),
    label_a: str = typer.Option("proposed", "--label-a"),
    label_b: str = typer.Option("naive", "--label-b"),
    out_dir: Path = typer.Option(Path("out"), "--out-dir", "-o"),
    rollouts: int = typer.Option(2000, "--rollouts", "-M", min=2),
    seed: int = typer.Option(0, "--seed"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1),
    quiet: bool = typer.Option(False, "--quiet", "-q"),
):
    """Simulate two policies on one truth model: writes compare.json and compare.csv."""
    settings = _settings(workers=workers)
    manifest = _start(
        "compare", out_dir, truth,
        {"rollouts": rollouts, "workers": settings.workers, "labels": [label_a, label_b]},
        seed, {"policy_a": policy_a, "policy_b": policy_b},
    )

    def body() -> int:
        if label_a == label_b:
            raise CovSteerError("labels must differ")
        instance = load_config_file(truth)
        runs = []
        for label, path in ((label_a, policy_a), (label_b, policy_b)):
            stats = run_batch(instance, load_policy(path), rollouts, seed, workers=settings.workers, keep_paths=0)
            serialization.write_json(out_dir / f"stats_{label}.json", stats.to_dict())
            runs.append(stats)
        report = compare(runs[0], runs[1], instance.boundary.Sigma_F_eff, (label_a, label_b))
        serialization.write_json(out_dir / "compare.json", report)
        (out_dir / "compare.csv").write_text(compare_to_csv(report), encoding="utf-8")
        if not quiet:
            table = Table(title=f"covsteer compare: {truth.name}")
            table.add_column("metric")
            for label in (label_a, label_b):
                table.add_column(label, justify="right")
            for metric in ("terminal_cov_vs_F", "terminal_cov_margin", "verdict",
                           "worst_violation_freq_state", "emp_cost_mean"):
                cells = []
                for label in (label_a, label_b):
                    value = report["runs"][label][metric]
                    cells.append(f"{value:.6g}" if isinstance(value, float) else str(value))
                table.add_row(metric, *cells)
            console.print(table)
        return EXIT_OK

    _run(manifest, body, quiet)


@app.command("emit-plot-data")
def emit_plot_data(
    stats: Path = typer.Option(..., "--stats", help="stats.json from simulate"),
    paths: Optional[Path] = typer.Option(None, "--paths", help="paths.csv (widens the line extent)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Problem document for constraint lines"),
    pair: List[str] = typer.Option(["x_2,x_3"], "--pair", help="Coordinate pair, repeatable"),
    n_sigma: float = typer.Option(ELLIPSE_SIGMA, "--sigma", help="Ellipse radius in standard deviations"),
    out_dir: Path = typer.Option(Path("out"), "--out-dir", "-o"),
    quiet: bool = typer.Option(False, "--quiet", "-q"),
):
    """Terminal ellipse and constraint lines: writes ellipse.csv and constraint_lines.csv."""
    _settings()
    inputs = {"stats": stats}
    if paths is not None:
        inputs["paths"] = paths
    manifest = _start("emit-plot-data", out_dir, config, {"pair": pair, "sigma": n_sigma}, None, inputs)

    def body() -> int:
        import numpy as np

        ens = EnsembleStats.from_dict(serialization.read_json(stats))
        pairs = [parse_pair(p, ens.n_x) for p in pair]
        center, cov = ens.emp_mean[-1], ens.emp_cov[-1]
        sample = read_paths_csv(paths) if paths is not None else {}
        constraints = load_config_file(config).chance.state_constraints if config is not None else ()

        ellipse_parts, line_parts = [], []
        for a, b in pairs:
            text = ellipse_csv((a, b), center, cov, n_sigma=n_sigma)
            ellipse_parts.append(text if not ellipse_parts else text.split("\n", 1)[1])
            pts = ellipse_points(center[[a, b]], cov[np.ix_([a, b], [a, b])], n_sigma=n_sigma)
            if sample:
                pts = np.vstack([pts, *[p[:, [a, b]] for p in sample.values()]])
            lines = constraint_lines_csv(constraints, (a, b), center, pts)
            header, body_rows = lines.split("\n", 1)
            prefixed = "".join(f"x_{a}:x_{b},{row}\n" for row in body_rows.splitlines())
            line_parts.append(("pair," + header + "\n" if not line_parts else "") + prefixed)
        (out_dir / "ellipse.csv").write_text("".join(ellipse_parts), encoding="utf-8")
        (out_dir / "constraint_lines.csv").write_text("".join(line_parts), encoding="utf-8")
        if not quiet:
            console.print(f"wrote ellipse.csv and constraint_lines.csv for {len(pairs)} pair(s) to {out_dir}")
        return EXIT_OK

    _run(manifest, body, quiet)


@app.command("backends")
def list_backends_cmd():
    """List registered solver backends (pass any of them to --backend)."""
    table = Table(title="covsteer backends", show_header=True, header_style="bold")
    for column in ("name", "version", "enabled"):
        table.add_column(column)
    for info in get_registry().list_backends():
        table.add_row(info["name"], str(info["version"]), "yes" if info["enabled"] else "no")
    Console().print(table)


def main() -> None:
    app()


if __name__ == "__main__":
    main()
