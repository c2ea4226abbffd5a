"""
Tests for program assembly, policy recovery, certification and
re-linearization.
"""

import numpy as np
import pytest

from apps.covsteer import (
    DimensionError,
    InfeasibleProblemError,
    Policy,
    PolicyRecoveryError,
    RelaxedSolution,
    SolveOutcome,
    SolveStatus,
    assemble,
    certify,
    compare,
    initial_schedule,
    iterate_relinearize,
    naive_variant,
    plan,
    recover_policy,
    run_batch,
    solve_relaxation,
)
from apps.covsteer.config import load_config_file
from apps.covsteer.tighten import LinearizationSchedule


OPTIMAL = SolveStatus(SolveOutcome.OPTIMAL)


@pytest.fixture
def small_noisy(make_scalar):
    """Scalar instance with multiplicative noise and one state constraint."""
    return make_scalar(
        A_tilde=[0.1], B_tilde=[0.1], d_tilde=[0.05],
        mu_I=1.0, Sigma_I=0.1, mu_F=0.0, Sigma_F=0.5, N=3,
        state=[(-1.0, 2.0, 0.1)], p_x_total=0.1,
    )


def _solution(Sigma_x, Sigma_ux):
    Sigma_x = np.asarray(Sigma_x, dtype=float)
    Sigma_ux = np.asarray(Sigma_ux, dtype=float)
    N, n_u, n_x = Sigma_ux.shape
    return RelaxedSolution(
        status=OPTIMAL, objective_value=0.0, c=np.zeros((N, n_u)),
        x_bar=np.zeros((N + 1, n_x)), u_bar=np.zeros((N, n_u)),
        Sigma_bar_x=Sigma_x, Sigma_bar_ux=Sigma_ux,
        Sigma_bar_u=np.zeros((N, n_u, n_u)), Sigma_bar_j=np.zeros((0, N, n_x, n_x)),
    )


class TestAssemble:
    """Test the block census of assembled programs."""

    def test_reference_census(self, double_integrator):
        """Per step: one 6x6 input block and two 5x5 noise blocks; one terminal 4x4 block."""
        prog = assemble(double_integrator, initial_schedule(double_integrator))
        census = prog.census()
        assert census["psd_blocks"] == 50 * 3 + 1
        assert sorted(census["psd_dims"]) == sorted([6] * 50 + [5] * 100 + [4])
        assert census["nonneg_rows"] == 100
        assert census["soc_blocks"] == 0
        assert census["square_terms"] == 2 * 50
        labels = prog.to_debug_dict()["cone_labels"]["zero"]
        assert sum(lbl.startswith("mean_step_") for lbl in labels) == 50
        assert sum(lbl.startswith("cov_step_") for lbl in labels) == 50

    def test_no_channels(self, make_scalar):
        prog = assemble(make_scalar(), initial_schedule(make_scalar()))
        assert not any(name.startswith("Sj_") for name in prog.var_map)
        assert prog.census()["psd_dims"] == [2, 1]

    def test_no_input_constraints(self, double_integrator):
        prog = assemble(double_integrator, initial_schedule(double_integrator))
        assert [c.dim for c in prog.blocks("nonneg")] == [100]

    def test_schedule_mismatch(self, double_integrator):
        schedule = initial_schedule(double_integrator)
        bad = LinearizationSchedule(schedule.lambda_state[:, :10], schedule.lambda_input, schedule.Sigma_nom)
        with pytest.raises(DimensionError):
            assemble(double_integrator, bad)


class TestSolveRelaxation:
    """Test solving assembled programs."""

    def test_small_instance_optimal(self, small_noisy):
        sol = solve_relaxation(assemble(small_noisy, initial_schedule(small_noisy)))
        assert sol.is_optimal
        assert np.isfinite(sol.objective_value)
        np.testing.assert_allclose(sol.x_bar[-1], [0.0], atol=1e-6)

    def test_solution_satisfies_assembled_rows(self, small_noisy):
        """Plugging the solver output back into every block stays within tolerance."""
        prog = assemble(small_noisy, initial_schedule(small_noisy))
        sol = solve_relaxation(prog)
        assert sol.is_optimal
        residuals = prog.residuals(sol.z)
        assert residuals["zero"] <= 1e-6
        for kind in ("nonneg", "soc", "psd"):
            assert residuals[kind] <= 1e-6, kind
        assert prog.objective_value(sol.z) == pytest.approx(sol.objective_value, rel=1e-12)

    def test_infeasible_initial_mean(self, make_scalar):
        """Initial mean already beyond a tight constraint."""
        inst = make_scalar(mu_I=1.0, Sigma_I=0.1, N=2, state=[(1.0, 0.5, 0.01)], p_x_total=0.01)
        sol = solve_relaxation(assemble(inst, initial_schedule(inst)))
        assert sol.status.outcome is SolveOutcome.PRIMAL_INFEASIBLE
        assert sol.Sigma_bar_x is None

    def test_mean_steering_matches_least_squares(self, make_instance):
        """No noise, no constraints, loose terminal bound: c solves the LQ mean problem."""
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.0], [0.1]])
        N = 5
        inst = make_instance(A, B, mu_I=[1.0, 0.0], Sigma_I=0.1, Sigma_F=100.0, N=N)
        sol = solve_relaxation(assemble(inst, initial_schedule(inst)))
        assert sol.is_optimal

        # x_k = A^k mu_I + G_k u, minimize sum_k |x_k|^2 + |u_k|^2 s.t. x_N = 0
        G = np.zeros((N + 1, 2, N))
        h = np.zeros((N + 1, 2))
        h[0] = [1.0, 0.0]
        for k in range(N):
            G[k + 1] = A @ G[k]
            G[k + 1][:, k] += B[:, 0]
            h[k + 1] = A @ h[k]
        H = sum(G[k].T @ G[k] for k in range(N)) + np.eye(N)
        f = sum(G[k].T @ h[k] for k in range(N))
        kkt = np.block([[2 * H, G[N].T], [G[N], np.zeros((2, 2))]])
        rhs = np.concatenate([-2 * f, -h[N]])
        u_star = np.linalg.solve(kkt, rhs)[:N]
        np.testing.assert_allclose(sol.c.ravel(), u_star, atol=1e-5)


class TestRecoverPolicy:
    """Test gain recovery L = Sigma_ux Sigma_x^-1."""

    def test_open_loop(self):
        sol = _solution(np.array([np.eye(2)] * 3), np.zeros((2, 1, 2)))
        np.testing.assert_allclose(recover_policy(sol).L, 0.0)

    def test_identity_covariance(self):
        Sux = np.array([[[1.0, -2.0]], [[0.5, 0.25]]])
        sol = _solution(np.array([np.eye(2)] * 3), Sux)
        np.testing.assert_allclose(recover_policy(sol).L, Sux)

    def test_scalar_division(self):
        sol = _solution([[[4.0]], [[1.0]]], [[[2.0]]])
        np.testing.assert_allclose(recover_policy(sol).L, [[[0.5]]])

    def test_non_optimal(self):
        with pytest.raises(PolicyRecoveryError):
            recover_policy(RelaxedSolution(status=SolveStatus(SolveOutcome.PRIMAL_INFEASIBLE)))

    def test_zero_covariance(self):
        with pytest.raises(PolicyRecoveryError) as exc:
            recover_policy(_solution([[[0.0]], [[1.0]]], [[[0.0]]]))
        assert exc.value.step == 0


class TestCertify:
    """Test exact-moment certification."""

    def test_uncontrolled_covariance_fails(self, make_scalar):
        inst = make_scalar(mu_I=0.0, Sigma_I=1.0, Sigma_F=0.5, N=1)
        cert = certify(inst, Policy.zeros(1, 1, 1))
        assert not cert.passed
        assert cert.terminal_cov_margin == pytest.approx(-0.5)
        assert cert.dominance_margin is None and cert.objective_gap is None

    def test_no_constraints_residual(self, make_scalar):
        cert = certify(make_scalar(mu_I=0.0), Policy.zeros(1, 1, 1))
        assert cert.worst_state_residual is None
        assert cert.worst_input_residual is None
        assert cert.passed

    def test_relaxed_solution_certifies(self, small_noisy):
        sol = solve_relaxation(assemble(small_noisy, initial_schedule(small_noisy)))
        cert = certify(small_noisy, recover_policy(sol), sol)
        assert cert.passed, cert.failures
        assert cert.dominance_margin >= -1e-7
        assert cert.objective_gap >= -1e-6
        assert cert.to_dict()["pass"] is True


class TestIterate:
    """Test iterative re-linearization and the planning entry point."""

    def test_single_iteration_matches_solve(self, small_noisy):
        single = solve_relaxation(assemble(small_noisy, initial_schedule(small_noisy)))
        result = iterate_relinearize(small_noisy, max_iters=1)
        assert result.solution.objective_value == pytest.approx(single.objective_value, rel=1e-8)
        assert len(result.log) == 1
        assert result.warning is None

    def test_objective_nonincreasing(self, small_noisy):
        result = iterate_relinearize(small_noisy, max_iters=4, rel_tol=1e-9)
        objectives = [rec.objective for rec in result.log if rec.objective is not None]
        assert all(b <= a + 1e-6 for a, b in zip(objectives, objectives[1:]))

    def test_first_iterate_infeasible(self, make_scalar):
        inst = make_scalar(mu_I=1.0, Sigma_I=0.1, N=2, state=[(1.0, 0.5, 0.01)], p_x_total=0.01)
        with pytest.raises(InfeasibleProblemError):
            iterate_relinearize(inst, max_iters=3)

    def test_plan_fallback_still_infeasible(self, make_scalar):
        inst = make_scalar(mu_I=1.0, Sigma_I=0.1, N=2, state=[(1.0, 0.5, 0.01)], p_x_total=0.01)
        with pytest.raises(InfeasibleProblemError):
            plan(inst, fallback_regularization=1e-4)

    def test_plan_without_fallback(self, small_noisy):
        outcome = plan(small_noisy)
        assert not outcome.fell_back
        assert outcome.regularization == 0.0
        assert outcome.result.certificate.passed

    def test_invalid_iteration_count(self, small_noisy):
        with pytest.raises(ValueError):
            iterate_relinearize(small_noisy, max_iters=0)


@pytest.mark.slow
class TestDoubleIntegrator:
    """End-to-end planning on the reference configurations."""

    def test_planned_policy_certifies(self, double_integrator):
        outcome = plan(double_integrator)
        result = outcome.result
        assert result.solution.is_optimal
        assert result.certificate.passed, result.certificate.failures
        assert result.certificate.dominance_margin >= -1e-7
        assert result.certificate.objective_gap >= -1e-6

    def test_relinearization_monotone(self, double_integrator):
        result = plan(double_integrator, iters=5, rel_tol=1e-4).result
        objectives = [rec.objective for rec in result.log if rec.objective is not None]
        assert all(b <= a + 1e-6 for a, b in zip(objectives, objectives[1:]))

    def test_naive_policy_fails_on_truth(self, config_path):
        truth = load_config_file(config_path("1.0"))
        naive = plan(naive_variant(truth))
        cert = certify(naive.instance.with_regularization(0.0), naive.result.policy)
        cert_truth = certify(truth.with_regularization(naive.regularization), naive.result.policy)
        assert cert.terminal_mean_error < 1e-6
        assert not cert_truth.passed
        assert cert_truth.terminal_cov_margin < 0.0

    def test_monte_carlo_verdicts_at_high_noise(self, config_path):
        """Rollouts on the true model: the planned policy keeps the terminal bound, the naive one breaks it."""
        truth = load_config_file(config_path("1.0"))
        proposed = plan(truth)
        naive = plan(naive_variant(truth))
        scored = truth.with_regularization(proposed.regularization)
        stats_p = run_batch(scored, proposed.result.policy, 2000, master_seed=42, keep_paths=0)
        stats_n = run_batch(scored, naive.result.policy, 2000, master_seed=42, keep_paths=0)
        report = compare(stats_p, stats_n, scored.boundary.Sigma_F_eff, ("proposed", "naive"))
        assert report["runs"]["proposed"]["terminal_bound_respected"]
        assert report["runs"]["naive"]["terminal_cov_vs_F"] < 0.0

    @pytest.mark.parametrize("theta", ["0.1", "0.5", "1.0"])
    def test_violation_frequencies_within_budget(self, config_path, theta):
        outcome = plan(load_config_file(config_path(theta)))
        assert outcome.result.certificate.passed, outcome.result.certificate.failures
        M = 2000
        stats = run_batch(outcome.instance, outcome.result.policy, M, master_seed=42, keep_paths=0)
        for i, con in enumerate(outcome.instance.chance.state_constraints):
            bound = con.p + 3.0 * np.sqrt(con.p * (1.0 - con.p) / M)
            assert np.all(stats.violation_freq_state[i] <= bound), (i, stats.violation_freq_state[i].max())
