"""
Tests for Monte Carlo rollouts and ensemble statistics.
"""

import numpy as np
import pytest

from apps.covsteer import DimensionError, EnsembleStats, Policy, SimulationError, compare, propagate, run_batch
from apps.covsteer.moments import propagate_mean
from apps.covsteer.montecarlo import (
    NoiseSequence,
    compare_to_csv,
    draw_rollout,
    jackknife_terminal,
    paths_to_csv,
    read_paths_csv,
    rollout,
    simulate_paths,
)
from apps.covsteer.serialization import dumps


@pytest.fixture
def scalar_noisy(make_scalar):
    return make_scalar(A_tilde=[0.5], B_tilde=[0.0], d_tilde=[1.0], mu_I=1.0, Sigma_I=1.0)


class TestRollout:
    """Test single sample paths."""

    def test_deterministic_path(self, make_instance):
        """Without channels and at x0 = mu_I the path is the mean trajectory."""
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.0], [0.1]])
        inst = make_instance(A, B, mu_I=[1.0, -1.0], N=4)
        policy = Policy(np.tile([[-0.3, -0.7]], (4, 1, 1)), np.ones((4, 1)))
        means = propagate_mean(inst.model, policy.c, inst.boundary.mu_I, 4)
        path = rollout(inst.model, policy, inst.boundary.mu_I, means, NoiseSequence(np.zeros((0, 4))))
        np.testing.assert_allclose(path.x, means.x_bar)

    def test_hand_evaluated_step(self, scalar_noisy):
        """x1 = 1 + 1 * (0.5 * 1 + 1) = 2.5."""
        means = propagate_mean(scalar_noisy.model, [[0.0]], [1.0], 1)
        path = rollout(scalar_noisy.model, Policy.zeros(1, 1, 1), [1.0], means, NoiseSequence(np.array([[1.0]])))
        assert path.x[1, 0] == pytest.approx(2.5)

    def test_divergence_names_step(self, make_scalar):
        inst = make_scalar(A=1e300, N=3)
        means = propagate_mean(inst.model, np.zeros((3, 1)), [1.0], 3)
        with pytest.raises(SimulationError) as exc:
            rollout(inst.model, Policy.zeros(3, 1, 1), [1.0], means, NoiseSequence(np.zeros((0, 3))))
        assert exc.value.step == 2

    def test_streams_reproducible(self):
        x0a, qa = draw_rollout(42, 7, np.zeros(2), np.eye(2), 3, 5)
        x0b, qb = draw_rollout(42, 7, np.zeros(2), np.eye(2), 3, 5)
        x0c, _ = draw_rollout(42, 8, np.zeros(2), np.eye(2), 3, 5)
        np.testing.assert_array_equal(x0a, x0b)
        np.testing.assert_array_equal(qa.q, qb.q)
        assert not np.array_equal(x0a, x0c)


class TestRunBatch:
    """Test ensemble simulation."""

    def test_matches_exact_moments(self, scalar_noisy):
        traj = propagate(scalar_noisy, Policy.zeros(1, 1, 1))
        stats = run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 40000, master_seed=3, keep_paths=0)
        assert stats.emp_cov[1][0, 0] == pytest.approx(traj.Sigma_x[1][0, 0], rel=0.08)
        assert stats.emp_mean[1][0] == pytest.approx(traj.x_bar[1][0], abs=0.05)

    def test_cost_matches_exact(self, scalar_noisy):
        from apps.covsteer import exact_cost

        policy = Policy.zeros(1, 1, 1)
        expected = exact_cost(propagate(scalar_noisy, policy), scalar_noisy.cost)
        stats = run_batch(scalar_noisy, policy, 20000, master_seed=11, keep_paths=0)
        assert abs(stats.emp_cost_mean - expected) <= 4 * stats.emp_cost_stderr

    def test_worker_count_invariant(self, scalar_noisy):
        """Bytes of stats do not depend on the worker count."""
        policy = Policy.zeros(1, 1, 1)
        one = run_batch(scalar_noisy, policy, 1000, master_seed=5, workers=1)
        four = run_batch(scalar_noisy, policy, 1000, master_seed=5, workers=4)
        assert dumps(one.to_dict()) == dumps(four.to_dict())
        assert paths_to_csv(one) == paths_to_csv(four)

    def test_seed_changes_result(self, scalar_noisy):
        policy = Policy.zeros(1, 1, 1)
        a = run_batch(scalar_noisy, policy, 500, master_seed=1)
        b = run_batch(scalar_noisy, policy, 500, master_seed=2)
        assert a.emp_mean[1][0] != b.emp_mean[1][0]

    def test_prefix_stable(self, scalar_noisy):
        """Rollout i is the same whatever M is."""
        policy = Policy.zeros(1, 1, 1)
        small = run_batch(scalar_noisy, policy, 10, master_seed=9, keep_paths=10)
        large = run_batch(scalar_noisy, policy, 600, master_seed=9, keep_paths=10)
        np.testing.assert_array_equal(small.sample_paths, large.sample_paths)

    def test_two_rollouts_rank_one(self, make_instance):
        inst = make_instance(np.eye(2), np.eye(2), Sigma_I=1.0, N=3)
        stats = run_batch(inst, Policy.zeros(3, 2, 2), 2, master_seed=0)
        for k in range(4):
            assert np.linalg.matrix_rank(stats.emp_cov[k], tol=1e-12) <= 1

    def test_violation_frequencies(self, make_scalar):
        """Pr(x_0 > mu_I) is one half for a symmetric initial law."""
        inst = make_scalar(mu_I=0.0, Sigma_I=1.0, N=1, state=[(1.0, 0.0, 0.4)])
        stats = run_batch(inst, Policy.zeros(1, 1, 1), 4000, master_seed=4)
        assert stats.violation_freq_state.shape == (1, 1)
        assert stats.violation_freq_state[0, 0] == pytest.approx(0.5, abs=0.04)

    def test_divergent_rollouts_excluded(self, make_scalar):
        inst = make_scalar(A=1e300, mu_I=1.0, N=2)
        with pytest.raises(SimulationError):
            run_batch(inst, Policy.zeros(2, 1, 1), 10, master_seed=0)

    def test_too_few_rollouts(self, scalar_noisy):
        with pytest.raises(DimensionError):
            run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 1, master_seed=0)

    def test_policy_mismatch(self, scalar_noisy):
        with pytest.raises(DimensionError):
            run_batch(scalar_noisy, Policy.zeros(2, 1, 1), 10, master_seed=0)

    def test_stats_document(self, scalar_noisy):
        stats = run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 50, master_seed=0)
        loaded = EnsembleStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(loaded.emp_cov, stats.emp_cov)
        assert loaded.M == 50

    def test_paths_csv(self, tmp_path, scalar_noisy):
        stats = run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 20, master_seed=0, keep_paths=5)
        path = tmp_path / "paths.csv"
        path.write_text(paths_to_csv(stats), encoding="utf-8")
        paths = read_paths_csv(path)
        assert sorted(paths) == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(paths[3], stats.sample_paths[3])


class TestSampling:
    """Test statistical properties of the rollout ensemble."""

    def test_state_independent_of_current_noise(self, make_scalar):
        """x_k is built from q_0..q_{k-1} only."""
        inst = make_scalar(A_tilde=[0.5], d_tilde=[1.0], mu_I=1.0, Sigma_I=1.0, N=3)
        policy = Policy.zeros(3, 1, 1)
        M = 10000
        draws = [draw_rollout(17, i, inst.boundary.mu_I, np.linalg.cholesky(inst.boundary.Sigma_I), 1, 3)
                 for i in range(M)]
        x0 = np.stack([d[0] for d in draws])
        q = np.stack([d[1].q for d in draws])
        x_bar = propagate_mean(inst.model, policy.c, inst.boundary.mu_I, 3).x_bar
        X, _, bad = simulate_paths(inst.model, policy, x_bar, x0, q)
        assert np.all(bad < 0)
        for k in range(3):
            corr = np.corrcoef(X[:, k, 0], q[:, 0, k])[0, 1]
            assert abs(corr) <= 3.0 / np.sqrt(M), (k, corr)
        # x_1 = x_0 + (0.5 x_0 + 1) q_0, so the past draw shows through
        assert np.corrcoef(X[:, 1, 0], q[:, 0, 0])[0, 1] > 0.5

    def test_error_shrinks_with_root_m(self, make_instance):
        """Moment errors fall by about sqrt(10) per decade of M."""
        inst = make_instance(
            [[1.0, 0.1], [0.0, 1.0]], [[0.0], [0.1]],
            A_tilde=0.1 * np.eye(2)[None], B_tilde=np.zeros((1, 2, 1)), d_tilde=[[0.05, 0.05]],
            mu_I=[1.0, 0.0], Sigma_I=0.5, N=8,
        )
        policy = Policy.zeros(8, 1, 2)
        traj = propagate(inst, policy)

        def rms_error(M):
            sq = []
            for seed in range(8):
                stats = run_batch(inst, policy, M, master_seed=seed, keep_paths=0)
                sq.append(np.sum((stats.emp_mean - traj.x_bar) ** 2)
                          + np.sum((stats.emp_cov - traj.Sigma_x) ** 2))
            return np.sqrt(np.mean(sq))

        errors = [rms_error(M) for M in (100, 1000, 10000)]
        for coarse, fine in zip(errors, errors[1:]):
            assert np.sqrt(10) / 3 <= coarse / fine <= 3 * np.sqrt(10), errors


class TestJackknife:
    """Test the terminal covariance error bars."""

    def test_shrinks_with_samples(self):
        rng = np.random.default_rng(0)
        Sigma_F = np.eye(2)
        small, _ = jackknife_terminal(rng.standard_normal((200, 2)), Sigma_F)
        large, _ = jackknife_terminal(rng.standard_normal((5000, 2)), Sigma_F)
        assert large < small

    def test_leave_one_out_matches_direct(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((12, 2))
        Sigma_F = 2.0 * np.eye(2)
        se, _ = jackknife_terminal(X, Sigma_F)
        thetas = []
        for i in range(12):
            rest = np.delete(X, i, axis=0)
            thetas.append(np.linalg.eigvalsh(Sigma_F - np.cov(rest.T))[0])
        thetas = np.array(thetas)
        direct = np.sqrt(11 / 12 * np.sum((thetas - thetas.mean()) ** 2))
        assert se == pytest.approx(direct, rel=1e-10)


class TestCompare:
    """Test side-by-side reports."""

    def test_report(self, scalar_noisy):
        stats = run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 200, master_seed=0)
        report = compare(stats, stats, np.array([[1.0]]), ("proposed", "naive"))
        assert report["labels"] == ["proposed", "naive"]
        assert report["runs"]["proposed"]["verdict"] == "terminal bound violated"
        assert report["cost_order"] == ["proposed", "naive"]
        text = compare_to_csv(report)
        assert text.splitlines()[0] == "metric,proposed,naive"
        assert "terminal_bound_respected,false,false" in text

    def test_horizon_mismatch(self, scalar_noisy, make_scalar):
        a = run_batch(scalar_noisy, Policy.zeros(1, 1, 1), 20, master_seed=0)
        other = make_scalar(N=2)
        b = run_batch(other, Policy.zeros(2, 1, 1), 20, master_seed=0)
        with pytest.raises(DimensionError):
            compare(a, b, np.eye(1))
