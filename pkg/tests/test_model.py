"""
Tests for the problem model types.
"""

import numpy as np
import pytest

from apps.covsteer import DimensionError, SystemModel, load_config, naive_variant
from apps.covsteer.model import instances_equal, serialize, stack_constraints
from apps.covsteer.validation import validate


class TestSystemModel:
    """Test dimension coercion of the dynamics."""

    def test_dimensions(self, double_integrator):
        """Reference instance has four states, two inputs, two channels."""
        assert double_integrator.n_x == 4
        assert double_integrator.n_u == 2
        assert double_integrator.m == 2
        assert double_integrator.N == 50

    def test_empty_channels(self):
        """m = 0 is represented by empty stacks."""
        model = SystemModel([[1.0]], [[1.0]], [0.0])
        assert model.m == 0
        assert model.A_tilde.shape == (0, 1, 1)
        assert model.B_tilde.shape == (0, 1, 1)
        assert model.d_tilde.shape == (0, 1)

    def test_non_square_a(self):
        """A_bar must be square."""
        with pytest.raises(DimensionError):
            SystemModel([[1.0, 0.0]], [[1.0]], [0.0])

    def test_channel_count_mismatch(self):
        """Every channel needs A_tilde, B_tilde and d_tilde entries."""
        with pytest.raises(DimensionError) as exc:
            SystemModel([[1.0]], [[1.0]], [0.0], [[[0.5]]], [[[0.0]], [[0.0]]], [[1.0]])
        assert exc.value.field == "system.B_tilde"

    def test_arrays_read_only(self, double_integrator):
        """Stored arrays cannot be mutated in place."""
        with pytest.raises(ValueError):
            double_integrator.model.A_bar[0, 0] = 5.0


class TestNaiveVariant:
    """Test the planning model that ignores multiplicative noise."""

    def test_zeroes_multiplicative_terms(self, double_integrator):
        """A_tilde, B_tilde vanish while d_tilde is kept."""
        naive = naive_variant(double_integrator)
        assert not np.any(naive.model.A_tilde)
        assert not np.any(naive.model.B_tilde)
        np.testing.assert_array_equal(naive.model.d_tilde, double_integrator.model.d_tilde)
        np.testing.assert_array_equal(naive.model.A_bar, double_integrator.model.A_bar)
        assert validate(naive) == []

    def test_idempotent(self, double_integrator):
        once = naive_variant(double_integrator)
        assert instances_equal(naive_variant(once), once)

    def test_fixed_point_without_channels(self, make_scalar):
        """An instance with m = 0 is unchanged."""
        inst = make_scalar()
        assert instances_equal(naive_variant(inst), inst)

    def test_input_only_channels(self, make_scalar):
        """Only B_tilde nonzero: variant zeroes it and stays valid."""
        inst = make_scalar(A_tilde=[0.0], B_tilde=[0.3], d_tilde=[0.1])
        naive = naive_variant(inst)
        assert not np.any(naive.model.B_tilde)
        assert validate(naive) == []


class TestSerialization:
    """Test the document form of an instance."""

    def test_reload_equal(self, double_integrator):
        """serialize output loads back to an equal instance."""
        assert instances_equal(load_config(serialize(double_integrator)), double_integrator)

    def test_stack_constraints(self, double_integrator):
        alpha, beta, p = stack_constraints(double_integrator.chance.state_constraints, 4)
        assert alpha.shape == (2, 4)
        np.testing.assert_allclose(beta, [0.1, 0.2])
        np.testing.assert_allclose(p, [0.2, 0.2])

    def test_stack_no_constraints(self):
        alpha, beta, p = stack_constraints((), 3)
        assert alpha.shape == (0, 3)
        assert beta.size == 0 and p.size == 0

    def test_regularized_terminal_bound(self, double_integrator):
        """with_regularization adds eps * I to the enforced bound only."""
        reg = double_integrator.with_regularization(1e-4)
        np.testing.assert_allclose(reg.boundary.Sigma_F_eff, reg.boundary.Sigma_F + 1e-4 * np.eye(4))
        np.testing.assert_array_equal(reg.boundary.Sigma_F, double_integrator.boundary.Sigma_F)
        assert double_integrator.boundary.sigma_f_regularization == 0.0
