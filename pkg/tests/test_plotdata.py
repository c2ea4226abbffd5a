"""
Tests for ellipse and constraint-line plot data.
"""

import math

import numpy as np
import pytest

from apps.covsteer import DimensionError, HalfspaceConstraint
from apps.covsteer.plotdata import (
    constraint_line,
    constraint_lines_csv,
    ellipse_csv,
    ellipse_points,
    inside_ellipse,
    parse_pair,
)


class TestParsePair:
    """Test coordinate pair parsing."""

    def test_valid(self):
        assert parse_pair("x_2,x_3", 4) == (2, 3)
        assert parse_pair(" x_0 , x_1 ", 2) == (0, 1)

    @pytest.mark.parametrize("text", ["x_2", "x_2,x_9", "y_0,x_1", "x_1,x_1", "x_0,x_1,x_2"])
    def test_invalid(self, text):
        with pytest.raises(DimensionError):
            parse_pair(text, 4)


class TestEllipse:
    """Test covariance ellipses."""

    def test_points_on_boundary(self):
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        center = np.array([0.5, -1.0])
        pts = ellipse_points(center, cov, n_points=64, n_sigma=2.0)
        D = pts - center
        mahal = np.einsum("ia,ab,ib->i", D, np.linalg.inv(cov), D)
        np.testing.assert_allclose(mahal, 4.0, rtol=1e-10)

    def test_two_sigma_coverage(self):
        """A 2-sigma ellipse holds 1 - exp(-2) of planar Gaussian samples."""
        rng = np.random.default_rng(0)
        cov = np.array([[1.0, -0.4], [-0.4, 0.5]])
        samples = rng.multivariate_normal([0.0, 0.0], cov, size=20000)
        frac = inside_ellipse(samples, np.zeros(2), cov, n_sigma=2.0).mean()
        assert frac == pytest.approx(1.0 - math.exp(-2.0), abs=0.01)

    def test_degenerate_covariance(self):
        pts = ellipse_points(np.zeros(2), np.diag([1.0, 0.0]), n_points=8)
        np.testing.assert_allclose(pts[:, 1], 0.0, atol=1e-12)

    def test_wrong_shape(self):
        with pytest.raises(DimensionError):
            ellipse_points(np.zeros(3), np.eye(3))

    def test_csv(self):
        text = ellipse_csv((2, 3), np.zeros(4), np.eye(4), n_points=16)
        lines = text.splitlines()
        assert lines[0] == "pair,point,first,second"
        assert len(lines) == 17
        assert lines[1].startswith("x_2:x_3,0,")


class TestConstraintLines:
    """Test halfspace boundaries projected to a coordinate pair."""

    def test_line_on_boundary(self):
        con = HalfspaceConstraint([0.0, 0.0, -0.5, 1.0], 0.1, 0.2)
        line = constraint_line(con, (2, 3), np.zeros(4), (-2.0, 2.0, -2.0, 2.0))
        for p in line:
            assert -0.5 * p[0] + p[1] == pytest.approx(0.1)

    def test_other_coordinates_fixed(self):
        con = HalfspaceConstraint([1.0, 0.0, 1.0], 1.0, 0.2)
        line = constraint_line(con, (0, 1), np.array([0.0, 0.0, 0.5]), (-1.0, 1.0, -1.0, 1.0))
        np.testing.assert_allclose(line[:, 0], 0.5)

    def test_no_weight_on_pair(self):
        con = HalfspaceConstraint([1.0, 0.0, 0.0, 0.0], 1.0, 0.2)
        assert constraint_line(con, (2, 3), np.zeros(4), (-1.0, 1.0, -1.0, 1.0)) is None

    def test_csv(self, double_integrator):
        pts = ellipse_points(np.zeros(2), 0.01 * np.eye(2))
        text = constraint_lines_csv(double_integrator.chance.state_constraints, (2, 3), np.zeros(4), pts)
        lines = text.splitlines()
        assert lines[0] == "constraint_index,endpoint,first,second"
        assert len(lines) == 5
