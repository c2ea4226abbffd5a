"""
Tests for the conic program builder.
"""

import numpy as np
import pytest

from apps.covsteer import DimensionError
from apps.covsteer.conic import AffineExpr, ConicProgram, VarBlock, bmat, vstack


def _program_with_matrix(n=2):
    prog = ConicProgram()
    prog.add_variable("X", n, n, symmetric=True)
    prog.add_variable("Y", n, 3)
    return prog


class TestVarBlock:
    """Test variable layout."""

    def test_symmetric_size(self):
        assert VarBlock("S", 0, 4, 4, symmetric=True).size == 10

    def test_symmetric_extract(self):
        block = VarBlock("S", 1, 2, 2, symmetric=True)
        z = np.array([9.0, 1.0, 2.0, 3.0])
        np.testing.assert_array_equal(block.extract(z), [[1.0, 2.0], [2.0, 3.0]])

    def test_selector_matches_extract(self):
        prog = _program_with_matrix(3)
        z = np.arange(prog.num_vars, dtype=float)
        for name in ("X", "Y"):
            np.testing.assert_array_equal(prog.var(name).value(z), prog.var_map[name].extract(z))

    def test_duplicate_name(self):
        prog = ConicProgram()
        prog.add_variable("x", 1)
        with pytest.raises(DimensionError):
            prog.add_variable("x", 1)


class TestAffineExpr:
    """Test expression algebra against dense evaluation."""

    def test_congruence(self):
        prog = _program_with_matrix()
        rng = np.random.default_rng(0)
        z = rng.standard_normal(prog.num_vars)
        M, N = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        X = prog.var("X")
        np.testing.assert_allclose(X.congruence(M, N).value(z), M @ X.value(z) @ N.T)

    def test_products_and_transpose(self):
        prog = _program_with_matrix()
        z = np.linspace(-1.0, 1.0, prog.num_vars)
        Y = prog.var("Y")
        M = np.array([[1.0, 2.0], [0.0, -1.0]])
        N = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(Y.lmul(M).value(z), M @ Y.value(z))
        np.testing.assert_allclose(Y.rmul(N).value(z), Y.value(z) @ N)
        np.testing.assert_allclose(Y.T.value(z), Y.value(z).T)

    def test_arithmetic_with_constants(self):
        prog = _program_with_matrix()
        z = np.ones(prog.num_vars)
        X = prog.var("X")
        expr = 2.0 * X - np.eye(2) + X
        np.testing.assert_allclose(expr.value(z), 3.0 * np.ones((2, 2)) - np.eye(2))

    def test_shape_mismatch(self):
        prog = _program_with_matrix()
        with pytest.raises(DimensionError):
            prog.var("X") + prog.var("Y")

    def test_upper(self):
        prog = _program_with_matrix(3)
        z = np.arange(prog.num_vars, dtype=float)
        X = prog.var("X")
        iu = np.triu_indices(3)
        np.testing.assert_array_equal(X.upper().value(z).ravel(), X.value(z)[iu])

    def test_bmat(self):
        prog = _program_with_matrix()
        z = np.arange(prog.num_vars, dtype=float)
        X, Y = prog.var("X"), prog.var("Y")
        expr = bmat([[X, Y], [Y.T, prog.const(np.eye(3))]])
        Xv, Yv = X.value(z), Y.value(z)
        np.testing.assert_allclose(expr.value(z), np.block([[Xv, Yv], [Yv.T, np.eye(3)]]))

    def test_vstack(self):
        prog = _program_with_matrix()
        z = np.arange(prog.num_vars, dtype=float)
        X = prog.var("X")
        stacked = vstack([X, prog.const([7.0])])
        np.testing.assert_allclose(stacked.value(z).ravel(), [*X.value(z).ravel(), 7.0])

    def test_numpy_left_operand(self):
        """numpy arrays on the left defer to the expression."""
        prog = _program_with_matrix()
        expr = np.eye(2) + prog.var("X")
        assert isinstance(expr, AffineExpr)


class TestConicProgram:
    """Test program bookkeeping."""

    def test_census(self):
        prog = ConicProgram()
        prog.add_variable("t", 1)
        t = prog.var("t")
        prog.add_equality(t - 1.0)
        prog.add_nonneg(vstack([t, t]))
        prog.add_soc(vstack([t, prog.const(3.0), prog.const(4.0)]))
        prog.add_psd(bmat([[t, prog.const(1.0)], [prog.const(1.0), t]]))
        census = prog.census()
        assert census["zero_rows"] == 1
        assert census["nonneg_rows"] == 2
        assert census["soc_dims"] == [3]
        assert census["psd_dims"] == [2]

    def test_residuals(self):
        prog = ConicProgram()
        prog.add_variable("t", 1)
        t = prog.var("t")
        prog.add_nonneg(t - 3.0)
        prog.add_soc(vstack([t, prog.const(3.0), prog.const(4.0)]))
        res = prog.residuals(np.array([2.0]))
        assert res["nonneg"] == pytest.approx(1.0)
        assert res["soc"] == pytest.approx(3.0)
        assert res["zero"] == 0.0

    def test_objective(self):
        prog = ConicProgram()
        prog.add_variable("t", 2)
        t = prog.var("t")
        prog.set_objective(t.lmul(np.array([[1.0, 2.0]])) + 5.0)
        assert prog.objective_value(np.array([1.0, 1.0])) == pytest.approx(8.0)

    def test_non_scalar_objective(self):
        prog = ConicProgram()
        prog.add_variable("t", 2)
        with pytest.raises(DimensionError):
            prog.set_objective(prog.var("t"))


class TestSquaredObjective:
    """Test sum-of-squares objective terms."""

    def test_quadratic_form_matches_value(self):
        prog = ConicProgram()
        prog.add_variable("x", 2)
        x = prog.var("x")
        prog.add_square(x.lmul(np.array([[1.0, 2.0], [0.0, 3.0]])) - np.array([1.0, -1.0]))
        prog.set_objective(x.lmul(np.array([[0.5, 0.0]])) + 2.0)
        H, h, h0 = prog.quadratic_form()
        z = np.array([0.3, -1.2])
        assert z @ H @ z + h @ z + h0 + 0.5 * z[0] + 2.0 == pytest.approx(prog.objective_value(z))
        # (0.3 - 2.4 - 1)^2 + (-3.6 + 1)^2 + 0.15 + 2
        assert prog.objective_value(z) == pytest.approx(3.1 ** 2 + 2.6 ** 2 + 2.15)

    def test_empty_quadratic_form(self):
        prog = ConicProgram()
        prog.add_variable("x", 3)
        H, h, h0 = prog.quadratic_form()
        assert H.shape == (3, 3) and H.nnz == 0
        assert h0 == 0.0

    def test_census_counts_squares(self):
        prog = ConicProgram()
        prog.add_variable("x", 2)
        prog.add_square(prog.var("x"))
        assert prog.census()["square_terms"] == 1

    def test_foreign_expression(self):
        other = ConicProgram()
        other.add_variable("y", 4)
        prog = ConicProgram()
        prog.add_variable("x", 2)
        with pytest.raises(DimensionError):
            prog.add_square(other.var("y"))
