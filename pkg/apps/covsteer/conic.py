"""
covsteer - Conic Program Builder
Solver-agnostic conic programs over a single variable vector z:

    minimize    sum_i ||F_i z + f_i||^2 + objective^T z + objective_constant
    subject to  E z + e  = 0              (zero cone)
                G z + g >= 0              (nonnegative cone)
                (t, x) in SOC, ||x|| <= t (second-order cone)
                mat(P z + p) >= 0         (PSD cone, symmetric s x s blocks)

Matrix-valued affine expressions are stored as sparse maps onto their
row-major vectorization, so congruences M X N^T become Kronecker products.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .exceptions import DimensionError
from .utils.linalg import min_eig, symmetrize


@dataclass(frozen=True)
class VarBlock:
    """Named contiguous range of z holding one (possibly symmetric) matrix."""
    name: str
    start: int
    rows: int
    cols: int
    symmetric: bool = False

    @property
    def size(self) -> int:
        if self.symmetric:
            return self.rows * (self.rows + 1) // 2
        return self.rows * self.cols

    @property
    def stop(self) -> int:
        return self.start + self.size

    def selector(self, num_vars: int) -> sp.csr_matrix:
        """Sparse map from z to the row-major full vectorization of the block."""
        n_r, n_c = self.rows, self.cols
        if not self.symmetric:
            idx = np.arange(self.size)
            return sp.csr_matrix(
                (np.ones(self.size), (idx, self.start + idx)), shape=(n_r * n_c, num_vars)
            )
        iu, ju = np.triu_indices(n_r)
        pos = np.empty((n_r, n_r), dtype=int)
        pos[iu, ju] = np.arange(iu.size)
        pos[ju, iu] = pos[iu, ju]
        cols = self.start + pos.ravel()
        rows = np.arange(n_r * n_r)
        return sp.csr_matrix((np.ones(n_r * n_r), (rows, cols)), shape=(n_r * n_r, num_vars))

    def extract(self, z: np.ndarray) -> np.ndarray:
        """Block value from a solution vector."""
        values = np.asarray(z[self.start:self.stop], dtype=float)
        if not self.symmetric:
            return values.reshape(self.rows, self.cols)
        out = np.zeros((self.rows, self.rows))
        iu, ju = np.triu_indices(self.rows)
        out[iu, ju] = values
        out[ju, iu] = values
        return out


class AffineExpr:
    """Affine map z -> A z + b with a matrix shape (row-major vectorization)."""

    __slots__ = ("A", "b", "shape")
    __array_ufunc__ = None

    def __init__(self, A: sp.spmatrix, b: np.ndarray, shape: Tuple[int, int]):
        self.A = sp.csr_matrix(A)
        self.b = np.asarray(b, dtype=float).ravel()
        self.shape = (int(shape[0]), int(shape[1]))
        if self.A.shape[0] != self.b.size or self.b.size != self.shape[0] * self.shape[1]:
            raise DimensionError(
                f"affine expression rows {self.A.shape[0]}/{self.b.size} do not match shape {self.shape}"
            )

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def size(self) -> int:
        return self.b.size

    @classmethod
    def variable(cls, block: VarBlock, num_vars: int) -> "AffineExpr":
        return cls(block.selector(num_vars), np.zeros(block.rows * block.cols), (block.rows, block.cols))

    @classmethod
    def constant(cls, value: Any, num_vars: int) -> "AffineExpr":
        M = np.atleast_2d(np.asarray(value, dtype=float))
        if np.ndim(value) == 1:
            M = M.reshape(-1, 1)
        return cls(sp.csr_matrix((M.size, num_vars)), M.ravel(), M.shape)

    def _coerce(self, other: Any) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            return other
        return AffineExpr.constant(other, self.num_vars)

    def __add__(self, other: Any) -> "AffineExpr":
        other = self._coerce(other)
        if other.shape != self.shape:
            raise DimensionError(f"cannot add shapes {self.shape} and {other.shape}")
        return AffineExpr(self.A + other.A, self.b + other.b, self.shape)

    __radd__ = __add__

    def __neg__(self) -> "AffineExpr":
        return AffineExpr(-self.A, -self.b, self.shape)

    def __sub__(self, other: Any) -> "AffineExpr":
        return self + (-self._coerce(other))

    def __rsub__(self, other: Any) -> "AffineExpr":
        return self._coerce(other) - self

    def __mul__(self, scalar: float) -> "AffineExpr":
        return AffineExpr(self.A * float(scalar), self.b * float(scalar), self.shape)

    __rmul__ = __mul__

    def congruence(self, M: np.ndarray, N: Optional[np.ndarray] = None) -> "AffineExpr":
        """M X N^T (N defaults to M)."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        N = M if N is None else np.atleast_2d(np.asarray(N, dtype=float))
        if M.shape[1] != self.shape[0] or N.shape[1] != self.shape[1]:
            raise DimensionError(f"congruence {M.shape} . {self.shape} . {N.shape}^T does not conform")
        K = sp.kron(sp.csr_matrix(M), sp.csr_matrix(N), format="csr")
        return AffineExpr(K @ self.A, K @ self.b, (M.shape[0], N.shape[0]))

    def lmul(self, M: np.ndarray) -> "AffineExpr":
        """M X."""
        return self.congruence(M, np.eye(self.shape[1]))

    def rmul(self, N: np.ndarray) -> "AffineExpr":
        """X N."""
        N = np.atleast_2d(np.asarray(N, dtype=float))
        return self.congruence(np.eye(self.shape[0]), N.T)

    @property
    def T(self) -> "AffineExpr":
        r, c = self.shape
        perm = np.arange(r * c).reshape(r, c).T.ravel()
        return AffineExpr(self.A[perm], self.b[perm], (c, r))

    def upper(self) -> "AffineExpr":
        """Row-major upper-triangle entries of a square expression, as a column."""
        n = self.shape[0]
        if self.shape != (n, n):
            raise DimensionError(f"upper() needs a square expression, got {self.shape}")
        iu, ju = np.triu_indices(n)
        rows = iu * n + ju
        return AffineExpr(self.A[rows], self.b[rows], (rows.size, 1))

    def flatten(self) -> "AffineExpr":
        return AffineExpr(self.A, self.b, (self.size, 1))

    def value(self, z: np.ndarray) -> np.ndarray:
        return (self.A @ np.asarray(z, dtype=float) + self.b).reshape(self.shape)


def vstack(exprs: Sequence[AffineExpr]) -> AffineExpr:
    """Stack column expressions."""
    exprs = [e.flatten() for e in exprs]
    A = sp.vstack([e.A for e in exprs], format="csr")
    b = np.concatenate([e.b for e in exprs])
    return AffineExpr(A, b, (b.size, 1))


def bmat(grid: Sequence[Sequence[AffineExpr]]) -> AffineExpr:
    """Block matrix [[E11, E12], [E21, E22], ...] of conforming expressions."""
    row_heights = [row[0].shape[0] for row in grid]
    col_widths = [e.shape[1] for e in grid[0]]
    total_r, total_c = sum(row_heights), sum(col_widths)
    pieces_A, pieces_b, dest = [], [], []
    r0 = 0
    for bi, row in enumerate(grid):
        if len(row) != len(col_widths):
            raise DimensionError("block rows have different lengths")
        c0 = 0
        for bj, e in enumerate(row):
            if e.shape != (row_heights[bi], col_widths[bj]):
                raise DimensionError(f"block ({bi}, {bj}) has shape {e.shape}")
            ii, jj = np.divmod(np.arange(e.size), e.shape[1])
            dest.append((r0 + ii) * total_c + (c0 + jj))
            pieces_A.append(e.A)
            pieces_b.append(e.b)
            c0 += e.shape[1]
        r0 += row_heights[bi]
    order = np.argsort(np.concatenate(dest), kind="stable")
    A = sp.vstack(pieces_A, format="csr")[order]
    b = np.concatenate(pieces_b)[order]
    return AffineExpr(A, b, (total_r, total_c))


@dataclass
class ConeBlock:
    kind: str  # "zero" | "nonneg" | "soc" | "psd"
    expr: AffineExpr
    label: str = ""

    @property
    def dim(self) -> int:
        return self.expr.shape[0] if self.kind == "psd" else self.expr.size


CONE_ORDER = ("zero", "nonneg", "soc", "psd")


@dataclass
class ConicProgram:
    """Variables, convex quadratic objective and cone memberships of a conic program."""
    num_vars: int = 0
    var_map: Dict[str, VarBlock] = field(default_factory=dict)
    objective: Optional[np.ndarray] = None
    objective_constant: float = 0.0
    squares: List[AffineExpr] = field(default_factory=list)
    cones: List[ConeBlock] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add_variable(self, name: str, rows: int, cols: int = 1, symmetric: bool = False) -> VarBlock:
        if name in self.var_map:
            raise DimensionError(f"variable {name!r} declared twice")
        if symmetric and rows != cols:
            raise DimensionError(f"symmetric variable {name!r} must be square")
        block = VarBlock(name, self.num_vars, rows, cols, symmetric)
        self.var_map[name] = block
        self.num_vars = block.stop
        return block

    def var(self, name: str) -> AffineExpr:
        """Expression for a declared variable (call after all variables are declared)."""
        return AffineExpr.variable(self.var_map[name], self.num_vars)

    def const(self, value: Any) -> AffineExpr:
        return AffineExpr.constant(value, self.num_vars)

    def _add(self, kind: str, expr: AffineExpr, label: str) -> None:
        if expr.num_vars != self.num_vars:
            raise DimensionError(f"{label}: expression built over {expr.num_vars} variables, program has {self.num_vars}")
        self.cones.append(ConeBlock(kind, expr, label))

    def add_equality(self, expr: AffineExpr, label: str = "") -> None:
        self._add("zero", expr.flatten(), label)

    def add_nonneg(self, expr: AffineExpr, label: str = "") -> None:
        self._add("nonneg", expr.flatten(), label)

    def add_soc(self, expr: AffineExpr, label: str = "") -> None:
        self._add("soc", expr.flatten(), label)

    def add_psd(self, expr: AffineExpr, label: str = "") -> None:
        if expr.shape[0] != expr.shape[1]:
            raise DimensionError(f"{label}: PSD block must be square, got {expr.shape}")
        self._add("psd", expr, label)

    def set_objective(self, expr: AffineExpr) -> None:
        if expr.size != 1:
            raise DimensionError("objective must be scalar")
        self.objective = np.asarray(expr.A.toarray()).ravel()
        self.objective_constant = float(expr.b[0])

    def add_square(self, expr: AffineExpr, label: str = "") -> None:
        """Add ||expr||^2 to the objective."""
        if expr.num_vars != self.num_vars:
            raise DimensionError(f"{label}: expression built over {expr.num_vars} variables, program has {self.num_vars}")
        self.squares.append(expr.flatten())

    def quadratic_form(self) -> Tuple[sp.csc_matrix, np.ndarray, float]:
        """(H, h, h0) with sum_i ||F_i z + f_i||^2 = z^T H z + h^T z + h0."""
        n = self.num_vars
        if not self.squares:
            return sp.csc_matrix((n, n)), np.zeros(n), 0.0
        F = sp.vstack([e.A for e in self.squares], format="csc")
        f = np.concatenate([e.b for e in self.squares])
        return (F.T @ F).tocsc(), 2.0 * (F.T @ f), float(f @ f)

    def blocks(self, kind: str) -> List[ConeBlock]:
        return [c for c in self.cones if c.kind == kind]

    def objective_value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        c = self.objective if self.objective is not None else np.zeros(self.num_vars)
        squares = sum(float(np.sum((e.A @ z + e.b) ** 2)) for e in self.squares)
        return squares + float(c @ z) + self.objective_constant

    def census(self) -> Dict[str, Any]:
        """Block and row counts per cone kind."""
        return {
            "num_vars": self.num_vars,
            "zero_rows": sum(c.dim for c in self.blocks("zero")),
            "nonneg_rows": sum(c.dim for c in self.blocks("nonneg")),
            "soc_blocks": len(self.blocks("soc")),
            "soc_dims": [c.dim for c in self.blocks("soc")],
            "psd_blocks": len(self.blocks("psd")),
            "psd_dims": [c.dim for c in self.blocks("psd")],
            "square_terms": len(self.squares),
        }

    def residuals(self, z: np.ndarray) -> Dict[str, float]:
        """Maximum violation per cone kind at z (0.0 when a kind is absent)."""
        out = {kind: 0.0 for kind in CONE_ORDER}
        for cone in self.cones:
            v = cone.expr.A @ z + cone.expr.b
            if cone.kind == "zero":
                viol = float(np.max(np.abs(v), initial=0.0))
            elif cone.kind == "nonneg":
                viol = float(max(-np.min(v, initial=0.0), 0.0))
            elif cone.kind == "soc":
                viol = float(max(np.linalg.norm(v[1:]) - v[0], 0.0))
            else:
                viol = float(max(-min_eig(symmetrize(v.reshape(cone.expr.shape))), 0.0))
            out[cone.kind] = max(out[cone.kind], viol)
        return out

    def to_debug_dict(self) -> Dict[str, Any]:
        labels: Dict[str, List[str]] = {kind: [] for kind in CONE_ORDER}
        for cone in self.cones:
            labels[cone.kind].append(cone.label)
        return {
            "census": self.census(),
            "meta": dict(self.meta),
            "var_map": {
                name: {"start": b.start, "rows": b.rows, "cols": b.cols, "symmetric": b.symmetric}
                for name, b in self.var_map.items()
            },
            "objective_constant": self.objective_constant,
            "objective_nnz": int(np.count_nonzero(self.objective)) if self.objective is not None else 0,
            "cone_labels": labels,
        }
