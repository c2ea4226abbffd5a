"""
covsteer - Plot Data
Terminal covariance ellipses and constraint lines projected onto a pair of
state coordinates. Only data is produced; plotting is left to the reader.
"""

import re
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from . import serialization
from .exceptions import DimensionError
from .model import HalfspaceConstraint


ELLIPSE_POINTS = 128
ELLIPSE_SIGMA = 2.0

_COORD = re.compile(r"^x_(\d+)$")


def parse_pair(text: str, n_x: int) -> Tuple[int, int]:
    """'x_2,x_3' -> (2, 3).

    Raises:
        DimensionError: On a malformed or out-of-range coordinate name
    """
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise DimensionError(f"coordinate pair must look like 'x_2,x_3', got {text!r}", field="pair")
    idx = []
    for name in parts:
        match = _COORD.match(name)
        if not match or int(match.group(1)) >= n_x:
            raise DimensionError(f"unknown coordinate {name!r} (state has x_0..x_{n_x - 1})", field="pair")
        idx.append(int(match.group(1)))
    if idx[0] == idx[1]:
        raise DimensionError(f"coordinate pair repeats {parts[0]!r}", field="pair")
    return idx[0], idx[1]


def ellipse_points(center: np.ndarray, cov: np.ndarray, n_points: int = ELLIPSE_POINTS,
                   n_sigma: float = ELLIPSE_SIGMA) -> np.ndarray:
    """Points (n_points, 2) on {center + n_sigma * cov^{1/2} w : |w| = 1}."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise DimensionError(f"ellipse covariance must be 2x2, got {cov.shape}", field="cov")
    w, V = scipy.linalg.eigh(0.5 * (cov + cov.T))
    radii = n_sigma * np.sqrt(np.clip(w, 0.0, None))
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return np.asarray(center, dtype=float) + (circle * radii) @ V.T


def inside_ellipse(points: np.ndarray, center: np.ndarray, cov: np.ndarray,
                   n_sigma: float = ELLIPSE_SIGMA) -> np.ndarray:
    """Mask of points with Mahalanobis distance <= n_sigma."""
    D = np.asarray(points, dtype=float) - center
    sol = np.linalg.lstsq(cov, D.T, rcond=None)[0]
    return np.einsum("ia,ai->i", D, sol) <= n_sigma ** 2


def constraint_line(con: HalfspaceConstraint, pair: Tuple[int, int], reference: np.ndarray,
                    extent: Tuple[float, float, float, float]) -> Optional[np.ndarray]:
    """
    Two endpoints of alpha^T x = beta in the (x_a, x_b) plane, with every other
    coordinate fixed at ``reference``. None when alpha has no weight on the pair.
    """
    a, b = pair
    ca, cb = float(con.alpha[a]), float(con.alpha[b])
    if ca == 0.0 and cb == 0.0:
        return None
    rest = con.beta - sum(float(con.alpha[i]) * float(reference[i])
                          for i in range(con.alpha.size) if i not in pair)
    xa_lo, xa_hi, xb_lo, xb_hi = extent
    if abs(cb) >= abs(ca):
        xs = np.array([xa_lo, xa_hi])
        return np.stack([xs, (rest - ca * xs) / cb], axis=1)
    ys = np.array([xb_lo, xb_hi])
    return np.stack([(rest - cb * ys) / ca, ys], axis=1)


def _extent(points: np.ndarray, pad: float = 0.25) -> Tuple[float, float, float, float]:
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad * span, hi + pad * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def ellipse_csv(pair: Tuple[int, int], center: np.ndarray, cov: np.ndarray,
                n_points: int = ELLIPSE_POINTS, n_sigma: float = ELLIPSE_SIGMA) -> str:
    a, b = pair
    pts = ellipse_points(center[[a, b]], cov[np.ix_([a, b], [a, b])], n_points, n_sigma)
    label = f"x_{a}:x_{b}"
    rows = [[label, i, p[0], p[1]] for i, p in enumerate(pts)]
    return serialization.csv_text(["pair", "point", "first", "second"], rows)


def constraint_lines_csv(constraints: Sequence[HalfspaceConstraint], pair: Tuple[int, int],
                         reference: np.ndarray, extent_points: np.ndarray) -> str:
    """Endpoints of every state constraint line visible in the pair's plane."""
    extent = _extent(np.asarray(extent_points, dtype=float))
    rows: List[list] = []
    for i, con in enumerate(constraints):
        line = constraint_line(con, pair, reference, extent)
        if line is None:
            continue
        for end, p in enumerate(line):
            rows.append([i, end, p[0], p[1]])
    return serialization.csv_text(["constraint_index", "endpoint", "first", "second"], rows)
