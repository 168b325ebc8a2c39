"""Goodman ecological regression and margin-consistent cell reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Dataset, IdentifiabilityError, ModelError, StationRecord, as_dataset


@dataclass(frozen=True)
class GoodmanResult:
    """Unconstrained least-squares transition matrix.

    ``out_of_range`` flags cells whose estimate falls outside [0, 1]; no
    truncation is applied. ``se`` are the usual OLS standard errors, with
    residual covariance across columns used for the reference column.
    """

    matrix: NDArray[np.float64]
    out_of_range: NDArray[np.bool_]
    rss: float
    se: NDArray[np.float64]


def goodman_fit(data: Dataset | Sequence[StationRecord]) -> GoodmanResult:
    ds = as_dataset(data)
    X, Y = ds.n, ds.y[:, :-1]
    k, r = X.shape
    if k < r:
        raise IdentifiabilityError(f"Goodman regression needs k >= r, got k={k}, r={r}")
    if np.linalg.matrix_rank(X) < r:
        raise IdentifiabilityError("first-election counts are rank deficient across stations")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)  # (r, c-1)
    resid = Y - X @ coef
    matrix = np.column_stack([coef, 1.0 - coef.sum(axis=1)])

    xtx_inv = np.linalg.inv(X.T @ X)
    dof = max(k - r, 1)
    sigma = resid.T @ resid / dof  # residual covariance across columns
    se = np.empty_like(matrix)
    se[:, :-1] = np.sqrt(np.outer(np.diag(xtx_inv), np.diag(sigma)))
    se[:, -1] = np.sqrt(np.diag(xtx_inv) * sigma.sum())
    return GoodmanResult(
        matrix=matrix,
        out_of_range=(matrix < 0) | (matrix > 1),
        rss=float((resid ** 2).sum()),
        se=se,
    )


def expected_cells_ipf(pi_s, n_s, y_s, tol: float = 1e-8, max_iter: int = 1000,
                       return_iterations: bool = False):
    """Cell counts with margins ``n_s`` (rows) and ``y_s`` (columns) by iterative
    proportional fitting from the seed ``n_is * pi_ij``.

    Rows and columns with a zero margin are held at zero.
    """
    pi = np.asarray(pi_s, dtype=float)
    n = np.asarray(n_s, dtype=float)
    y = np.asarray(y_s, dtype=float)
    if pi.shape != (n.size, y.size):
        raise ModelError(f"seed shape {pi.shape} does not match margins {n.size}x{y.size}")
    if (n < 0).any() or (y < 0).any() or (pi < 0).any():
        raise ModelError("negative margin or probability")
    if abs(n.sum() - y.sum()) > tol * max(1.0, n.sum()):
        raise ModelError(f"margins disagree: {n.sum()} vs {y.sum()}")

    m = n[:, None] * pi
    m[:, y == 0] = 0.0
    m[n == 0, :] = 0.0
    for i in np.flatnonzero((n > 0) & (m.sum(axis=1) == 0)):
        raise ModelError(f"row {i} has positive margin but no admissible seed cells")
    for j in np.flatnonzero((y > 0) & (m.sum(axis=0) == 0)):
        raise ModelError(f"column {j} has positive margin but no admissible seed cells")

    def gap(m):
        return max(np.abs(m.sum(axis=1) - n).max(), np.abs(m.sum(axis=0) - y).max())

    it = 0
    while gap(m) >= tol and it < max_iter:
        rs = m.sum(axis=1)
        m *= np.divide(n, rs, out=np.zeros_like(n), where=rs > 0)[:, None]
        cs = m.sum(axis=0)
        m *= np.divide(y, cs, out=np.zeros_like(y), where=cs > 0)[None, :]
        it += 1
    return (m, it) if return_iterations else m
