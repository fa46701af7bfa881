"""Least squares, linear prediction and Cholesky factorization.

Single fits go through a column-pivoted QR decomposition so that the
lagged-outcome regressors (which are strongly correlated) never pass
through explicit normal equations. ``lstsq_batched`` solves many weighted
problems that share a row layout at once; it backs the resampling code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import InsufficientDataError, NotPositiveDefiniteError, RankDeficiencyError

RANK_TOL = 1e-10
CHOLESKY_TOL = 1e-10
# smallest eigenvalue of the unit-diagonal Gram matrix; about (1e-6)**2 in QR terms
GRAM_RANK_TOL = 1e-12


@dataclass(frozen=True)
class DesignMatrix:
    """Regressor matrix with one label per column."""

    rows: np.ndarray
    column_labels: tuple

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        labels = tuple(str(c) for c in self.column_labels)
        if rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError("design matrix needs at least one row and one column")
        if rows.shape[1] != len(labels):
            raise ValueError(
                f"design has {rows.shape[1]} columns but {len(labels)} labels"
            )
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate column labels in {labels}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "column_labels", labels)

    @property
    def n_obs(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class Coefficients:
    values: np.ndarray
    column_labels: tuple
    n_obs_used: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != len(self.column_labels):
            raise ValueError("coefficient/label length mismatch")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficients must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_labels", tuple(self.column_labels))

    def __getitem__(self, label):
        return float(self.values[self.column_labels.index(label)])

    def as_dict(self):
        return dict(zip(self.column_labels, self.values.tolist()))


def fit_ols(X: DesignMatrix, y) -> Coefficients:
    """Ordinary least squares via column-pivoted QR.

    Raises
    ------
    InsufficientDataError
        If there are fewer observations than columns.
    RankDeficiencyError
        If the numerical rank (pivots with ``|R_kk| <= 1e-10 * |R_00|``)
        is below the column count. The message names the dropped columns.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    A = X.rows
    n, p = A.shape
    if y.size != n:
        raise ValueError(f"y has length {y.size}, design has {n} rows")
    if n < p:
        raise InsufficientDataError(
            f"insufficient complete cases: {n} observations for {p} coefficients"
        )
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
        raise ValueError("design matrix and response must be finite")
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0])) if diag[0] > 0 else 0
    if rank < p:
        bad = [X.column_labels[k] for k in piv[rank:]]
        raise RankDeficiencyError(
            f"rank-deficient design (rank {rank} < {p}, relative pivot "
            f"tolerance {RANK_TOL:g}); collinear columns: {', '.join(bad)}",
            columns=bad,
        )
    z = sla.solve_triangular(R, Q.T @ y, lower=False)
    beta = np.empty(p)
    beta[piv] = z
    return Coefficients(beta, X.column_labels, n)


def predict(c: Coefficients, x_row) -> float:
    x = np.asarray(x_row, dtype=float).reshape(-1)
    if x.size != c.values.size:
        raise ValueError(
            f"row has length {x.size}, coefficients have length {c.values.size}"
        )
    return float(c.values @ x)


def cholesky(S) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    The failing pivot index (0-based) is attached to the raised
    ``NotPositiveDefiniteError``.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if not np.allclose(S, S.T, rtol=0.0, atol=CHOLESKY_TOL * scale):
        raise ValueError("matrix is not symmetric")
    c, info = lapack.dpotrf(S, lower=1, clean=1)
    if info > 0:
        k = info - 1
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite: Cholesky failed at pivot {k}", pivot=k
        )
    if info < 0:  # pragma: no cover - argument error from LAPACK
        raise ValueError(f"dpotrf argument {-info} invalid")
    return np.tril(c)


def lstsq_batched(A: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted least squares for a stack of problems.

    Solves the normal equations after scaling them to unit diagonal. That is
    roughly ten times faster than a stacked QR for the small designs used in
    resampling; the single-fit path (``fit_ols``) keeps the QR route, so the
    two engines check each other.

    Parameters
    ----------
    A : array, shape (B, n, p) or (n, p)
        Finite designs; a 2-D design is shared by all problems.
    y : array, shape (B, n)
        Values at zero-weight rows are ignored and may be NaN.
    w : array, shape (B, n)
        Non-negative frequency weights. Leave-one-out and bootstrap
        resamples are expressed as weights.

    Returns
    -------
    beta : array, shape (B, p)
        NaN rows where the scaled Gram matrix has an eigenvalue below
        ``GRAM_RANK_TOL`` (rank deficiency, or fewer than ``p`` weighted rows).
    ok : bool array, shape (B,)
    """
    w = np.asarray(w, dtype=float)
    y = np.where(w > 0, np.asarray(y, dtype=float), 0.0)
    if A.ndim == 2:
        Aw = A.T[None, :, :] * w[:, None, :]
        G = Aw @ A
        r = np.einsum("bpn,bn->bp", Aw, y)
    else:
        Aw = A * w[:, :, None]
        G = np.matmul(Aw.transpose(0, 2, 1), A)
        r = np.einsum("bnp,bn->bp", Aw, y)
    return solve_gram(G, r)


def solve_gram(G: np.ndarray, r: np.ndarray):
    """Solve stacked normal equations ``G b = r``; see ``lstsq_batched``."""
    B, p = r.shape
    d = np.diagonal(G, axis1=1, axis2=2)
    ok = np.all(d > 0, axis=1)
    s = np.sqrt(np.where(d > 0, d, 1.0))
    Gs = G / (s[:, :, None] * s[:, None, :])
    ok &= np.linalg.eigvalsh(Gs)[:, 0] > GRAM_RANK_TOL
    beta = np.full((B, p), np.nan)
    if ok.any():
        beta[ok] = np.linalg.solve(Gs[ok], (r / s)[ok][:, :, None])[:, :, 0] / s[ok]
    return beta, ok


def design(columns: Sequence[np.ndarray], labels: Sequence[str]) -> DesignMatrix:
    """Stack 1-D column arrays into a ``DesignMatrix``."""
    return DesignMatrix(np.column_stack([np.asarray(c, dtype=float) for c in columns]), tuple(labels))
