"""Implicit-feedback matrix factorization with conjugate-gradient updates.

Observed (user, item) interactions carry a binary preference p=1 with
confidence c = 1 + alpha*r; every unobserved pair acts as a weak negative
(p=0, c=1). Factors minimize

    sum_{u,i} c_ui (p_ui - x_u.y_i)^2
        + lambda * (sum_u n_u ||x_u||^2 + sum_i n_i ||y_i||^2)

where n_u / n_i count each row's / column's observed interactions (weighted
regularization). Each alternating sweep solves the per-entity normal
equations

    (Y'Y + Y'(C_u - I)Y + lambda*n_u*I) x_u = Y' C_u p_u

with a few conjugate-gradient iterations warm-started from the current
vector; Y'(C_u - I)Y touches only the rated columns, which keeps the cost
proportional to the number of observations. Rows with no observations are
skipped (their regularization weight is zero, so there is no system to
solve) and keep their current vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_RS_FLOOR = 1e-28  # squared-residual level treated as converged


@dataclass(frozen=True)
class AlsParams:
    """Configuration for the factorization.

    ``lam`` is the regularization constant (the usual lambda); ``epochs`` is
    the number of alternating sweeps per update call and ``cg_steps`` the
    conjugate-gradient iterations spent on each vector solve.
    """

    k: int = 50
    alpha: float = 40.0
    lam: float = 0.01
    cg_steps: int = 3
    epochs: int = 15
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.cg_steps < 1:
            raise ValueError("cg_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class SparseRatings:
    """Positive ratings of an n_rows x n_cols matrix, zero encoded by absence.

    Entries are canonicalized to (row, col) lexicographic order so that two
    logically equal matrices assembled in different entry orders produce
    bit-identical training runs.
    """

    def __init__(
        self,
        n_rows: int,
        n_cols: int,
        entries: Iterable[tuple[int, int, float]] | None = None,
        *,
        rows: np.ndarray | None = None,
        cols: np.ndarray | None = None,
        vals: np.ndarray | None = None,
    ):
        if entries is not None:
            ent = list(entries)
            rows = np.fromiter((e[0] for e in ent), dtype=np.int64, count=len(ent))
            cols = np.fromiter((e[1] for e in ent), dtype=np.int64, count=len(ent))
            vals = np.fromiter((e[2] for e in ent), dtype=np.float64, count=len(ent))
        elif rows is None or cols is None or vals is None:
            raise ValueError("provide either entries or rows/cols/vals arrays")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)

        if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("column index out of range")
        if vals.size and not np.all(vals > 0):
            raise ValueError("ratings must be positive (zeros are encoded by absence)")

        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                j = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate entry at ({rows[j]}, {cols[j]})")

        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.rows = rows
        self.cols = cols
        self.vals = vals

    @property
    def nnz(self) -> int:
        return self.rows.size

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows).astype(np.int64)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols).astype(np.int64)

    def transpose(self) -> "SparseRatings":
        return SparseRatings(
            self.n_cols, self.n_rows, rows=self.cols, cols=self.rows, vals=self.vals
        )

    def to_csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
        )
        m.sort_indices()
        return m


@dataclass
class FactorMatrices:
    """User factors X (n_u x k) and item factors Y (n_i x k)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if self.X.shape[1] != self.Y.shape[1]:
            raise ValueError(
                f"factor dimension mismatch: {self.X.shape[1]} vs {self.Y.shape[1]}"
            )
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ValueError("factor matrices must be finite")

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def copy(self) -> "FactorMatrices":
        return FactorMatrices(self.X.copy(), self.Y.copy())


def init_factors(n_rows: int, n_cols: int, params: AlsParams) -> FactorMatrices:
    """Seeded random initialization: uniform entries in [0, init_scale).

    Draws all user rows first, then all item rows, from a single PCG stream,
    matching the per-entity draw order of the incremental trainer.
    """
    rng = np.random.default_rng(params.seed)
    X = rng.random((n_rows, params.k)) * params.init_scale
    Y = rng.random((n_cols, params.k)) * params.init_scale
    return FactorMatrices(X, Y)


def confidence(r: float, alpha: float) -> float:
    """Confidence weight 1 + alpha*r attached to a rating."""
    if r < 0:
        raise ValueError("rating must be non-negative")
    return 1.0 + alpha * r


def objective(R: SparseRatings, F: FactorMatrices, p: AlsParams) -> float:
    """Exact value of the weighted-regularized implicit objective.

    The preference term ranges over *all* (u, i) pairs; absent entries
    contribute confidence 1 and preference 0, which reduces the dense part to
    sum_u x_u' (Y'Y) x_u plus a per-observation correction.
    """
    _check_shapes(R, F)
    X, Y = F.X, F.Y
    G = Y.T @ Y
    dense = float(np.einsum("uk,kl,ul->", X, G, X, optimize=True))
    if R.nnz:
        d = np.einsum("ek,ek->e", X[R.rows], Y[R.cols])
        c = 1.0 + p.alpha * R.vals
        correction = float(np.sum(c * (1.0 - d) ** 2 - d * d))
    else:
        correction = 0.0
    n_u = R.row_counts().astype(np.float64)
    n_i = R.col_counts().astype(np.float64)
    reg = p.lam * (
        float(n_u @ np.einsum("uk,uk->u", X, X)) + float(n_i @ np.einsum("ik,ik->i", Y, Y))
    )
    return dense + correction + reg


def _check_shapes(R: SparseRatings, F: FactorMatrices) -> None:
    if F.X.shape[0] != R.n_rows:
        raise ValueError(f"X has {F.X.shape[0]} rows, ratings expect {R.n_rows}")
    if F.Y.shape[0] != R.n_cols:
        raise ValueError(f"Y has {F.Y.shape[0]} rows, ratings expect {R.n_cols}")


def _solve_half(
    csr: sp.csr_matrix, target: np.ndarray, other: np.ndarray, p: AlsParams
) -> None:
    """One half-sweep: update ``target`` rows against fixed ``other`` factors.

    All rows with at least one observation are solved in CG lockstep: the
    system matrix is applied via the shared Gram matrix of ``other`` plus a
    sparse correction over the observed entries only. Rows already at their
    solution freeze (zero step) instead of dividing by a vanishing residual.
    """
    counts = np.diff(csr.indptr)
    active = np.flatnonzero(counts > 0)
    if active.size == 0:
        return
    sub = csr[active, :]
    erow = np.repeat(np.arange(active.size), np.diff(sub.indptr))
    ecol = sub.indices
    cm1 = p.alpha * sub.data  # c - 1 per observed entry
    reg = p.lam * counts[active].astype(np.float64)
    G = other.T @ other

    scatter = sp.csr_matrix(
        (cm1.copy(), sub.indices, sub.indptr), shape=sub.shape
    )

    def apply_system(V: np.ndarray) -> np.ndarray:
        out = V @ G
        scatter.data = cm1 * np.einsum("ek,ek->e", V[erow], other[ecol])
        out += scatter @ other
        out += reg[:, None] * V
        return out

    rhs = sp.csr_matrix(
        (1.0 + cm1, sub.indices, sub.indptr), shape=sub.shape
    ) @ other  # Y' C_u p_u: only rated columns contribute

    X = target[active].copy()
    r = rhs - apply_system(X)
    d = r.copy()
    rs = np.einsum("uk,uk->u", r, r)
    for _ in range(p.cg_steps):
        if not np.any(rs > _RS_FLOOR):
            break
        Ad = apply_system(d)
        dAd = np.einsum("uk,uk->u", d, Ad)
        alive = (rs > _RS_FLOOR) & (dAd > 0)
        step = np.where(alive, rs / np.where(alive, dAd, 1.0), 0.0)
        X += step[:, None] * d
        r -= step[:, None] * Ad
        rs_new = np.einsum("uk,uk->u", r, r)
        beta = np.where(alive, rs_new / np.where(alive, rs, 1.0), 0.0)
        d = r + beta[:, None] * d
        rs = rs_new
    target[active] = X


def latent_factor_update(
    R: SparseRatings, F: FactorMatrices, p: AlsParams
) -> FactorMatrices:
    """Run ``p.epochs`` alternating sweeps and return the updated factors.

    Each sweep solves every rated user row, then every rated item column,
    warm-starting from the current vectors; the objective is non-increasing
    across sweeps up to CG truncation. The input factors are not mutated.
    """
    _check_shapes(R, F)
    out = F.copy()
    user_csr = R.to_csr()
    item_csr = R.transpose().to_csr()
    for _ in range(p.epochs):
        _solve_half(user_csr, out.X, out.Y, p)
        _solve_half(item_csr, out.Y, out.X, p)
    return out


def recommend_collaborative(
    x_u: np.ndarray,
    Y: np.ndarray,
    exclude: set[int] | frozenset[int],
    n: int,
) -> list[tuple[int, float]]:
    """Top-n item indices by descending x_u.y_i, ties by ascending index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = Y @ np.asarray(x_u, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    out: list[tuple[int, float]] = []
    for idx in order:
        i = int(idx)
        if i in exclude:
            continue
        out.append((i, float(scores[i])))
        if len(out) == n:
            break
    return out


# --- store value format: k little-endian 32-bit floats per vector ---

def vector_to_bytes(vec: Sequence[float] | np.ndarray) -> bytes:
    return np.asarray(vec, dtype="<f4").tobytes()


def vector_from_bytes(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)
