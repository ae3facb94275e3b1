"""Dense real-matrix primitives and the tolerance policy shared by the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every public
function validates finiteness at the boundary and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

# Upper bound on the number of entries of any dense matrix we agree to build.
ELEMENT_BUDGET = 10_000_000


class ShapeError(ValueError):
    """Raised when matrix dimensions do not conform."""


class BudgetError(ValueError):
    """Raised when an operation would allocate more than the element budget."""


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical thresholds used wherever an exact statement is tested in floats.

    rank_rel_tol
        Singular values below ``rank_rel_tol * sigma_max * max(rows, cols)``
        count as zero.
    eig_zero_tol
        Eigenvalues within ``eig_zero_tol`` times the spectral scale count as zero.
    grad_crit_tol
        Gradient-norm threshold for declaring a point critical.
    fd_step
        Base finite-difference step; the step for an entry ``w`` is
        ``fd_step * (1 + |w|)``.
    """

    rank_rel_tol: float = 1e-10
    eig_zero_tol: float = 1e-8
    grad_crit_tol: float = 1e-8
    fd_step: float = 1e-5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (0.0 < float(value) < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {value!r}")

    def with_overrides(self, **kwargs) -> "ToleranceConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


DEFAULT_TOLERANCES = ToleranceConfig()


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float64 array (copying only when needed)."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return A


def check_budget(n_elements: int, what: str = "matrix", budget: int = ELEMENT_BUDGET):
    if n_elements > budget:
        raise BudgetError(f"{what} needs {n_elements} entries, budget is {budget}")


def _svd_cutoff(s: np.ndarray, shape, rel_tol: float) -> float:
    if s.size == 0:
        return 0.0
    return rel_tol * s[0] * max(shape)


def pseudoinverse(M, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via the SVD.

    Singular values at or below ``rel_tol * sigma_max * max(rows, cols)`` are
    treated as zero.  The default cutoff is machine epsilon, which gives the
    textbook pseudoinverse of the stored matrix; pass the rank tolerance to get
    the pseudoinverse of the numerically-truncated matrix instead.
    """
    A = as_matrix(M)
    rows, cols = A.shape
    if A.size == 0 or not np.any(A):
        return np.zeros((cols, rows))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = np.finfo(np.float64).eps if rel_tol is None else rel_tol
    keep = s > _svd_cutoff(s, A.shape, tol)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def kron(A, B, budget: int = ELEMENT_BUDGET) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``A[i, j] * B``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    check_budget(A.size * B.size, "Kronecker product", budget)
    return np.kron(A, B)


def singular_values(M) -> np.ndarray:
    A = as_matrix(M)
    if A.size == 0:
        return np.zeros(0)
    return np.linalg.svd(A, compute_uv=False)


def rank_tol(M, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> int:
    """Numerical rank: number of singular values above the relative cutoff."""
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > _svd_cutoff(s, np.shape(M), cfg.rank_rel_tol)))


def range_basis(M, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> np.ndarray:
    """Orthonormal basis (as columns) of the numerical column space of ``M``."""
    A = as_matrix(M)
    if A.size == 0:
        return np.zeros((A.shape[0], 0))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    r = rank_tol(A, cfg)
    return U[:, :r]


def null_basis(M, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> np.ndarray:
    """Orthonormal basis (as columns) of the numerical null space of ``M``."""
    A = as_matrix(M)
    cols = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(cols)
    _, _, Vt = np.linalg.svd(A, full_matrices=True)
    r = rank_tol(A, cfg)
    return Vt[r:].T.copy()


def range_projector(M, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> np.ndarray:
    """Orthogonal projector onto the numerical column space of ``M``.

    Equals ``M (M^T M)^+ M^T`` for the rank-truncated ``M``.
    """
    Q = range_basis(M, cfg)
    return Q @ Q.T


def sym_eig(M, budget: int = ELEMENT_BUDGET):
    """Eigendecomposition of a symmetric matrix with eigenvalues in descending order.

    The input is symmetrized by averaging with its transpose first.  Ties keep
    the order returned by LAPACK (stable sort), so repeated eigenvalues come
    out in a reproducible order.
    """
    A = as_matrix(M)
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {A.shape}")
    check_budget(A.size, "eigendecomposition", budget)
    S = 0.5 * (A + A.T)
    values, vectors = np.linalg.eigh(S)
    order = np.argsort(-values, kind="stable")
    return values[order], vectors[:, order]


def frob(M) -> float:
    return float(np.linalg.norm(M))


def product(mats, rows: int | None = None) -> np.ndarray:
    """Left-to-right product ``mats[0] @ mats[1] @ ...``; identity of size ``rows`` if empty."""
    mats = list(mats)
    if not mats:
        if rows is None:
            raise ValueError("empty product needs an explicit identity size")
        return np.eye(rows)
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return np.array(out, dtype=np.float64)
