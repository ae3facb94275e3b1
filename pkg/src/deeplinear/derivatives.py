"""Analytic gradient and block Hessian of the squared loss, with finite-difference oracles.

Parameters are stacked as ``(vec(W_{H+1}^T), ..., vec(W_1^T))``.  Because
``vec(W^T)`` is the row-major flattening of ``W``, a gradient block reshapes
back to the layer's own shape with a plain C-order ``reshape``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    DEFAULT_TOLERANCES,
    ELEMENT_BUDGET,
    ToleranceConfig,
    check_budget,
    kron,
)
from .model import DatasetPair, NetworkShape, WeightStack, block_ranges, error_matrix

ANALYTIC = "analytic"
FINITE_DIFFERENCE = "finite-difference"


@dataclass(frozen=True)
class GradientBlocks:
    """Per-layer gradient; ``blocks[k-1]`` has the shape of ``W_k``."""

    shape: NetworkShape
    blocks: tuple
    stacked_norm: float = field(init=False)

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.float64) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(
            self, "stacked_norm", float(np.sqrt(sum(float(np.sum(b * b)) for b in blocks)))
        )

    def __getitem__(self, k: int) -> np.ndarray:
        return self.blocks[k - 1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self[k].ravel() for k in range(len(self.blocks), 0, -1)])

    @classmethod
    def from_vector(cls, shape: NetworkShape, g) -> "GradientBlocks":
        return cls(shape, WeightStack.from_vector(shape, g).layers)


def _check(W: WeightStack, data: DatasetPair):
    data.check_shape(W.shape)


def _upstream(W: WeightStack, k: int) -> np.ndarray:
    """``A_k = W_{H+1} ... W_{k+1}`` (identity ``I_{d_y}`` for ``k = H+1``)."""
    return W.prod(W.H + 1, k + 1)


def _downstream(W: WeightStack, X: np.ndarray, k: int) -> np.ndarray:
    """``W_{k-1} ... W_1 X`` (just ``X`` for ``k = 1``)."""
    return W.prod(k - 1, 1) @ X


def gradient(W: WeightStack, data: DatasetPair) -> GradientBlocks:
    """Gradient of the loss with block ``k`` equal to
    ``(A_k (x) (W_{k-1}...W_1 X)^T)^T vec(r)`` reshaped to ``d_k x d_{k-1}``.
    """
    _check(W, data)
    vec_r = error_matrix(W, data).ravel(order="F")
    blocks = []
    for k in range(1, W.H + 2):
        J = kron(_upstream(W, k), _downstream(W, data.X, k).T)
        blocks.append((J.T @ vec_r).reshape(W.shape.layer_shape(k)))
    return GradientBlocks(W.shape, tuple(blocks))


def gradient_contracted(W: WeightStack, data: DatasetPair) -> GradientBlocks:
    """Same gradient as :func:`gradient`, as ``A_k^T R D_k^T`` without forming Kronecker products.

    Used by the training loop where the Kronecker form is needlessly slow.
    """
    _check(W, data)
    H = W.H
    # suffix[k] = W_{H+1} ... W_{k+1}; prefix[k] = W_{k-1} ... W_1 X
    prefix = [None] * (H + 2)
    prefix[1] = data.X
    for k in range(1, H + 1):
        prefix[k + 1] = W[k] @ prefix[k]
    R = W[H + 1] @ prefix[H + 1] - data.Y
    blocks = [None] * (H + 1)
    back = R  # A_k^T R, built from the top down
    for k in range(H + 1, 0, -1):
        blocks[k - 1] = back @ prefix[k].T
        back = W[k].T @ back
    return GradientBlocks(W.shape, tuple(blocks))


def hessian_diag_block(W: WeightStack, data: DatasetPair, k: int) -> np.ndarray:
    """``A_k^T A_k (x) (W_{k-1}...W_1 X)(W_{k-1}...W_1 X)^T``."""
    _check(W, data)
    W.shape.layer_shape(k)
    A = _upstream(W, k)
    D = _downstream(W, data.X, k)
    return kron(A.T @ A, D @ D.T)


def hessian_offdiag_block_k1(W: WeightStack, data: DatasetPair, k: int) -> np.ndarray:
    """Cross block with rows indexed by ``vec(W_1^T)`` and columns by ``vec(W_k^T)``.

    Sum of ``C^T A_k (x) X (W_{k-1}...W_1 X)^T`` and
    ``[B_k^T (x) X] [I (x) (r A_k)_{.,1}, ..., I (x) (r A_k)_{.,d_k}]`` with
    ``C = W_{H+1}...W_2`` and ``B_k = W_{k-1}...W_2``.
    """
    _check(W, data)
    if not 2 <= k <= W.H + 1:
        raise IndexError(f"cross block needs 2 <= k <= {W.H + 1}, got {k}")
    X = data.X
    d_k, d_km1 = W.shape.layer_shape(k)
    A = _upstream(W, k)
    C = W.prod(W.H + 1, 2)
    D = _downstream(W, X, k)
    B = W.prod(k - 1, 2)
    rA = error_matrix(W, data) @ A
    first = kron(C.T @ A, X @ D.T)
    eye = np.eye(d_km1)
    columns = np.hstack([kron(eye, rA[:, t : t + 1]) for t in range(d_k)])
    second = kron(B.T, X) @ columns
    return first + second


def central_gradient(f, x, step) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``; ``step`` may be per-entry."""
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(step, dtype=np.float64), x.shape)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
    return g


def central_jacobian(F, x, step) -> np.ndarray:
    """Central-difference Jacobian ``J[i, j] = dF_i / dx_j``."""
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(step, dtype=np.float64), x.shape)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        cols.append((np.asarray(F(x + e)) - np.asarray(F(x - e))) / (2.0 * h[j]))
    return np.stack(cols, axis=1)


def _entry_steps(theta: np.ndarray, step: float) -> np.ndarray:
    return step * (1.0 + np.abs(theta))


def _batched_loss(shape: NetworkShape, data: DatasetPair, thetas: np.ndarray) -> np.ndarray:
    """Loss at each row of ``thetas`` (shape ``B x N``)."""
    B = thetas.shape[0]
    ranges = block_ranges(shape)
    out = np.broadcast_to(data.X, (B,) + data.X.shape)
    for k in range(1, shape.H + 2):
        lo, hi = ranges[k]
        Wk = thetas[:, lo:hi].reshape((B,) + shape.layer_shape(k))
        out = np.matmul(Wk, out)
    R = out - data.Y
    return 0.5 * np.einsum("bij,bij->b", R, R)


def fd_gradient(W: WeightStack, data: DatasetPair, step: float = DEFAULT_TOLERANCES.fd_step) -> GradientBlocks:
    """Central differences of the loss, step ``step * (1 + |w|)`` per entry."""
    _check(W, data)
    theta = W.to_vector()
    h = _entry_steps(theta, step)
    N = theta.size
    E = np.diag(h)
    vals = _batched_loss(W.shape, data, np.vstack([theta + E, theta - E]))
    g = (vals[:N] - vals[N:]) / (2.0 * h)
    return GradientBlocks.from_vector(W.shape, g)


@dataclass(frozen=True)
class HessianMatrix:
    """Dense Hessian over the stacked parameter vector.

    ``layer_ranges[k]`` is the ``(start, stop)`` slice of layer ``k``;
    ``provenance[(k, kp)]`` tells how block (rows of ``W_k``, columns of
    ``W_kp``) was obtained; ``asymmetry`` is ``||H - H^T||_F / ||H||_F`` before
    symmetrization; ``fd_crosscheck[(k, kp)]`` is the relative max-entry
    difference between an analytic block and its finite-difference estimate.
    """

    matrix: np.ndarray
    layer_ranges: dict
    provenance: dict
    asymmetry: float = 0.0
    fd_crosscheck: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def block(self, k: int, kp: int) -> np.ndarray:
        (a, b), (c, d) = self.layer_ranges[k], self.layer_ranges[kp]
        return self.matrix[a:b, c:d]

    def block_index(self) -> dict:
        """JSON-friendly description of the block layout."""
        return {
            "layers": {str(k): list(r) for k, r in self.layer_ranges.items()},
            "provenance": {f"{k},{kp}": tag for (k, kp), tag in sorted(self.provenance.items())},
        }

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


def _symmetrize(M: np.ndarray):
    norm = np.linalg.norm(M)
    asym = float(np.linalg.norm(M - M.T) / norm) if norm > 0 else 0.0
    return 0.5 * (M + M.T), asym


def block_relative_error(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute difference when ``b`` vanishes)."""
    a = np.asarray(a)
    b = np.asarray(b)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    return diff / scale if scale > 0 else diff


def fd_hessian(W: WeightStack, data: DatasetPair, step: float = 1e-4) -> HessianMatrix:
    """Second central differences of the loss alone (no analytic derivatives)."""
    _check(W, data)
    theta = W.to_vector()
    N = theta.size
    check_budget(N * N, "Hessian")
    h = _entry_steps(theta, step)
    f0 = _batched_loss(W.shape, data, theta[None, :])[0]
    E = np.diag(h)
    plus = _batched_loss(W.shape, data, theta + E)
    minus = _batched_loss(W.shape, data, theta - E)
    Hm = np.zeros((N, N))
    Hm[np.diag_indices(N)] = (plus - 2.0 * f0 + minus) / (h * h)
    iu, ju = np.triu_indices(N, k=1)
    for start in range(0, iu.size, 4096):
        i = iu[start : start + 4096]
        j = ju[start : start + 4096]
        di = np.zeros((i.size, N))
        dj = np.zeros((i.size, N))
        rows = np.arange(i.size)
        di[rows, i] = h[i]
        dj[rows, j] = h[j]
        fpp = _batched_loss(W.shape, data, theta + di + dj)
        fpm = _batched_loss(W.shape, data, theta + di - dj)
        fmp = _batched_loss(W.shape, data, theta - di + dj)
        fmm = _batched_loss(W.shape, data, theta - di - dj)
        vals = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
        Hm[i, j] = vals
        Hm[j, i] = vals
    ranges = block_ranges(W.shape)
    prov = {(k, kp): FINITE_DIFFERENCE for k in ranges for kp in ranges}
    return HessianMatrix(Hm, ranges, prov)


def fd_gradient_jacobian(W: WeightStack, data: DatasetPair, step: float) -> np.ndarray:
    """Central differences of the analytic gradient over the stacked parameters."""
    shape = W.shape
    theta = W.to_vector()

    def g(t):
        return gradient_contracted(WeightStack.from_vector(shape, t), data).to_vector()

    return central_jacobian(g, theta, _entry_steps(theta, step))


def full_hessian(
    W: WeightStack,
    data: DatasetPair,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    budget: int = ELEMENT_BUDGET,
) -> HessianMatrix:
    """Assemble the full Hessian.

    Diagonal blocks and the blocks pairing ``W_1`` with ``W_k`` come from the
    closed forms; every other block is a central difference of the analytic
    gradient.  Analytic blocks are cross-checked against those differences and
    the result is symmetrized.
    """
    _check(W, data)
    shape = W.shape
    N = shape.n_params
    check_budget(N * N, "Hessian", budget)
    ranges = block_ranges(shape)
    J = fd_gradient_jacobian(W, data, cfg.fd_step)
    Hm = np.empty((N, N))
    prov = {}
    cross = {}

    def put(k, kp, block, tag):
        (a, b), (c, d) = ranges[k], ranges[kp]
        Hm[a:b, c:d] = block
        prov[(k, kp)] = tag

    def fd_block(k, kp):
        (a, b), (c, d) = ranges[k], ranges[kp]
        return J[a:b, c:d]

    H1 = shape.H + 1
    for k in range(1, H1 + 1):
        Dk = hessian_diag_block(W, data, k)
        cross[(k, k)] = block_relative_error(fd_block(k, k), Dk)
        put(k, k, Dk, ANALYTIC)
    for k in range(2, H1 + 1):
        B = hessian_offdiag_block_k1(W, data, k)
        cross[(1, k)] = block_relative_error(fd_block(1, k), B)
        cross[(k, 1)] = block_relative_error(fd_block(k, 1), B.T)
        put(1, k, B, ANALYTIC)
        put(k, 1, B.T, ANALYTIC)
    for k in range(2, H1 + 1):
        for kp in range(2, H1 + 1):
            if k != kp:
                put(k, kp, fd_block(k, kp), FINITE_DIFFERENCE)
    Hs, asym = _symmetrize(Hm)
    return HessianMatrix(Hs, ranges, prov, asym, cross)
