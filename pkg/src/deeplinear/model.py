"""Deep linear networks: shapes, weight stacks, data, loss and the data spectrum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import (
    DEFAULT_TOLERANCES,
    ShapeError,
    ToleranceConfig,
    as_matrix,
    rank_tol,
    sym_eig,
)


class AssumptionError(ValueError):
    """Raised in strict mode when the data violate the landscape theorem's hypotheses."""


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths ``(d_x, d_1, ..., d_H, d_y)``."""

    widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 3:
            raise ValueError("a network needs an input, at least one hidden layer and an output")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        object.__setattr__(self, "widths", widths)

    @classmethod
    def parse(cls, text: str) -> "NetworkShape":
        try:
            return cls(tuple(int(t) for t in text.split(",") if t.strip()))
        except ValueError as exc:
            raise ValueError(f"bad width list {text!r}: {exc}") from None

    @property
    def H(self) -> int:
        return len(self.widths) - 2

    @property
    def d_x(self) -> int:
        return self.widths[0]

    @property
    def d_y(self) -> int:
        return self.widths[-1]

    @property
    def p(self) -> int:
        return min(self.widths[1:-1])

    @property
    def p_hat(self) -> int:
        return min(self.p, self.d_y)

    def layer_shape(self, k: int) -> tuple:
        """Shape ``(d_k, d_{k-1})`` of layer ``k`` (1-based)."""
        if not 1 <= k <= self.H + 1:
            raise IndexError(f"layer index {k} outside 1..{self.H + 1}")
        return self.widths[k], self.widths[k - 1]

    @property
    def n_params(self) -> int:
        return sum(a * b for a, b in (self.layer_shape(k) for k in range(1, self.H + 2)))

    def __str__(self):
        return ",".join(map(str, self.widths))


@dataclass(frozen=True)
class WeightStack:
    """Immutable sequence ``W_1, ..., W_{H+1}``; ``layers[k-1]`` is ``W_k``."""

    shape: NetworkShape
    layers: tuple

    def __post_init__(self):
        if len(self.layers) != self.shape.H + 1:
            raise ShapeError(f"expected {self.shape.H + 1} layers, got {len(self.layers)}")
        frozen = []
        for k, W in enumerate(self.layers, start=1):
            W = np.array(as_matrix(W, f"W_{k}"), dtype=np.float64)
            if W.shape != self.shape.layer_shape(k):
                raise ShapeError(
                    f"W_{k} has shape {W.shape}, expected {self.shape.layer_shape(k)}"
                )
            W.flags.writeable = False
            frozen.append(W)
        object.__setattr__(self, "layers", tuple(frozen))

    @classmethod
    def zeros(cls, shape: NetworkShape) -> "WeightStack":
        return cls(shape, tuple(np.zeros(shape.layer_shape(k)) for k in range(1, shape.H + 2)))

    @classmethod
    def random(cls, shape: NetworkShape, rng, scale: float = 1.0) -> "WeightStack":
        rng = np.random.default_rng(rng)
        return cls(
            shape,
            tuple(scale * rng.standard_normal(shape.layer_shape(k)) for k in range(1, shape.H + 2)),
        )

    @property
    def H(self) -> int:
        return self.shape.H

    def __getitem__(self, k: int) -> np.ndarray:
        """``W_k`` for ``k`` in ``1..H+1``."""
        self.shape.layer_shape(k)
        return self.layers[k - 1]

    def replace(self, k: int, W) -> "WeightStack":
        layers = list(self.layers)
        layers[k - 1] = W
        return WeightStack(self.shape, tuple(layers))

    def prod(self, hi: int, lo: int) -> np.ndarray:
        """``W_hi W_{hi-1} ... W_lo``; the identity of size ``d_hi`` when ``hi < lo``."""
        if hi < lo:
            return np.eye(self.shape.widths[hi])
        out = self[hi]
        for k in range(hi - 1, lo - 1, -1):
            out = out @ self[k]
        return np.array(out)

    def end_to_end(self) -> np.ndarray:
        return self.prod(self.H + 1, 1)

    def to_vector(self) -> np.ndarray:
        """Stacked parameters ``(vec(W_{H+1}^T), ..., vec(W_1^T))``.

        ``vec(W^T)`` stacks the rows of ``W``, i.e. the row-major flattening.
        """
        return np.concatenate([self[k].ravel() for k in range(self.H + 1, 0, -1)])

    @classmethod
    def from_vector(cls, shape: NetworkShape, theta) -> "WeightStack":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (shape.n_params,):
            raise ShapeError(f"parameter vector must have length {shape.n_params}")
        layers = [None] * (shape.H + 1)
        pos = 0
        for k in range(shape.H + 1, 0, -1):
            rows, cols = shape.layer_shape(k)
            layers[k - 1] = theta[pos : pos + rows * cols].reshape(rows, cols)
            pos += rows * cols
        return cls(shape, tuple(layers))


def block_ranges(shape: NetworkShape) -> dict:
    """Parameter-vector slice of each layer, in the stacking order of ``to_vector``."""
    out = {}
    pos = 0
    for k in range(shape.H + 1, 0, -1):
        rows, cols = shape.layer_shape(k)
        out[k] = (pos, pos + rows * cols)
        pos += rows * cols
    return out


@dataclass(frozen=True)
class DatasetPair:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.array(as_matrix(self.X, "X"))
        Y = np.array(as_matrix(self.Y, "Y"))
        if X.shape[1] != Y.shape[1]:
            raise ShapeError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}")
        if X.shape[1] < 1:
            raise ShapeError("need at least one data point")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def d_x(self) -> int:
        return self.X.shape[0]

    @property
    def d_y(self) -> int:
        return self.Y.shape[0]

    def check_shape(self, shape: NetworkShape):
        if shape.d_x != self.d_x or shape.d_y != self.d_y:
            raise ShapeError(
                f"network expects d_x={shape.d_x}, d_y={shape.d_y}; "
                f"data has d_x={self.d_x}, d_y={self.d_y}"
            )


def reference_r1() -> DatasetPair:
    """X = I_2, Y = diag(1, 2): Sigma = diag(1, 4)."""
    return DatasetPair(np.eye(2), np.diag([1.0, 2.0]))


R1_SHAPE = NetworkShape((2, 1, 2))
R2_SHAPE = NetworkShape((2, 2, 2, 2))


def forward(W: WeightStack, X) -> np.ndarray:
    """``W_{H+1} ... W_1 X``, accumulated from the input side."""
    X = as_matrix(X, "X")
    if X.shape[0] != W.shape.d_x:
        raise ShapeError(f"X has {X.shape[0]} rows, network expects d_x={W.shape.d_x}")
    out = X
    for k in range(1, W.H + 2):
        out = W[k] @ out
    return out


def residual(W: WeightStack, data: DatasetPair) -> np.ndarray:
    data.check_shape(W.shape)
    return forward(W, data.X) - data.Y


def loss(W: WeightStack, data: DatasetPair) -> float:
    R = residual(W, data)
    return 0.5 * float(np.sum(R * R))


def error_matrix(W: WeightStack, data: DatasetPair) -> np.ndarray:
    """``r = (Y_hat - Y)^T``, shape ``m x d_y``."""
    return residual(W, data).T.copy()


@dataclass(frozen=True)
class AssumptionReport:
    xxt_full_rank: bool
    xyt_full_rank: bool
    distinct_eigs: bool
    dy_le_dx: bool

    @property
    def all_hold(self) -> bool:
        return self.xxt_full_rank and self.xyt_full_rank and self.distinct_eigs and self.dy_le_dx

    def failed(self) -> list:
        return [name for name, ok in self.to_dict().items() if not ok]

    def to_dict(self) -> dict:
        return {
            "xxt_full_rank": self.xxt_full_rank,
            "xyt_full_rank": self.xyt_full_rank,
            "distinct_eigs": self.distinct_eigs,
            "dy_le_dx": self.dy_le_dx,
        }


@dataclass(frozen=True)
class DataSpectrum:
    """``Sigma = Y X^T (X X^T)^{-1} X Y^T`` with its descending eigendecomposition.

    ``sigma``, ``eigvalues`` and ``eigvectors`` are ``None`` when ``X X^T`` is
    singular.
    """

    sigma: np.ndarray | None
    eigvalues: np.ndarray | None
    eigvectors: np.ndarray | None
    xxt_full_rank: bool
    xyt_full_rank: bool
    distinct_eigs: bool
    dy_le_dx: bool
    ols: np.ndarray | None = field(default=None, repr=False)

    @property
    def assumptions(self) -> AssumptionReport:
        return AssumptionReport(
            self.xxt_full_rank, self.xyt_full_rank, self.distinct_eigs, self.dy_le_dx
        )


def _xxt_solve(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``(X X^T)^{-1} B`` through a symmetric positive-definite solve."""
    return scipy.linalg.solve(X @ X.T, B, assume_a="pos")


def ols_matrix(data: DatasetPair) -> np.ndarray:
    """Unconstrained least-squares map ``Y X^T (X X^T)^{-1}``."""
    return _xxt_solve(data.X, data.X @ data.Y.T).T


def _distinct(values: np.ndarray, cfg: ToleranceConfig) -> bool:
    if values.size <= 1:
        return True
    scale = max(abs(values[0]), abs(values[-1]))
    gaps = values[:-1] - values[1:]
    return bool(np.all(gaps > cfg.eig_zero_tol * scale))


def data_spectrum(data: DatasetPair, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> DataSpectrum:
    X, Y = data.X, data.Y
    xxt_ok = rank_tol(X, cfg) == data.d_x
    xyt_ok = rank_tol(X @ Y.T, cfg) == min(data.d_x, data.d_y)
    dy_le_dx = data.d_y <= data.d_x
    if not xxt_ok:
        return DataSpectrum(None, None, None, False, xyt_ok, False, dy_le_dx)
    ols = ols_matrix(data)
    sigma = ols @ X @ Y.T
    sigma = 0.5 * (sigma + sigma.T)
    values, vectors = sym_eig(sigma)
    return DataSpectrum(
        sigma, values, vectors, True, xyt_ok, _distinct(values, cfg), dy_le_dx, ols
    )


def check_assumptions(data: DatasetPair, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> AssumptionReport:
    return data_spectrum(data, cfg).assumptions


def require_assumptions(spectrum: DataSpectrum, strict: bool) -> list:
    """Raise in strict mode if any hypothesis fails; otherwise return warnings."""
    failed = spectrum.assumptions.failed()
    if not failed:
        return []
    msg = "data assumptions violated: " + ", ".join(failed)
    if strict:
        raise AssumptionError(msg)
    warnings.warn(msg + " (running unverified)", stacklevel=3)
    return ["UNVERIFIED: " + msg]
