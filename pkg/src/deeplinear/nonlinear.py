"""Path decomposition of a network with Bernoulli path activations.

Each output ``Y_hat[j, i]`` is a sum over input-to-output paths of
``q * X[i0, i] * Z * prod(weights on the path)`` where ``Z ~ Bernoulli(rho)``
is drawn independently per (sample, output, path) and independently of the
data and weights.  With ``q = 1/rho`` the expectation over ``Z`` is the deep
linear output.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .linalg import BudgetError, as_matrix
from .model import DatasetPair, NetworkShape, WeightStack, forward

PATH_BUDGET = 1_000_000
# entries of the Bernoulli mask drawn per chunk
CHUNK_ENTRIES = 4_000_000
DEFAULT_SHARDS = 8


def count_paths(shape: NetworkShape) -> int:
    """Paths per output unit: ``d_x * d_1 * ... * d_H``."""
    return math.prod(shape.widths[:-1])


@dataclass(frozen=True)
class PathModel:
    shape: NetworkShape
    rho: float
    q: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.q is None:
            object.__setattr__(self, "q", 1.0 / self.rho)

    @property
    def psi_per_output(self) -> int:
        return count_paths(self.shape)


def enumerate_paths(shape: NetworkShape, budget: int = PATH_BUDGET):
    """Return ``(psi, iterator)`` over path tuples ``(i_0, i_1, ..., i_H)`` in lexicographic order."""
    psi = count_paths(shape)
    if psi > budget:
        raise BudgetError(f"{psi} paths per output exceed the budget of {budget}")
    return psi, itertools.product(*(range(w) for w in shape.widths[:-1]))


def path_table(shape: NetworkShape, budget: int = PATH_BUDGET) -> np.ndarray:
    """Materialized paths, shape ``psi x (H+1)``; column ``k`` holds the unit in layer ``k``."""
    psi, _ = enumerate_paths(shape, budget)
    grids = np.indices(shape.widths[:-1]).reshape(shape.H + 1, psi)
    return grids.T.copy()


def path_weights(W: WeightStack, paths: np.ndarray | None = None) -> np.ndarray:
    """Weight products per (output, path), shape ``d_y x psi``."""
    paths = path_table(W.shape) if paths is None else paths
    hidden = np.ones(paths.shape[0])
    for k in range(1, W.H + 1):
        hidden = hidden * W[k][paths[:, k], paths[:, k - 1]]
    return W[W.H + 1][:, paths[:, W.H]] * hidden


def path_contributions(W: WeightStack, X, paths: np.ndarray | None = None) -> np.ndarray:
    """``X[i0(p), i] * prod(weights)`` arranged as ``d_y x m x psi``."""
    X = as_matrix(X, "X")
    paths = path_table(W.shape) if paths is None else paths
    pw = path_weights(W, paths)
    xin = X[paths[:, 0], :]  # psi x m
    return pw[:, None, :] * xin.T[None, :, :]


def path_sum(W: WeightStack, X) -> np.ndarray:
    """All paths active: reproduces ``forward(W, X)``."""
    return path_contributions(W, X).sum(axis=2)


def _draw(contrib: np.ndarray, rho: float, q: float, n: int, rng) -> np.ndarray:
    """``n`` independent draws of the gated output, shape ``n x d_y x m``."""
    mask = rng.random((n,) + contrib.shape) < rho
    return q * np.einsum("njip,jip->nji", mask, contrib)


def relu_path_output_sampled(model: PathModel, W: WeightStack, X, sample_seed) -> np.ndarray:
    """One Monte-Carlo draw of the gated network output."""
    contrib = path_contributions(W, X)
    rng = np.random.default_rng(sample_seed)
    return _draw(contrib, model.rho, model.q, 1, rng)[0]


@dataclass(frozen=True)
class MCResult:
    mean: np.ndarray
    stderr: np.ndarray
    linear_reference: np.ndarray
    n_samples: int
    n_shards: int
    seed: int
    rho: float
    q: float


def _shard_sums(contrib, rho, q, shift, n, seed_seq):
    """Shifted first and second moment sums for one shard."""
    rng = np.random.default_rng(seed_seq)
    per = max(1, CHUNK_ENTRIES // max(1, contrib.size))
    s1 = np.zeros(shift.shape)
    s2 = np.zeros(shift.shape)
    done = 0
    while done < n:
        b = min(per, n - done)
        dev = _draw(contrib, rho, q, b, rng) - shift
        s1 += dev.sum(axis=0)
        s2 += (dev * dev).sum(axis=0)
        done += b
    return s1, s2


def mc_expectation(
    model: PathModel,
    W: WeightStack,
    X,
    n_samples: int,
    n_shards: int = DEFAULT_SHARDS,
    workers: int | None = None,
) -> MCResult:
    """Entrywise sample mean and standard error of the gated output.

    Samples are split over ``n_shards`` independent streams spawned from
    ``model.seed``; shard sums are merged in shard order, so the result does
    not depend on ``workers``.  Moments are accumulated around the all-active
    output, which makes the ``rho = 1`` case exact.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    n_shards = max(1, min(n_shards, n_samples))
    contrib = path_contributions(W, X)
    shift = model.q * contrib.sum(axis=2)
    counts = [n_samples // n_shards + (1 if s < n_samples % n_shards else 0) for s in range(n_shards)]
    seeds = np.random.SeedSequence(model.seed).spawn(n_shards)
    jobs = [(contrib, model.rho, model.q, shift, c, s) for c, s in zip(counts, seeds)]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _shard_sums(*a), jobs))
    else:
        parts = [_shard_sums(*a) for a in jobs]
    s1 = np.zeros(shift.shape)
    s2 = np.zeros(shift.shape)
    for a, b in parts:
        s1 += a
        s2 += b
    n = n_samples
    mean = shift + s1 / n
    var = np.maximum(s2 - s1 * s1 / n, 0.0) / (n - 1)
    stderr = np.sqrt(var / n)
    return MCResult(mean, stderr, forward(W, X), n, n_shards, model.seed, model.rho, model.q)


@dataclass(frozen=True)
class ExpectedLoss:
    value: float
    stderr: float
    mc: MCResult


def expected_loss(model: PathModel, W: WeightStack, data: DatasetPair, n_samples: int, **kwargs) -> ExpectedLoss:
    """``||E_Z[Y_hat] - Y||_F^2 / 2`` with the expectation replaced by the Monte-Carlo mean.

    ``stderr`` propagates the entrywise standard errors through the quadratic
    (linear term plus the positive bias ``sum(stderr^2) / 2``).
    """
    mc = mc_expectation(model, W, data.X, n_samples, **kwargs)
    R = mc.mean - data.Y
    value = 0.5 * float(np.sum(R * R))
    se = float(np.sqrt(np.sum((R * mc.stderr) ** 2))) + 0.5 * float(np.sum(mc.stderr**2))
    return ExpectedLoss(value, se, mc)
