"""Critical points of the deep linear loss: closed forms, constructions and classification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .derivatives import HessianMatrix, full_hessian, gradient, gradient_contracted
from .linalg import (
    DEFAULT_TOLERANCES,
    ELEMENT_BUDGET,
    ToleranceConfig,
    as_matrix,
    frob,
    null_basis,
    pseudoinverse,
    range_basis,
    range_projector,
    rank_tol,
)
from .model import (
    AssumptionError,
    DatasetPair,
    DataSpectrum,
    NetworkShape,
    WeightStack,
    data_spectrum,
    error_matrix,
    loss,
    require_assumptions,
)

# Equalities in the necessary-condition report are accepted at this relative level.
CONDITION_TOL = 1e-8
DIVERGENCE_LOSS = 1e12


class Label(str, enum.Enum):
    GLOBAL_MIN = "GLOBAL_MIN"
    STRICT_SADDLE = "STRICT_SADDLE"
    DEGENERATE_SADDLE = "DEGENERATE_SADDLE"
    NON_CRITICAL = "NON_CRITICAL"


THEOREM_VIOLATION = "THEOREM_VIOLATION"


class NoNullSpaceError(ValueError):
    code = "NO_NULL_SPACE"


def classification_margin(loss_star: float) -> float:
    return max(1e-6, 1e-6 * loss_star)


# --------------------------------------------------------------------------
# global minimum and critical-point representation
# --------------------------------------------------------------------------


def _sigma_eigvalues(data: DatasetPair, spectrum: DataSpectrum) -> np.ndarray:
    if spectrum.eigvalues is not None:
        return spectrum.eigvalues
    # singular X X^T: project onto the row space of X instead
    ols = data.Y @ pseudoinverse(data.X)
    sigma = ols @ data.X @ data.Y.T
    return np.sort(np.linalg.eigvalsh(0.5 * (sigma + sigma.T)))[::-1]


def global_min_loss(data: DatasetPair, p_hat: int, spectrum: DataSpectrum | None = None) -> float:
    """``(tr(Y Y^T) - sum of the p_hat largest eigenvalues of Sigma)) / 2``."""
    spectrum = spectrum or data_spectrum(data)
    lam = _sigma_eigvalues(data, spectrum)
    value = 0.5 * (float(np.sum(data.Y * data.Y)) - float(np.sum(lam[:p_hat])))
    return max(value, 0.0)


def factorize_product(target, shape: NetworkShape, cfg: ToleranceConfig = DEFAULT_TOLERANCES) -> WeightStack:
    """Weights whose end-to-end product equals ``target``.

    The thin SVD ``U S V^T`` of the target is split evenly, ``S^(1/(H+1))`` per
    layer; hidden-to-hidden layers are padded with identity beyond the target
    rank, which the zero padding of the first and last layers cancels.
    """
    T = as_matrix(target, "target")
    if T.shape != (shape.d_y, shape.d_x):
        raise ValueError(f"target must be {shape.d_y}x{shape.d_x}, got {T.shape}")
    r = rank_tol(T, cfg)
    if r > shape.p:
        raise ValueError(f"target rank {r} exceeds the narrowest hidden width p={shape.p}")
    if r == 0:
        return WeightStack.zeros(shape)
    U, s, Vt = np.linalg.svd(T, full_matrices=False)
    root = s[:r] ** (1.0 / (shape.H + 1))
    layers = []
    for k in range(1, shape.H + 2):
        rows, cols = shape.layer_shape(k)
        if k == 1:
            Wk = np.zeros((rows, cols))
            Wk[:r] = root[:, None] * Vt[:r]
        elif k == shape.H + 1:
            Wk = np.zeros((rows, cols))
            Wk[:, :r] = U[:, :r] * root
        else:
            Wk = np.eye(rows, cols)
            Wk[np.arange(r), np.arange(r)] = root
        layers.append(Wk)
    return WeightStack(shape, tuple(layers))


def projected_product(spectrum: DataSpectrum, columns) -> np.ndarray:
    """``U_I U_I^T Y X^T (X X^T)^{-1}`` for 0-based eigenvector columns ``I``."""
    U_I = spectrum.eigvectors[:, list(columns)]
    return U_I @ (U_I.T @ spectrum.ols)


@dataclass(frozen=True)
class GlobalMinimum:
    stack: WeightStack
    product: np.ndarray
    loss_star: float
    loss_direct: float


def _spectrum_for(shape, data, cfg, strict):
    data.check_shape(shape)
    spectrum = data_spectrum(data, cfg)
    notes = require_assumptions(spectrum, strict)
    if spectrum.sigma is None:
        raise AssumptionError("X X^T is singular; the closed forms need it invertible")
    return spectrum, notes


def global_minimum(
    shape: NetworkShape,
    data: DatasetPair,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    strict: bool = True,
) -> GlobalMinimum:
    """Closed-form global minimizer: projection of the least-squares map onto the top ``p_hat`` eigenvectors."""
    spectrum, _ = _spectrum_for(shape, data, cfg, strict)
    product = projected_product(spectrum, range(shape.p_hat))
    stack = factorize_product(product, shape, cfg)
    return GlobalMinimum(
        stack, product, global_min_loss(data, shape.p_hat, spectrum), loss(stack, data)
    )


def critical_product_representation(W: WeightStack, data: DatasetPair, cfg: ToleranceConfig = DEFAULT_TOLERANCES):
    """Return ``(C (C^T C)^- C^T Y X^T (X X^T)^{-1}, ||that - W_{H+1}...W_1||_F)``.

    At a critical point the two coincide.
    """
    spectrum = data_spectrum(data, cfg)
    if spectrum.ols is None:
        raise AssumptionError("X X^T is singular")
    C = W.prod(W.H + 1, 2)
    predicted = range_projector(C, cfg) @ spectrum.ols
    return predicted, frob(predicted - W.end_to_end())


# --------------------------------------------------------------------------
# constructions
# --------------------------------------------------------------------------


def construct_bad_saddle(
    shape: NetworkShape,
    data: DatasetPair,
    top_layer=None,
    seed: int = 0,
) -> WeightStack:
    """Critical point with ``W_1 = ... = W_H = 0`` whose Hessian vanishes.

    Every second-order term of the loss needs two perturbed factors, so the
    Hessian is zero as soon as three factors are zero.  For ``H >= 3`` the
    top layer is free (seeded random by default); for ``H = 2`` it must be
    zero as well, since ``W_3 dW_2 dW_1`` would otherwise survive.
    """
    data.check_shape(shape)
    if shape.H < 2:
        raise ValueError("bad saddles need H >= 2; for H = 1 every saddle has a negative curvature direction")
    if not np.any(data.Y):
        raise ValueError("rank(Y) must be at least 1")
    top_shape = shape.layer_shape(shape.H + 1)
    if top_layer is None:
        if shape.H == 2:
            top = np.zeros(top_shape)
        else:
            top = np.random.default_rng(seed).standard_normal(top_shape)
    else:
        top = as_matrix(top_layer, "top_layer")
        if shape.H == 2 and np.any(top):
            raise ValueError(
                "with H = 2 a nonzero top layer leaves a nonzero W_1/W_2 Hessian block; pass zeros"
            )
    stack = WeightStack.zeros(shape)
    return stack.replace(shape.H + 1, top)


def construct_indefinite_point(
    shape: NetworkShape, data: DatasetPair, cfg: ToleranceConfig = DEFAULT_TOLERANCES
) -> WeightStack:
    """Critical point with ``W_{H+1} = W_1 = 0`` and identity-like hidden layers."""
    data.check_shape(shape)
    if rank_tol(data.X @ data.Y.T, cfg) < 1:
        raise AssumptionError("rank(X Y^T) must be at least 1")
    layers = [np.zeros(shape.layer_shape(1))]
    for k in range(2, shape.H + 1):
        layers.append(np.eye(*shape.layer_shape(k)))
    layers.append(np.zeros(shape.layer_shape(shape.H + 1)))
    return WeightStack(shape, tuple(layers))


def construct_index_set_critical_point(
    data: DatasetPair,
    shape: NetworkShape,
    index_set,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    strict: bool = True,
) -> WeightStack:
    """Critical point realizing ``U_I U_I^T Y X^T (X X^T)^{-1}``; ``index_set`` is 1-based."""
    idx = [int(i) for i in index_set]
    if idx != sorted(set(idx)):
        raise ValueError("index_set must be strictly ascending")
    if idx and not (1 <= idx[0] and idx[-1] <= shape.d_y):
        raise ValueError(f"indices must lie in 1..{shape.d_y}")
    if len(idx) > shape.p_hat:
        raise ValueError(f"index set of size {len(idx)} exceeds p_hat={shape.p_hat}")
    spectrum, _ = _spectrum_for(shape, data, cfg, strict)
    product = projected_product(spectrum, [i - 1 for i in idx])
    return factorize_product(product, shape, cfg)


# --------------------------------------------------------------------------
# necessary conditions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerConditions:
    k: int
    range_inclusion_holds: bool
    range_residual: float
    xr_annihilation_holds: bool
    xr_annihilation_norm: float
    rank_inequality_holds: bool
    rank_upper: int
    rank_lower: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NecessaryConditionsReport:
    layers: tuple
    projector_is_top: bool | None
    projector_residual: float | None
    xr_zero: bool
    xr_norm: float

    @property
    def semidefinite_conditions_hold(self) -> bool:
        """For every k: range inclusion or the annihilation ``X r A_k = 0``."""
        return all(c.range_inclusion_holds or c.xr_annihilation_holds for c in self.layers)

    @property
    def rank_conditions_hold(self) -> bool:
        return all(c.rank_inequality_holds or c.xr_annihilation_holds for c in self.layers)

    @property
    def psd_condition_holds(self) -> bool:
        return bool(self.projector_is_top) or self.xr_zero

    @property
    def consistent(self) -> bool:
        """Range inclusion must imply the rank inequality for every k."""
        return all(c.rank_inequality_holds or not c.range_inclusion_holds for c in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [c.to_dict() for c in self.layers],
            "projector_is_top": self.projector_is_top,
            "projector_residual": self.projector_residual,
            "xr_zero": self.xr_zero,
            "xr_norm": self.xr_norm,
            "semidefinite_conditions_hold": self.semidefinite_conditions_hold,
            "rank_conditions_hold": self.rank_conditions_hold,
            "psd_condition_holds": self.psd_condition_holds,
            "consistent": self.consistent,
        }


def necessary_conditions_report(
    W: WeightStack,
    data: DatasetPair,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    spectrum: DataSpectrum | None = None,
) -> NecessaryConditionsReport:
    """Evaluate the Hessian-semidefiniteness necessary conditions at ``W``."""
    data.check_shape(W.shape)
    spectrum = spectrum or data_spectrum(data, cfg)
    X = data.X
    r = error_matrix(W, data)
    data_scale = max(1.0, frob(X) * frob(data.Y))
    C = W.prod(W.H + 1, 2)
    P_CtC = range_projector(C.T @ C, cfg)
    layers = []
    for k in range(2, W.H + 2):
        A = W.prod(W.H + 1, k + 1)
        B = W.prod(k - 1, 2)
        res = frob(B.T - P_CtC @ B.T) / max(1.0, frob(B))
        xr = frob(X @ r @ A) / (data_scale * max(1.0, frob(A)))
        upper = rank_tol(W.prod(W.H + 1, k), cfg)
        lower = rank_tol(B, cfg)
        layers.append(
            LayerConditions(
                k, res <= CONDITION_TOL, res, xr <= CONDITION_TOL, xr, upper >= lower, upper, lower
            )
        )
    xr_norm = frob(X @ r) / data_scale
    if spectrum.eigvectors is not None:
        p_bar = rank_tol(C, cfg)
        U = spectrum.eigvectors[:, :p_bar]
        proj_res = frob(range_projector(C, cfg) - U @ U.T)
        proj_top = proj_res <= CONDITION_TOL
    else:
        proj_res, proj_top = None, None
    return NecessaryConditionsReport(tuple(layers), proj_top, proj_res, xr_norm <= CONDITION_TOL, xr_norm)


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CriticalPointReport:
    grad_norm: float
    loss_value: float
    global_min_loss: float
    hessian_min_eig: float
    hessian_max_eig: float
    p_bar: int
    label: Label
    assumption_flags: dict
    condition_report: NecessaryConditionsReport
    diagnostics: tuple = ()
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return {
            "grad_norm": self.grad_norm,
            "loss_value": self.loss_value,
            "global_min_loss": self.global_min_loss,
            "hessian_min_eig": self.hessian_min_eig,
            "hessian_max_eig": self.hessian_max_eig,
            "p_bar": self.p_bar,
            "label": self.label.value,
            "assumption_flags": dict(self.assumption_flags),
            "condition_report": self.condition_report.to_dict(),
            "diagnostics": list(self.diagnostics),
            "warnings": list(self.warnings),
        }


def classify_point(
    W: WeightStack,
    data: DatasetPair,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    strict: bool = True,
    hessian: HessianMatrix | None = None,
    budget: int = ELEMENT_BUDGET,
) -> CriticalPointReport:
    """Label ``W`` from its gradient, Hessian spectrum and loss.

    A point that looks like a non-global local minimum is not given a label of
    its own; it is reported as a ``THEOREM_VIOLATION`` diagnostic.
    """
    data.check_shape(W.shape)
    spectrum = data_spectrum(data, cfg)
    notes = require_assumptions(spectrum, strict)
    shape = W.shape
    loss_value = loss(W, data)
    loss_star = global_min_loss(data, shape.p_hat, spectrum)
    grad_norm = gradient(W, data).stacked_norm
    hessian = hessian or full_hessian(W, data, cfg, budget)
    eigs = hessian.eigvalsh()
    min_eig, max_eig = float(eigs[0]), float(eigs[-1])
    band = cfg.eig_zero_tol * max(abs(max_eig), 1.0)
    margin = classification_margin(loss_star)
    C = W.prod(W.H + 1, 2)
    p_bar = rank_tol(C, cfg)
    conditions = necessary_conditions_report(W, data, cfg, spectrum)
    diagnostics = []

    if grad_norm > cfg.grad_crit_tol * (1.0 + loss_value):
        label = Label.NON_CRITICAL
    elif loss_value <= loss_star + margin:
        label = Label.GLOBAL_MIN
        if loss_value < loss_star - margin:
            diagnostics.append(f"{THEOREM_VIOLATION}: loss {loss_value!r} below the global minimum {loss_star!r}")
    elif min_eig < -band:
        label = Label.STRICT_SADDLE
    else:
        label = Label.DEGENERATE_SADDLE
        interior_rank = rank_tol(W.prod(W.H, 2), cfg)
        if min_eig > band or interior_rank == shape.p:
            diagnostics.append(
                f"{THEOREM_VIOLATION}: critical point with PSD Hessian above the global minimum "
                f"(rank(W_H...W_2)={interior_rank}, p={shape.p})"
            )
    if label is not Label.NON_CRITICAL and not conditions.consistent:
        diagnostics.append(f"{THEOREM_VIOLATION}: range inclusion without the rank inequality")

    return CriticalPointReport(
        grad_norm,
        loss_value,
        loss_star,
        min_eig,
        max_eig,
        p_bar,
        label,
        spectrum.assumptions.to_dict(),
        conditions,
        tuple(diagnostics),
        tuple(notes),
    )


# --------------------------------------------------------------------------
# loss-preserving rank perturbation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationResult:
    stack: WeightStack
    status: str  # RANK_INCREASED or RANK_SATURATED
    rank_before: int
    rank_after: int
    loss_before: float
    loss_after: float
    delta_norm: float
    attempts: int


def _row_completion(P, B, N, cfg):
    """Perturbation ``D`` with ``D B`` adding row directions of ``B`` missing from ``P = W_k B``.

    Columns of ``D`` live in span(N); returns None when no such direction exists.
    """
    Qb = range_basis(B.T, cfg)
    Qp = range_basis(P.T, cfg)
    V = range_basis(Qb - Qp @ (Qp.T @ Qb), cfg)
    t = min(N.shape[1], V.shape[1])
    if t == 0:
        return None
    return N[:, :t] @ V[:, :t].T @ pseudoinverse(B, cfg.rank_rel_tol)


def loss_preserving_rank_perturbation(
    W: WeightStack,
    data: DatasetPair,
    k: int,
    epsilon: float,
    seed: int = 0,
    cfg: ToleranceConfig = DEFAULT_TOLERANCES,
    max_tries: int = 16,
) -> PerturbationResult:
    """Perturb ``W_k`` inside the null space of ``A_k = W_{H+1}...W_{k+1}``.

    Since ``A_k D = 0`` the end-to-end product, hence the loss, is unchanged,
    while ``rank(W_k ... W_1)`` can grow.  A deterministic row completion is
    tried first, then seeded random null-space combinations.
    """
    data.check_shape(W.shape)
    W.shape.layer_shape(k)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    A = W.prod(W.H + 1, k + 1)
    N = null_basis(A, cfg)
    if N.shape[1] == 0:
        raise NoNullSpaceError(f"A_{k} has full column rank; no loss-preserving direction for W_{k}")
    B = W.prod(k - 1, 1)
    Wk = W[k]
    loss0 = loss(W, data)
    rank0 = rank_tol(Wk @ B, cfg)
    rng = np.random.default_rng(seed)

    def candidates():
        D = _row_completion(Wk @ B, B, N, cfg)
        if D is not None and np.any(D):
            yield D
        for _ in range(max_tries):
            yield N @ rng.standard_normal((N.shape[1], Wk.shape[1]))

    best = None
    attempts = 0
    for D in candidates():
        attempts += 1
        # leave room for the rounding of Wk + D so the realized change stays within epsilon
        slack = math.sqrt(D.size) * np.finfo(float).eps * (float(np.max(np.abs(Wk))) + epsilon)
        D = D * (max(epsilon - slack, 0.5 * epsilon) / frob(D))
        trial = W.replace(k, Wk + D)
        D = trial[k] - Wk
        r = rank_tol(trial[k] @ B, cfg)
        l1 = loss(trial, data)
        if abs(l1 - loss0) > 1e-9 * (1.0 + loss0):
            continue
        if best is None:
            best = (trial, r, l1, D)
        if r > rank0:
            return PerturbationResult(trial, "RANK_INCREASED", rank0, r, loss0, l1, frob(D), attempts)
    if best is None:
        raise RuntimeError("no null-space perturbation preserved the loss")
    trial, r, l1, D = best
    return PerturbationResult(trial, "RANK_SATURATED", rank0, r, loss0, l1, frob(D), attempts)


# --------------------------------------------------------------------------
# gradient descent
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    final: WeightStack
    trajectory: list = field(default_factory=list)  # (iteration, loss, grad_norm)
    status: str = "MAX_ITERS"  # CONVERGED, MAX_ITERS or DIVERGED

    @property
    def final_loss(self) -> float:
        return self.trajectory[-1][1]

    @property
    def final_grad_norm(self) -> float:
        return self.trajectory[-1][2]


def train_gd(
    W0: WeightStack,
    data: DatasetPair,
    step: float,
    max_iters: int,
    stop_grad_norm: float,
    record_every: int = 1,
) -> TrainResult:
    """Fixed-step gradient descent; the returned trajectory always includes the last iterate."""
    if step <= 0:
        raise ValueError("step must be positive")
    data.check_shape(W0.shape)
    shape = W0.shape
    layers = [np.array(W) for W in W0.layers]
    traj = []
    status = "MAX_ITERS"
    it = 0
    while True:
        current = WeightStack(shape, tuple(layers))
        g = gradient_contracted(current, data)
        value = loss(current, data)
        gn = g.stacked_norm
        last = gn <= stop_grad_norm or it >= max_iters or not math.isfinite(value) or value > DIVERGENCE_LOSS
        if last or it % record_every == 0:
            traj.append((it, value, gn))
        if not math.isfinite(value) or value > DIVERGENCE_LOSS:
            status = "DIVERGED"
            break
        if gn <= stop_grad_norm:
            status = "CONVERGED"
            break
        if it >= max_iters:
            break
        for i in range(len(layers)):
            layers[i] = layers[i] - step * g.blocks[i]
        it += 1
    return TrainResult(current, traj, status)
