import numpy as np
import pytest

from conftest import random_instance
from deeplinear.derivatives import (
    ANALYTIC,
    FINITE_DIFFERENCE,
    block_relative_error,
    central_gradient,
    fd_gradient,
    fd_hessian,
    full_hessian,
    gradient,
    gradient_contracted,
    hessian_diag_block,
    hessian_offdiag_block_k1,
)
from deeplinear.landscape import global_minimum
from deeplinear.linalg import BudgetError, kron
from deeplinear.model import R1_SHAPE, R2_SHAPE, NetworkShape, WeightStack, error_matrix, loss


def max_rel_entry(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class TestGradient:
    def test_zero_weights_critical(self, r1):
        for shape in (R1_SHAPE, R2_SHAPE, NetworkShape((2, 3, 1, 2, 2))):
            g = gradient(WeightStack.zeros(shape), r1)
            assert g.stacked_norm == 0.0

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_finite_differences(self, seed):
        _, W, data = random_instance(seed)
        g = gradient(W, data).to_vector()
        f = fd_gradient(W, data).to_vector()
        assert max_rel_entry(f, g) <= 1e-6

    def test_r1_random_point(self, r1):
        W = WeightStack.random(R1_SHAPE, 0, 1.0)
        assert max_rel_entry(fd_gradient(W, r1).to_vector(), gradient(W, r1).to_vector()) <= 1e-6

    def test_zero_at_global_minimum(self, r1):
        gm = global_minimum(R1_SHAPE, r1)
        assert gradient(gm.stack, r1).stacked_norm <= 1e-10

    @pytest.mark.parametrize("seed", range(8))
    def test_contracted_form_agrees(self, seed):
        _, W, data = random_instance(seed)
        np.testing.assert_allclose(
            gradient_contracted(W, data).to_vector(), gradient(W, data).to_vector(), rtol=1e-12, atol=1e-12
        )

    def test_block_shapes_and_norm(self):
        shape, W, data = random_instance(21)
        g = gradient(W, data)
        for k in range(1, shape.H + 2):
            assert g[k].shape == shape.layer_shape(k)
        np.testing.assert_allclose(g.stacked_norm, np.linalg.norm(g.to_vector()))


class TestFiniteDifferenceHelpers:
    def test_second_order_convergence(self):
        x0 = np.array([0.3, -1.1])

        def f(x):
            return np.sin(x[0]) * np.exp(x[1])

        exact = np.array([np.cos(x0[0]) * np.exp(x0[1]), np.sin(x0[0]) * np.exp(x0[1])])
        e1 = np.abs(central_gradient(f, x0, 1e-2) - exact)
        e2 = np.abs(central_gradient(f, x0, 5e-3) - exact)
        ratio = e1 / e2
        assert np.all((ratio > 3.6) & (ratio < 4.4))

    def test_quadratic_in_one_entry(self, r1):
        W = WeightStack.random(R1_SHAPE, 4, 1.0)
        theta = W.to_vector()
        i = theta.size - 1  # last entry belongs to W_1
        t = np.linspace(-1, 1, 3)

        def restricted(v):
            x = theta.copy()
            x[i] = v
            return loss(WeightStack.from_vector(R1_SHAPE, x), r1)

        # exact second derivative of the parabola through three points
        coeffs = np.polyfit(theta[i] + t, [restricted(theta[i] + s) for s in t], 2)
        Hfd = fd_hessian(W, r1).matrix
        np.testing.assert_allclose(Hfd[i, i], 2 * coeffs[0], rtol=1e-6)


class TestHessianBlocks:
    def test_diag_block_zero_upstream(self, r1):
        W = WeightStack.random(R2_SHAPE, 1).replace(3, np.zeros((2, 2)))
        np.testing.assert_array_equal(hessian_diag_block(W, r1, 1), 0.0)

    def test_diag_block_h1_top(self, r1):
        W = WeightStack.random(NetworkShape((2, 3, 2)), 2)
        np.testing.assert_allclose(hessian_diag_block(W, r1, 2), kron(np.eye(2), W[1] @ W[1].T))

    @pytest.mark.parametrize("seed", range(6))
    def test_diag_blocks_match_loss_differences(self, seed):
        _, W, data = random_instance(seed)
        Hfd = fd_hessian(W, data)
        for k in range(1, W.H + 2):
            assert block_relative_error(hessian_diag_block(W, data, k), Hfd.block(k, k)) <= 1e-5

    @pytest.mark.parametrize("seed", range(6))
    def test_cross_blocks_match_loss_differences(self, seed):
        _, W, data = random_instance(seed, hidden=(2, 3))
        Hfd = fd_hessian(W, data)
        for k in range(2, W.H + 2):
            assert block_relative_error(hessian_offdiag_block_k1(W, data, k), Hfd.block(1, k)) <= 1e-5

    def test_cross_block_r2(self, r1):
        W = WeightStack.random(R2_SHAPE, 8)
        Hfd = fd_hessian(W, r1)
        assert block_relative_error(hessian_offdiag_block_k1(W, r1, 2), Hfd.block(1, 2)) <= 1e-5

    def test_cross_block_perfect_fit_keeps_first_term(self, r1):
        W = WeightStack(R2_SHAPE, (np.eye(2), np.eye(2), r1.Y.copy()))
        assert np.abs(error_matrix(W, r1)).max() == 0
        C = W.prod(3, 2)
        A = W.prod(3, 3)
        D = W.prod(1, 1) @ r1.X
        np.testing.assert_allclose(hessian_offdiag_block_k1(W, r1, 2), kron(C.T @ A, r1.X @ D.T), atol=1e-14)

    def test_cross_block_vanishes(self, r1):
        W = WeightStack.random(R2_SHAPE, 3).replace(3, np.zeros((2, 2)))
        np.testing.assert_array_equal(hessian_offdiag_block_k1(W, r1, 2), 0.0)

    def test_cross_block_index_range(self, r1):
        W = WeightStack.random(R2_SHAPE, 3)
        for k in (0, 1, 4):
            with pytest.raises(IndexError):
                hessian_offdiag_block_k1(W, r1, k)

    @pytest.mark.parametrize("seed", range(10))
    def test_diag_blocks_psd(self, seed):
        _, W, data = random_instance(seed)
        for k in range(1, W.H + 2):
            B = hessian_diag_block(W, data, k)
            assert np.linalg.eigvalsh(B).min() >= -1e-9 * max(np.linalg.norm(B, 2), 1.0)


class TestFullHessian:
    def test_zero_hessian_three_zero_layers(self, r1):
        Hm = full_hessian(WeightStack.zeros(R2_SHAPE), r1)
        np.testing.assert_array_equal(Hm.matrix, 0.0)

    def test_two_zero_layers_leave_nonzero_hessian(self, r1):
        W = WeightStack.zeros(R2_SHAPE).replace(3, np.eye(2))
        eigs = full_hessian(W, r1).eigvalsh()
        assert eigs.min() < -0.5 and eigs.max() > 0.5

    def test_indefinite_at_zero_h1(self, r1):
        eigs = full_hessian(WeightStack.zeros(R1_SHAPE), r1).eigvalsh()
        assert eigs.min() < -1e-8 and eigs.max() > 1e-8

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_loss_only_oracle(self, seed):
        _, W, data = random_instance(seed)
        Ha = full_hessian(W, data)
        Hfd = fd_hessian(W, data)
        assert block_relative_error(Ha.matrix, Hfd.matrix) <= 1e-5
        assert Ha.asymmetry <= 1e-8
        np.testing.assert_array_equal(Ha.matrix, Ha.matrix.T)

    def test_provenance_and_layout(self):
        shape, W, data = random_instance(5, hidden=(3,))
        Ha = full_hessian(W, data)
        for k in range(1, shape.H + 2):
            assert Ha.provenance[(k, k)] == ANALYTIC
            if k > 1:
                assert Ha.provenance[(1, k)] == ANALYTIC
                assert Ha.provenance[(k, 1)] == ANALYTIC
        assert Ha.provenance[(2, 3)] == FINITE_DIFFERENCE
        assert all(err <= 1e-5 for err in Ha.fd_crosscheck.values())
        covered = sorted(r for r in Ha.layer_ranges.values())
        assert covered[0][0] == 0 and covered[-1][1] == Ha.dim == shape.n_params

    def test_budget(self, r1):
        with pytest.raises(BudgetError):
            full_hessian(WeightStack.zeros(R2_SHAPE), r1, budget=100)
