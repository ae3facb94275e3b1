import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from deeplinear.linalg import ShapeError
from deeplinear.model import (
    AssumptionError,
    DatasetPair,
    NetworkShape,
    WeightStack,
    block_ranges,
    check_assumptions,
    data_spectrum,
    error_matrix,
    forward,
    loss,
    require_assumptions,
)
from deeplinear.nonlinear import path_sum


class TestShapes:
    def test_derived_widths(self):
        s = NetworkShape.parse("3,4,2,5,2")
        assert (s.H, s.d_x, s.d_y, s.p, s.p_hat) == (3, 3, 2, 2, 2)
        assert s.layer_shape(1) == (4, 3)
        assert s.layer_shape(4) == (2, 5)
        assert s.n_params == 12 + 8 + 10 + 10
        assert NetworkShape.parse("2,3,1").p_hat == 1

    @pytest.mark.parametrize("text", ["2,2", "2,0,2", "a,b,c", ""])
    def test_bad_shapes(self, text):
        with pytest.raises(ValueError):
            NetworkShape.parse(text)

    def test_layer_mismatch(self):
        s = NetworkShape((2, 3, 2))
        with pytest.raises(ShapeError):
            WeightStack(s, (np.zeros((3, 2)), np.zeros((3, 2))))

    def test_block_ranges_partition(self):
        s = NetworkShape((3, 2, 4, 1))
        ranges = block_ranges(s)
        ordered = sorted(ranges.values())
        assert ordered[0][0] == 0 and ordered[-1][1] == s.n_params
        assert all(a[1] == b[0] for a, b in zip(ordered, ordered[1:]))
        # top layer first
        assert ranges[s.H + 1][0] == 0

    def test_vector_round_trip(self):
        shape, W, _ = random_instance(2)
        back = WeightStack.from_vector(shape, W.to_vector())
        for k in range(1, shape.H + 2):
            np.testing.assert_array_equal(back[k], W[k])

    def test_layers_read_only(self):
        W = WeightStack.zeros(NetworkShape((2, 2, 2)))
        with pytest.raises(ValueError):
            W[1][0, 0] = 1.0

    def test_dataset_column_mismatch(self):
        with pytest.raises(ShapeError):
            DatasetPair(np.zeros((2, 3)), np.zeros((2, 4)))


class TestForwardAndLoss:
    def test_zero_weights(self, r1):
        W = WeightStack.zeros(NetworkShape((2, 3, 2)))
        np.testing.assert_array_equal(forward(W, r1.X), 0.0)
        assert loss(W, r1) == 2.5
        np.testing.assert_array_equal(error_matrix(W, r1), -r1.Y.T)

    def test_hand_product(self):
        W = WeightStack(NetworkShape((2, 1, 2)), (np.array([[1.0, 0.0]]), np.array([[1.0], [0.0]])))
        np.testing.assert_array_equal(forward(W, np.eye(2)), [[1, 0], [0, 0]])

    def test_perfect_fit(self, r1):
        W = WeightStack(NetworkShape((2, 2, 2)), (np.eye(2), r1.Y.copy()))
        assert loss(W, r1) == 0.0
        np.testing.assert_array_equal(error_matrix(W, r1), 0.0)

    def test_shape_mismatch(self, r1):
        W = WeightStack.zeros(NetworkShape((3, 2, 2)))
        with pytest.raises(ShapeError):
            forward(W, r1.X)

    @pytest.mark.parametrize("seed", range(10))
    def test_path_sum_oracle(self, seed):
        shape, W, data = random_instance(seed)
        np.testing.assert_allclose(forward(W, data.X), path_sum(W, data.X), rtol=1e-12, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-3, 3).filter(lambda c: abs(c) > 1e-3))
    def test_multilinear_in_each_layer(self, seed, c):
        shape, W, data = random_instance(seed)
        k = 1 + seed % (shape.H + 1)
        scaled = W.replace(k, c * W[k])
        np.testing.assert_allclose(forward(scaled, data.X), c * forward(W, data.X), rtol=1e-12, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_loss_invariant_under_layer_rebalancing(self, seed):
        shape, W, data = random_instance(seed, hidden=(1, 2, 3))
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, shape.H + 1))
        d = shape.widths[k]
        Q = rng.standard_normal((d, d)) + 3.0 * np.eye(d)
        moved = W.replace(k, Q @ W[k]).replace(k + 1, W[k + 1] @ np.linalg.inv(Q))
        np.testing.assert_allclose(loss(moved, data), loss(W, data), rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_frobenius_trace_identity(self, seed):
        _, W, data = random_instance(seed)
        r = error_matrix(W, data)
        np.testing.assert_allclose(loss(W, data), 0.5 * np.trace(r.T @ r), rtol=1e-12)


class TestSpectrum:
    def test_reference_r1(self, r1):
        sp = data_spectrum(r1)
        np.testing.assert_allclose(sp.sigma, np.diag([1.0, 4.0]), atol=1e-14)
        np.testing.assert_allclose(sp.eigvalues, [4.0, 1.0])
        np.testing.assert_allclose(np.abs(sp.eigvectors), [[0, 1], [1, 0]], atol=1e-14)
        assert sp.assumptions.all_hold

    def test_zero_targets(self):
        sp = data_spectrum(DatasetPair(np.eye(2), np.zeros((2, 2))))
        np.testing.assert_array_equal(sp.sigma, 0.0)
        assert not sp.distinct_eigs

    def test_random_reconstruction(self):
        rng = np.random.default_rng(11)
        sp = data_spectrum(DatasetPair(rng.standard_normal((3, 8)), rng.standard_normal((2, 8))))
        U, lam = sp.eigvectors, sp.eigvalues
        np.testing.assert_allclose(sp.sigma, sp.sigma.T, atol=1e-14)
        assert np.linalg.norm(U @ np.diag(lam) @ U.T - sp.sigma) <= 1e-9 * np.linalg.norm(sp.sigma)
        assert lam[-1] >= -1e-10 * lam[0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_sigma_psd(self, seed):
        rng = np.random.default_rng(seed)
        d_x, d_y = rng.integers(1, 5, size=2)
        m = int(rng.integers(d_x, d_x + 6))
        sp = data_spectrum(DatasetPair(rng.standard_normal((d_x, m)), rng.standard_normal((d_y, m))))
        assert sp.eigvalues[-1] >= -1e-10 * max(sp.eigvalues[0], 1e-300)

    def test_dy_greater_than_dx(self):
        rep = check_assumptions(DatasetPair(np.eye(2), np.arange(6.0).reshape(3, 2) + 1))
        assert not rep.dy_le_dx

    def test_repeated_rows_fail_assumptions(self):
        # Sigma for identical rows is [[1,1],[1,1]] with eigenvalues (2, 0): distinct,
        # but X Y^T drops to rank one
        rep = check_assumptions(DatasetPair(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]])))
        assert not rep.xyt_full_rank
        assert rep.distinct_eigs

    def test_repeated_eigenvalue(self):
        rep = check_assumptions(DatasetPair(np.eye(2), np.eye(2)))
        assert not rep.distinct_eigs
        assert rep.xxt_full_rank and rep.xyt_full_rank and rep.dy_le_dx

    def test_singular_xxt_does_not_crash(self):
        X = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
        sp = data_spectrum(DatasetPair(X, np.ones((1, 3))))
        assert not sp.xxt_full_rank
        assert sp.sigma is None

    def test_strict_and_permissive(self):
        sp = data_spectrum(DatasetPair(np.eye(2), np.eye(2)))
        with pytest.raises(AssumptionError):
            require_assumptions(sp, strict=True)
        with pytest.warns(UserWarning):
            notes = require_assumptions(sp, strict=False)
        assert notes and notes[0].startswith("UNVERIFIED")
