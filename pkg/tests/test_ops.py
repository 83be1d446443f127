import numpy as np
import pytest
from oracle_impls import conv2d_loops, conv2d_loops_alt, matvec_loops, maxpool_loops

import sparseconv as sc
from sparseconv import ConfigurationError, ConvParams, WeightMatrix


class TestConvParams:
    def test_out_shape_formula_grid(self):
        for k in (1, 2, 3, 5):
            for s in (1, 2, 3):
                for p in (0, 1, 2):
                    for d in (1, 2):
                        h = w = 11
                        span = d * (k - 1) + 1
                        if h + 2 * p < span:
                            continue
                        params = ConvParams(kernel=k, stride=s, padding=p, dilation=d)
                        oh, ow = params.out_shape(h, w)
                        assert oh == (h + 2 * p - d * (k - 1) - 1) // s + 1
                        assert ow == oh

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=0)
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=3, stride=0)
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=3, padding=-1)
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=3, in_channels=0)

    def test_rejects_asymmetric_padding(self):
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=3, padding=(1, 1, 0, 0))

    def test_kernel_does_not_fit(self):
        with pytest.raises(ConfigurationError):
            ConvParams(kernel=5).out_shape(3, 3)


class TestWeightMatrix:
    def test_round_trip_and_row_unrolling(self, rng):
        filters = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
        wm = WeightMatrix.from_filters(filters, np.arange(4, dtype=np.float32))
        assert wm.data.shape == (4, 18)
        # row r is filter r unrolled kr -> kc -> channel
        assert np.array_equal(wm.data[1], filters[:, :, :, 1].ravel())
        assert np.array_equal(wm.to_filters(), filters)

    def test_rejects_mismatched_bias(self):
        with pytest.raises(ConfigurationError):
            WeightMatrix(np.zeros((4, 18)), np.zeros(3), kernel=(3, 3), in_channels=2)


class TestDirectConv:
    def test_single_multiply_add(self):
        params = ConvParams(kernel=1, in_channels=1, out_channels=1)
        out = sc.direct_conv2d(
            np.full((1, 1, 1), 3.0, np.float32),
            np.full((1, 1, 1, 1), 2.0, np.float32),
            np.array([0.5], np.float32),
            params,
        )
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 6.5

    def test_window_sum(self):
        params = ConvParams(kernel=2, in_channels=1, out_channels=1)
        out = sc.direct_conv2d(
            np.ones((3, 3, 1), np.float32), np.ones((2, 2, 1, 1), np.float32), None, params
        )
        assert out.shape == (2, 2, 1)
        assert np.all(out == 4.0)

    def test_matches_scalar_loop_oracle_exactly(self, rng):
        params = ConvParams(kernel=3, stride=1, padding=1, in_channels=3, out_channels=4)
        x = rng.standard_normal((8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        ref = conv2d_loops(x, w, b, params)
        out = sc.direct_conv2d(x, w, b, params)
        assert np.abs(out - ref).max() == 0.0

    def test_two_loop_orderings_agree_on_integers(self, rng):
        params = ConvParams(kernel=3, stride=2, padding=1, in_channels=2, out_channels=3)
        x = rng.integers(-4, 5, size=(7, 7, 2)).astype(np.float32)
        w = rng.integers(-3, 4, size=(3, 3, 2, 3)).astype(np.float32)
        a = sc.direct_conv2d(x, w, None, params)
        b = conv2d_loops_alt(x, w, None, params)
        assert np.array_equal(a, b.astype(np.float32))

    def test_linear_in_input(self, rng):
        params = ConvParams(kernel=3, padding=1, in_channels=2, out_channels=3)
        x = rng.standard_normal((6, 6, 2)).astype(np.float32)
        w = rng.standard_normal((3, 3, 2, 3)).astype(np.float32)
        for alpha in (0.37, -2.5, 11.0):
            lhs = sc.direct_conv2d((alpha * x).astype(np.float32), w, None, params)
            rhs = alpha * sc.direct_conv2d(x, w, None, params)
            denom = np.maximum(np.abs(rhs), 1e-3)
            assert (np.abs(lhs - rhs) / denom).max() <= 1e-6 * 10

    def test_shape_mismatch_rejected(self, rng):
        params = ConvParams(kernel=3, in_channels=2, out_channels=3)
        with pytest.raises(ConfigurationError):
            sc.direct_conv2d(np.zeros((5, 5, 1), np.float32), np.zeros((3, 3, 2, 3), np.float32), None, params)
        with pytest.raises(ConfigurationError):
            sc.direct_conv2d(np.zeros((5, 5, 2), np.float32), np.zeros((3, 3, 1, 3), np.float32), None, params)

    def test_dilation(self, rng):
        params = ConvParams(kernel=3, dilation=2, in_channels=1, out_channels=2)
        x = rng.standard_normal((7, 7, 1)).astype(np.float32)
        w = rng.standard_normal((3, 3, 1, 2)).astype(np.float32)
        assert np.abs(sc.direct_conv2d(x, w, None, params) - conv2d_loops(x, w, None, params)).max() == 0.0

    def test_finite_outputs(self, rng):
        params = ConvParams(kernel=5, stride=2, padding=2, in_channels=3, out_channels=8)
        x = rng.standard_normal((12, 12, 3)).astype(np.float32)
        w = rng.standard_normal((5, 5, 3, 8)).astype(np.float32)
        out = sc.direct_conv2d(x, w, rng.standard_normal(8).astype(np.float32), params)
        assert np.isfinite(out).all()


class TestRelu:
    def test_simple_values(self):
        assert np.array_equal(sc.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_zero_fixed_point(self):
        z = np.zeros((3, 3, 2), np.float32)
        assert np.array_equal(sc.relu(z), z)

    def test_elementwise_contract(self, rng):
        t = rng.standard_normal((5, 4, 3)).astype(np.float32)
        out = sc.relu(t)
        assert (out >= 0).all()
        assert np.array_equal(out[t > 0], t[t > 0])


class TestPool2d:
    def test_avg_block(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(2, 2, 1)
        assert sc.pool2d(t, "avg", 2, 2)[0, 0, 0] == 2.5

    def test_max_block(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(2, 2, 1)
        assert sc.pool2d(t, "max", 2, 2)[0, 0, 0] == 4.0

    def test_avg_matches_block_means(self, rng):
        t = rng.random((4, 4, 3)).astype(np.float32)
        out = sc.pool2d(t, "avg", 2, 2)
        for c in range(3):
            expect = t[:, :, c].reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(2, 2, 4).mean(-1)
            assert np.abs(out[:, :, c] - expect).max() <= 1e-6

    def test_max_matches_loops(self, rng):
        t = rng.standard_normal((7, 7, 2)).astype(np.float32)
        assert np.array_equal(sc.pool2d(t, "max", 3, 2), maxpool_loops(t, 3, 2))

    def test_kernel_too_large(self):
        with pytest.raises(ConfigurationError):
            sc.pool2d(np.zeros((2, 2, 1), np.float32), "max", 3, 1)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            sc.pool2d(np.zeros((2, 2, 1), np.float32), "median", 2, 2)


class TestAddAndFc:
    def test_add_identity_and_negation(self, rng):
        a = rng.standard_normal((3, 3, 2)).astype(np.float32)
        assert np.array_equal(sc.elementwise_add(a, np.zeros_like(a)), a)
        assert np.all(sc.elementwise_add(a, -a) == 0.0)

    def test_add_preserves_shared_zeros(self, rng):
        a = rng.standard_normal((4, 4, 3)).astype(np.float32)
        b = rng.standard_normal((4, 4, 3)).astype(np.float32)
        masked = np.zeros((4, 4), dtype=bool)
        masked[1, 2] = masked[3, 0] = True
        a[masked] = 0.0
        b[masked] = 0.0
        assert np.all(sc.elementwise_add(a, b)[masked] == 0.0)

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            sc.elementwise_add(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))

    def test_fc_identity_and_bias(self, rng):
        x = rng.standard_normal(5).astype(np.float32)
        assert np.array_equal(sc.fully_connected(x, np.eye(5, dtype=np.float32), np.zeros(5, np.float32)), x)
        b = rng.standard_normal(4).astype(np.float32)
        assert np.array_equal(sc.fully_connected(x, np.zeros((4, 5), np.float32), b), b)

    def test_fc_matches_loop_oracle(self, rng):
        x = rng.standard_normal(7).astype(np.float32)
        w = rng.standard_normal((3, 7)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        assert np.abs(sc.fully_connected(x, w, b) - matvec_loops(w, x, b)).max() <= 1e-5

    def test_fc_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            sc.fully_connected(np.zeros(4), np.zeros((3, 5)), np.zeros(3))

    def test_global_avg_pool(self, rng):
        t = rng.standard_normal((5, 6, 4)).astype(np.float32)
        assert np.allclose(sc.global_avg_pool(t), t.reshape(-1, 4).mean(0), atol=1e-6)
