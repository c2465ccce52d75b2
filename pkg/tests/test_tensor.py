import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msnet import tensor as T
from msnet.errors import EmptyVolumeError, ShapeError
from msnet.gradcheck import check_conv, check_dense, check_maxpool, check_relu
from oracles import central_diff, naive_conv1d, scan_maxpool


def col(values):
    return np.asarray(values, float).reshape(-1, 1)


class TestConvForward:
    def test_identity_kernel(self):
        out = T.conv1d_forward(col([5, -2, 3]), np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out.ravel(), [5, -2, 3])

    def test_bias_broadcast(self, rng):
        w = rng.normal(size=(3, 4, 5))
        out = T.conv1d_forward(np.zeros((9, 4)), w, np.full(5, 0.7), dilation=2)
        np.testing.assert_array_equal(out, np.full((9, 5), 0.7))

    def test_box_filter(self):
        x, w = col([1, 2, 3]), np.ones((3, 1, 1))
        expected = naive_conv1d(x, w, [0.0], 1).ravel()
        np.testing.assert_array_equal(expected, [3, 6, 5])
        np.testing.assert_array_equal(T.conv1d_forward(x, w, np.zeros(1), 1).ravel(), expected)

    def test_dilated_box_filter(self):
        # out[t] = x[t-2] + x[t] + x[t+2]; t=3 reads x[1] + x[3] + 0
        x, w = col([1, 2, 3, 4, 5]), np.ones((3, 1, 1))
        expected = naive_conv1d(x, w, [0.0], 2).ravel()
        np.testing.assert_array_equal(expected, [4, 6, 9, 6, 8])
        np.testing.assert_array_equal(T.conv1d_forward(x, w, np.zeros(1), 2).ravel(), expected)

    @settings(max_examples=60, deadline=None)
    @given(l=st.integers(1, 40), cin=st.integers(1, 4), cout=st.integers(1, 4),
           half_k=st.integers(0, 3), dilation=st.sampled_from([1, 2, 3, 4, 8]),
           seed=st.integers(0, 2**32 - 1))
    def test_matches_naive_oracle(self, l, cin, cout, half_k, dilation, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(l, cin)), r.normal(size=(2 * half_k + 1, cin, cout)), r.normal(size=cout)
        out = T.conv1d_forward(x, w, b, dilation)
        assert out.shape == (l, cout)
        np.testing.assert_allclose(out, naive_conv1d(x, w, b, dilation), rtol=1e-12, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            T.conv1d_forward(np.zeros((4, 2)), np.zeros((2, 2, 1)), np.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv1d_forward(np.zeros((4, 3)), np.zeros((3, 2, 1)), np.zeros(1))

    def test_empty_sequence_rejected(self):
        with pytest.raises(EmptyVolumeError):
            T.conv1d_forward(np.zeros((0, 2)), np.zeros((3, 2, 1)), np.zeros(1))


class TestConvBackward:
    def test_zero_upstream(self, rng):
        x, w = rng.normal(size=(6, 2)), rng.normal(size=(3, 2, 3))
        g = T.conv1d_backward(x, w, 2, np.zeros((6, 3)))
        for arr in g:
            assert not np.any(arr)
        assert g.d_params.size == w.size + 3

    def test_identity_transpose(self, rng):
        G = rng.normal(size=(5, 1))
        g = T.conv1d_backward(rng.normal(size=(5, 1)), np.ones((1, 1, 1)), 1, G)
        np.testing.assert_array_equal(g.d_input, G)

    def test_bias_grad_is_row_sum(self, rng):
        d_out = rng.normal(size=(7, 3))
        g = T.conv1d_backward(rng.normal(size=(7, 2)), rng.normal(size=(3, 2, 3)), 2, d_out)
        np.testing.assert_allclose(g.d_bias, d_out.sum(axis=0))

    def test_small_case_finite_differences(self, rng):
        x, w, b = rng.normal(size=(7, 2)), rng.normal(size=(3, 2, 3)), rng.normal(size=3)
        r = rng.normal(size=(7, 3))
        g = T.conv1d_backward(x, w, 2, r)
        np.testing.assert_allclose(
            g.d_input, central_diff(lambda z: np.sum(T.conv1d_forward(z, w, b, 2) * r), x), rtol=1e-6)
        np.testing.assert_allclose(
            g.d_weight, central_diff(lambda z: np.sum(T.conv1d_forward(x, z, b, 2) * r), w), rtol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv1d_backward(np.zeros((5, 2)), np.zeros((3, 2, 3)), 1, np.zeros((4, 3)))

    @pytest.mark.parametrize("l", [1, 2, 31, 100])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_gradcheck_grid(self, l, dilation):
        res = check_conv(np.random.default_rng(l * 10 + dilation), l, 2, 3, 3, dilation)
        assert res.passed, res


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(T.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_backward_zero_convention(self):
        np.testing.assert_array_equal(
            T.relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0])), [0, 0, 5])

    def test_gradcheck(self, rng):
        assert check_relu(rng, 31, 3).passed


class TestMaxPool:
    def test_constant_sequence(self):
        x = np.tile([1.5, -2.0, 0.25], (17, 1))
        vals, idx = T.global_maxpool_forward(x)
        np.testing.assert_array_equal(vals, [1.5, -2.0, 0.25])
        np.testing.assert_array_equal(idx, [0, 0, 0])

    def test_single_row(self):
        vals, idx = T.global_maxpool_forward(np.array([[3.0, -1.0]]))
        np.testing.assert_array_equal(vals, [3.0, -1.0])
        np.testing.assert_array_equal(idx, [0, 0])

    def test_first_index_tie_break(self):
        x = np.array([[1.0, 9.0], [4.0, 2.0], [4.0, 7.0]])
        ovals, oidx = scan_maxpool(x)
        vals, idx = T.global_maxpool_forward(x)
        np.testing.assert_array_equal(vals, [4, 9])
        np.testing.assert_array_equal(idx, [1, 0])
        np.testing.assert_array_equal(vals, ovals)
        np.testing.assert_array_equal(idx, oidx)

    def test_empty_rejected(self):
        with pytest.raises(EmptyVolumeError):
            T.global_maxpool_forward(np.zeros((0, 3)))

    def test_backward_routing(self):
        np.testing.assert_array_equal(T.global_maxpool_backward([1], np.array([2.0]), 3), [[0], [2], [0]])
        assert not np.any(T.global_maxpool_backward([0, 2], np.zeros(2), 3))

    def test_backward_index_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            T.global_maxpool_backward([3], np.array([1.0]), 3)

    def test_gradcheck(self, rng):
        assert check_maxpool(rng, 31, 4).passed

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_row_permutation_invariance(self, l, c, seed):
        r = np.random.default_rng(seed)
        x = r.integers(-3, 4, size=(l, c)).astype(float)
        vals, _ = T.global_maxpool_forward(x)
        pvals, _ = T.global_maxpool_forward(x[r.permutation(l)])
        np.testing.assert_array_equal(vals, pvals)


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=4)
        np.testing.assert_array_equal(T.dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_zero_input_gives_bias(self, rng):
        b = rng.normal(size=3)
        np.testing.assert_array_equal(T.dense_forward(np.zeros(5), rng.normal(size=(5, 3)), b), b)

    def test_gradcheck(self, rng):
        assert check_dense(rng, 5, 4).passed

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense_forward(np.zeros(4), np.zeros((5, 3)), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 3), st.sampled_from([1, 2, 4, 8]))
def test_conv_preserves_length(l, half_k, dilation):
    out = T.conv1d_forward(np.ones((l, 2)), np.ones((2 * half_k + 1, 2, 3)), np.zeros(3), dilation)
    assert out.shape == (l, 3)


def test_stack_stays_finite(rng):
    h = rng.normal(size=(50, 4)) * 100
    for d in (1, 2, 4, 8):
        h = h + T.conv1d_forward(T.relu_forward(T.conv1d_forward(h, rng.normal(size=(3, 4, 4)),
                                                                 np.zeros(4), d)),
                                 rng.normal(size=(1, 4, 4)), np.zeros(4), 1)
    v, _ = T.global_maxpool_forward(h)
    assert np.all(np.isfinite(T.dense_forward(v, rng.normal(size=(4, 3)), np.zeros(3))))
