"""Tensor engine: forward semantics and reverse-mode gradients.

Every backward rule is compared against an independent central-difference
oracle on float64 inputs.
"""

import numpy as np
import pytest

from helpers import fd_grad
from matchflow.numerics import (
    Tensor,
    absolute,
    attention,
    bilinear_sample,
    concat,
    conv2d,
    extract_windows,
    gather_flat,
    layer_norm,
    linear,
    log_clamped,
    no_grad,
    pad_hw,
    relu,
    sample_volumes,
    sigmoid,
    softmax,
    tanh,
    upsample_bilinear,
)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _check_op(build, leaves, atol=1e-7, rtol=1e-5):
    """Run build(*leaves).sum().backward() and compare with finite differences."""
    out = build(*leaves)
    loss = out.sum()
    loss.backward()

    def scalar(*arrays):
        with no_grad():
            ts = [Tensor(a) for a in arrays]
            return float(build(*ts).sum().data)

    numeric = fd_grad(scalar, [l.data for l in leaves])
    for leaf, num in zip(leaves, numeric):
        np.testing.assert_allclose(leaf.grad, num, atol=atol, rtol=rtol)


class TestArithmetic:
    def test_broadcast_add_backward(self):
        """Gradients of broadcasted operands are summed back to their shape."""
        rng = np.random.default_rng(0)
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4)
        _check_op(lambda x, y: x + y, [a, b])
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == (4,)

    def test_mul_matmul_chain(self):
        rng = np.random.default_rng(1)
        a = _leaf(rng, 2, 5)
        b = _leaf(rng, 5, 3)
        _check_op(lambda x, y: (x @ y) * 2.5, [a, b])

    def test_batched_matmul(self):
        rng = np.random.default_rng(2)
        a = _leaf(rng, 4, 2, 5)
        b = _leaf(rng, 4, 5, 3)
        _check_op(lambda x, y: x @ y, [a, b])

    def test_grad_accumulates_across_uses(self):
        """A tensor used twice receives the sum of both path gradients."""
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = (x * 2.0 + x * 5.0).sum()
        y.backward()
        assert x.grad[0] == pytest.approx(7.0)

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        with pytest.raises(ValueError):
            y.backward()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()


class TestShapes:
    def test_reshape_transpose_getitem(self):
        rng = np.random.default_rng(3)
        a = _leaf(rng, 2, 3, 4)
        _check_op(lambda x: x.reshape(6, 4).transpose(1, 0)[1:3, ::2], [a])

    def test_concat_and_pad(self):
        rng = np.random.default_rng(4)
        a = _leaf(rng, 2, 3, 3)
        b = _leaf(rng, 1, 3, 3)
        _check_op(lambda x, y: pad_hw(concat([x, y], axis=0), ((1, 0), (2, 1))), [a, b])

    def test_mean_axis(self):
        rng = np.random.default_rng(5)
        a = _leaf(rng, 3, 5)
        _check_op(lambda x: x.mean(axis=1).sum(), [a])


class TestNonlinearities:
    @pytest.mark.parametrize("op", [relu, sigmoid, tanh, absolute])
    def test_elementwise_gradients(self, op):
        rng = np.random.default_rng(6)
        # keep values away from relu/abs kinks
        a = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.2,
                   requires_grad=True)
        _check_op(op, [a])

    def test_sigmoid_extremes_finite(self):
        y = sigmoid(Tensor(np.array([-500.0, 0.0, 500.0])))
        assert np.all(np.isfinite(y.data))
        assert y.data[0] == pytest.approx(0.0)
        assert y.data[2] == pytest.approx(1.0)

    def test_log_clamped_floor(self):
        """Below the floor the value flattens and the gradient vanishes."""
        x = Tensor(np.array([1e-20, 0.5]), requires_grad=True)
        y = log_clamped(x, 1e-12)
        assert y.data[0] == pytest.approx(np.log(1e-12))
        y.sum().backward()
        assert x.grad[0] == 0.0
        assert x.grad[1] == pytest.approx(2.0)


class TestSoftmax:
    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.standard_normal((5, 7)) * rng.uniform(0.5, 30)
            y = softmax(Tensor(x), axis=1).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
            y2 = softmax(Tensor(x + 123.0), axis=1).data
            np.testing.assert_allclose(y, y2, atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        a = _leaf(rng, 3, 6)
        _check_op(lambda x: softmax(x, axis=1) * np.arange(6.0), [a])

    def test_extreme_logits_stay_finite(self):
        y = softmax(Tensor(np.array([[1e4, -1e4, 0.0]])), axis=1)
        assert np.all(np.isfinite(y.data))
        assert y.data[0, 0] == pytest.approx(1.0)


class TestLayerNorm:
    def test_normalizes_last_axis(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((10, 8)) * 5 + 3
        y = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_gradient_all_inputs(self):
        rng = np.random.default_rng(10)
        x = _leaf(rng, 4, 6)
        g = _leaf(rng, 6)
        b = _leaf(rng, 6)
        _check_op(lambda *t: layer_norm(*t), [x, g, b], atol=1e-6)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="gain/bias"):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestLinear:
    def test_matches_numpy(self):
        rng = np.random.default_rng(11)
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        y = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(y, x @ w.T + b, atol=1e-12)

    def test_gradient_with_leading_dims(self):
        rng = np.random.default_rng(12)
        x = _leaf(rng, 2, 5, 4)
        w = _leaf(rng, 3, 4)
        b = _leaf(rng, 3)
        _check_op(linear, [x, w, b])

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError, match="does not match"):
            linear(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 4))), Tensor(np.zeros(3)))


class TestConv2d:
    @staticmethod
    def _conv_loops(x, w, stride, padding):
        """Brute-force cross-correlation, the independent oracle."""
        c_out, c_in, k, _ = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        H = (xp.shape[1] - k) // stride + 1
        W = (xp.shape[2] - k) // stride + 1
        out = np.zeros((c_out, H, W))
        for co in range(c_out):
            for i in range(H):
                for j in range(W):
                    patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[co, i, j] = (patch * w[co]).sum()
        return out

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7)])
    def test_matches_loop_oracle(self, stride, padding, k):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 9, 8))
        w = rng.standard_normal((4, 3, k, k))
        got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        want = self._conv_loops(x, w, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-10)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 3)])
    def test_gradient(self, stride, padding):
        rng = np.random.default_rng(14)
        x = _leaf(rng, 2, 6, 7)
        w = _leaf(rng, 3, 2, 3, 3)
        _check_op(lambda a, b: conv2d(a, b, stride=stride, padding=padding), [x, w])

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((4, 3, 3, 3))))

    def test_linearity_in_input(self):
        rng = np.random.default_rng(15)
        x1, x2 = rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 6, 6))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        lhs = conv2d(Tensor(2 * x1 + 3 * x2), w, padding=1).data
        rhs = 2 * conv2d(Tensor(x1), w, padding=1).data + 3 * conv2d(Tensor(x2), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestExtractWindows:
    def test_window_contents(self):
        """Each window holds the padded neighborhood of its anchor, row-major."""
        x = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
        win = extract_windows(Tensor(x), k=3, stride=2, padding=1).data
        assert win.shape == (2, 2, 3, 3, 2)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(
                    win[i, j], xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3].transpose(1, 2, 0))

    def test_gradient(self):
        rng = np.random.default_rng(16)
        x = _leaf(rng, 2, 5, 5)
        w = np.arange(2 * 2 * 3 * 3 * 2, dtype=np.float64).reshape(2, 2, 3, 3, 2)
        _check_op(lambda a: extract_windows(a, k=3, stride=2, padding=0) * w, [x])


class TestGather:
    def test_forward_and_scatter_backward(self):
        rng = np.random.default_rng(17)
        a = _leaf(rng, 3, 4)
        idx = np.array([[0, 5, 5], [11, 0, 3]])
        out = gather_flat(a, idx)
        np.testing.assert_array_equal(out.data, a.data.reshape(-1)[idx])
        out.sum().backward()
        # index 0 and 5 each appear twice
        expect = np.zeros(12)
        for i in idx.reshape(-1):
            expect[i] += 1
        np.testing.assert_array_equal(a.grad.reshape(-1), expect)


class TestBilinearSample:
    def test_integer_coords_exact(self):
        rng = np.random.default_rng(18)
        grid = rng.standard_normal((3, 5, 6))
        coords = np.array([[0, 0], [2, 3], [4, 5]], dtype=np.float64)
        out = bilinear_sample(Tensor(grid), coords).data
        for n, (r, c) in enumerate(coords.astype(int)):
            np.testing.assert_allclose(out[n], grid[:, r, c], atol=1e-12)

    def test_outside_is_exactly_zero(self):
        grid = np.ones((4, 4))
        coords = np.array([[-0.001, 2.0], [2.0, 3.001], [-5, -5], [3.0, 3.0]])
        out = bilinear_sample(Tensor(grid), coords).data
        np.testing.assert_array_equal(out[:3], 0.0)
        assert out[3] == 1.0

    def test_interpolates_linearly(self):
        grid = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = bilinear_sample(Tensor(grid), np.array([[1.5, 2.25]])).data
        assert out[0] == pytest.approx(0.5 * (4 * 1 + 2.25) + 0.5 * (4 * 2 + 2.25))

    def test_gradient_wrt_volume_and_coords(self):
        rng = np.random.default_rng(19)
        vol = _leaf(rng, 2, 5, 5)
        # non-integer interior coords: bilinear is smooth there
        coords = Tensor(rng.uniform(0.3, 3.7, size=(2, 4, 2)), requires_grad=True)
        weights = rng.standard_normal((2, 4))
        _check_op(lambda v, c: sample_volumes(v, c) * weights, [vol, coords])

    def test_outside_coords_get_zero_gradient(self):
        vol = Tensor(np.ones((1, 4, 4)), requires_grad=True)
        coords = Tensor(np.array([[[7.0, 7.0], [1.5, 1.5]]]), requires_grad=True)
        sample_volumes(vol, coords).sum().backward()
        np.testing.assert_array_equal(coords.grad[0, 0], 0.0)


class TestUpsample:
    def test_constant_field_is_preserved(self):
        x = Tensor(np.full((2, 3, 4), 7.5))
        y = upsample_bilinear(x, 8)
        assert y.shape == (2, 24, 32)
        np.testing.assert_allclose(y.data, 7.5, atol=1e-6)

    def test_gradient_is_linear_map(self):
        rng = np.random.default_rng(20)
        x = _leaf(rng, 1, 3, 3)
        w = rng.standard_normal((1, 6, 6))
        _check_op(lambda a: upsample_bilinear(a, 2) * w, [x])


class TestAttention:
    def test_uniform_when_logits_equal(self):
        """Identical keys give the average of the values."""
        q = Tensor(np.zeros((2, 3)))
        k = Tensor(np.ones((5, 3)))
        v = Tensor(np.arange(5.0)[:, None] * np.ones((5, 2)))
        out = attention(q, k, v).data
        np.testing.assert_allclose(out, 2.0, atol=1e-6)

    def test_strong_bias_selects_one_value(self):
        rng = np.random.default_rng(21)
        q = Tensor(np.zeros((1, 4)))
        k = Tensor(np.zeros((6, 4)))
        v = Tensor(rng.standard_normal((6, 3)))
        bias = np.zeros((1, 6))
        bias[0, 2] = 20.0
        out = attention(q, k, v, bias=Tensor(bias)).data
        np.testing.assert_allclose(out[0], v.data[2], atol=1e-6)

    def test_masked_keys_have_exactly_zero_weight(self):
        """Extreme masked values must not leak into the output at all."""
        rng = np.random.default_rng(22)
        q = Tensor(rng.standard_normal((3, 4)))
        k = Tensor(rng.standard_normal((5, 4)))
        v1 = rng.standard_normal((5, 2))
        v2 = v1.copy()
        v2[[1, 3]] = 1e12
        mask = np.array([True, False, True, False, True])
        out1 = attention(q, k, Tensor(v1), mask=mask).data
        out2 = attention(q, k, Tensor(v2), mask=mask).data
        np.testing.assert_array_equal(out1, out2)

    def test_all_masked_query_raises(self):
        q = Tensor(np.zeros((2, 3)))
        k = Tensor(np.zeros((4, 3)))
        v = Tensor(np.zeros((4, 3)))
        with pytest.raises(ValueError, match="all keys masked"):
            attention(q, k, v, mask=np.zeros(4, dtype=bool))

    def test_convex_hull_property(self):
        """Outputs are convex combinations: bounded by value extremes per channel."""
        rng = np.random.default_rng(23)
        for trial in range(10):
            q = Tensor(rng.standard_normal((4, 1)) * 3)
            k = Tensor(rng.standard_normal((7, 1)) * 3)
            v = Tensor(rng.standard_normal((7, 2)))
            mask = rng.uniform(size=7) > 0.3
            if not mask.any():
                mask[0] = True
            out = attention(q, k, v, mask=mask).data
            lo, hi = v.data[mask].min(axis=0), v.data[mask].max(axis=0)
            assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(24)
        q = _leaf(rng, 3, 4)
        k = _leaf(rng, 5, 4)
        v = _leaf(rng, 5, 2)
        b = _leaf(rng, 3, 5)
        mask = np.array([True, True, False, True, True])
        _check_op(lambda *t: attention(*t, mask=mask), [q, k, v, b])
