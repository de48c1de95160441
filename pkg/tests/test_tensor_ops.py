import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fastinst import oracles
from fastinst.tensor_ops import (BLOCKED, attention, bilinear_resize, conv2d, finite_diff_gradcheck, layer_norm,
                                 relative_error, softmax_lastdim)

from conftest import t64


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_lastdim(t64([0, 0, 0])).numpy(), [1 / 3] * 3, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_lastdim(t64([0, math.log(2)])).numpy(), [1 / 3, 2 / 3], atol=1e-15)

    def test_matches_naive(self, rng):
        x = rng.normal(size=4)
        np.testing.assert_allclose(softmax_lastdim(t64(x)).numpy(), oracles.naive_softmax(list(x)), atol=1e-6)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, xs):
        assert abs(float(softmax_lastdim(t64(xs)).sum()) - 1) < 1e-6

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            softmax_lastdim(t64([0.0, float("nan")]))


class TestConv:
    def test_identity_1x1(self, rng):
        x = t64(rng.normal(size=(3, 5, 4)))
        np.testing.assert_array_equal(conv2d(x, torch.eye(3, dtype=torch.float64)[:, :, None, None]).numpy(), x.numpy())

    def test_all_ones_interior(self):
        c = 0.7
        out = conv2d(torch.full((2, 5, 5), c, dtype=torch.float64), torch.ones(1, 2, 3, 3, dtype=torch.float64))
        assert out[0, 2, 2].item() == pytest.approx(9 * c * 2, abs=1e-12)

    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
    def test_matches_nested_loops(self, rng, k, stride):
        x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
        got = conv2d(t64(x), t64(w), t64(b), stride=stride).numpy()
        np.testing.assert_allclose(got, oracles.naive_conv2d(x, w, b, stride, k // 2), atol=1e-6)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(1, 4, 4), torch.zeros(1, 1, 2, 2))


class TestBilinear:
    def test_identity(self, rng):
        x = t64(rng.normal(size=(2, 6, 6)))
        assert torch.equal(bilinear_resize(x, 6, 6), x)

    def test_single_pixel_extends(self):
        out = bilinear_resize(torch.full((1, 1, 1), 2.5, dtype=torch.float64), 4, 3)
        assert torch.all(out == 2.5)

    def test_2x2_to_3x3_center_is_mean(self):
        x = t64([[[1.0, 2.0], [3.0, 7.0]]])
        assert bilinear_resize(x, 3, 3)[0, 1, 1].item() == pytest.approx(13 / 4, abs=1e-12)

    def test_matches_half_pixel_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5))
        np.testing.assert_allclose(bilinear_resize(t64(x), 7, 4).numpy(), oracles.naive_bilinear(x, 7, 4), atol=1e-12)

    def test_round_trip_of_constant_is_exact(self):
        x = torch.full((1, 3, 5), 0.375, dtype=torch.float64)
        assert torch.equal(bilinear_resize(bilinear_resize(x, 6, 10), 3, 5), x)


class TestAttention:
    def test_single_key(self, rng):
        q, k, v = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(1, 4))), t64(rng.normal(size=(1, 4)))
        np.testing.assert_allclose(attention(q, k, v).numpy(), np.repeat(v.numpy(), 3, 0), atol=1e-15)

    def test_one_hot_mask(self, rng):
        q, k, v = (t64(rng.normal(size=s)) for s in ((2, 4), (5, 4), (5, 4)))
        mask = torch.zeros(2, 5, dtype=torch.bool)
        mask[:, 3] = True
        np.testing.assert_allclose(attention(q, k, v, mask).numpy(), np.repeat(v[3:4].numpy(), 2, 0), atol=1e-12)

    def test_matches_naive(self, rng):
        q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        allow = np.array([[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 1, 1]], bool)
        out, w = attention(t64(q), t64(k), t64(v), torch.from_numpy(allow), return_weights=True)
        ref_out, ref_w = oracles.naive_attention(q, k, v, allow)
        np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-6)
        np.testing.assert_allclose(w.numpy(), ref_w, atol=1e-6)

    def test_all_blocked_row_rejected(self):
        mask = torch.tensor([[True, False], [False, False]])
        with pytest.raises(ValueError, match="all-blocked"):
            attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3), mask)

    def test_sentinel_is_finite(self):
        assert BLOCKED == -1e9


def test_layer_norm_zero_mean_unit_var(rng):
    y = layer_norm(t64(rng.normal(3, 2, size=(4, 16))))
    np.testing.assert_allclose(y.mean(-1).numpy(), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1, unbiased=False).numpy(), 1, atol=1e-4)


class TestGradcheck:
    def test_sum_of_squares(self, rng):
        x = t64(rng.normal(size=5)).requires_grad_()
        r = finite_diff_gradcheck(lambda: (x ** 2).sum(), [x])
        assert r.passed and r.max_relative_error < 1e-8 and r.checked == 5

    def test_sum_of_softmax_has_zero_gradient(self, rng):
        x = t64(rng.normal(size=6)).requires_grad_()
        g, = torch.autograd.grad(softmax_lastdim(x).sum(), [x])
        np.testing.assert_allclose(g.numpy(), 0, atol=1e-12)
        assert finite_diff_gradcheck(lambda: softmax_lastdim(x).sum(), [x]).passed

    def test_detects_wrong_gradient(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, a):
                return (a ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(2, dtype=torch.float64)

        r = finite_diff_gradcheck(lambda: Wrong.apply(x), [x])
        assert not r.passed and r.worst_coordinate[0] == 0

    def test_requires_float64(self):
        with pytest.raises(ValueError):
            finite_diff_gradcheck(lambda: torch.zeros(()), [torch.zeros(2)])

    def test_parameters_restored(self, rng):
        x = t64(rng.normal(size=3)).requires_grad_()
        before = x.detach().clone()
        finite_diff_gradcheck(lambda: (x ** 3).sum(), [x])
        assert torch.equal(x.detach(), before)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_differentiable_ops_pass_on_random_shapes(self, seed):
        g = np.random.default_rng(seed)
        x = t64(g.normal(size=(2, 4, 4))).requires_grad_()
        w = t64(g.normal(size=(3, 2, 3, 3))).requires_grad_()
        q = t64(g.normal(size=(3, 4))).requires_grad_()
        mask = torch.from_numpy(g.random((3, 6)) < 0.6)
        mask[:, 0] = True

        def f():
            y = bilinear_resize(conv2d(x, w), 3, 2)  # (3,3,2)
            kv = layer_norm(y.reshape(3, 6).T.reshape(6, 3) @ torch.ones(3, 4, dtype=torch.float64))
            return (attention(q, kv, kv, mask) ** 2).sum() + softmax_lastdim(q).pow(2).sum()

        assert finite_diff_gradcheck(f, [x, w, q]).passed


def test_graph_reuse_accumulates_twice(rng):
    x = t64(rng.normal(size=4)).requires_grad_()
    y = (x ** 2).sum()
    (y + y).backward()
    np.testing.assert_allclose(x.grad.numpy(), 4 * x.detach().numpy())


def test_relative_error_floor():
    assert relative_error(1e-9, 2e-9) == pytest.approx(1e-9)
    assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)
