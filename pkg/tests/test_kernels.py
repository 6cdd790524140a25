"""Kernel-level tests: forward oracles and finite-difference gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starbrinet import kernels as K

from conftest import central_diff, max_rel_err


def conv2d_loops(x, w, b, stride, padding):
    """Independent nested-loop cross-correlation oracle."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co] if b is not None else 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[ni, co, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        out, _ = K.conv2d(x, w, np.zeros(1), stride=1, padding=0)
        np.testing.assert_array_equal(out, x)

    def test_all_ones_3x3(self):
        # 3x3 ones against 3x3 ones, pad 1: center sums all nine inputs,
        # corners see only a 2x2 patch.
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out, _ = K.conv2d(x, w, np.zeros(1), stride=1, padding=1)
        expected = conv2d_loops(x, w, np.zeros(1), 1, 1)
        np.testing.assert_allclose(out, expected)
        assert out[0, 0, 1, 1] == pytest.approx(9.0)
        assert out[0, 0, 0, 0] == pytest.approx(4.0)

    def test_stride2_downsample_shape(self, rng):
        x = rng.normal(size=(1, 1, 100, 100)).astype(np.float32)
        w = rng.normal(size=(64, 1, 4, 4)).astype(np.float32)
        out, _ = K.conv2d(x, w, np.zeros(64, np.float32), stride=2, padding=1)
        assert out.shape == (1, 64, 50, 50)

    @pytest.mark.parametrize("shape,cout,k,stride,pad", [
        ((2, 3, 5, 5), 4, 3, 1, 1),
        ((1, 2, 6, 7), 3, 3, 2, 1),
        ((2, 1, 4, 4), 2, 4, 2, 1),
        ((1, 4, 5, 3), 2, 1, 1, 0),
        ((3, 2, 7, 6), 5, 3, 3, 2),
    ])
    def test_forward_matches_loop_oracle(self, rng, shape, cout, k, stride, pad):
        x = rng.normal(size=shape)
        w = rng.normal(size=(cout, shape[1], k, k))
        b = rng.normal(size=cout)
        out, _ = K.conv2d(x, w, b, stride=stride, padding=pad)
        np.testing.assert_allclose(out, conv2d_loops(x, w, b, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(2, 3, 3, 3))  # fixed weighting -> scalar objective
        stride, pad = 2, 1

        out, ctx = K.conv2d(x, w, b, stride, pad)
        assert out.shape == r.shape
        gx, gw, gb = K.conv2d_backward(ctx, r)

        def loss_x(xv):
            return float((K.conv2d(xv, w, b, stride, pad)[0] * r).sum())

        def loss_w(wv):
            return float((K.conv2d(x, wv, b, stride, pad)[0] * r).sum())

        def loss_b(bv):
            return float((K.conv2d(x, w, bv, stride, pad)[0] * r).sum())

        assert max_rel_err(gx, central_diff(loss_x, x)) < 1e-4
        assert max_rel_err(gw, central_diff(loss_w, w)) < 1e-4
        assert max_rel_err(gb, central_diff(loss_b, b)) < 1e-4

    def test_shape_errors(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        with pytest.raises(ValueError, match="channels"):
            K.conv2d(x, rng.normal(size=(3, 1, 3, 3)), np.zeros(3), 1, 1)
        with pytest.raises(ValueError, match="bias"):
            K.conv2d(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(4), 1, 1)
        with pytest.raises(ValueError, match="kernel"):
            K.conv2d(x, rng.normal(size=(3, 2, 7, 7)), np.zeros(3), 1, 0)

    def test_nonfinite_detection_toggle(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        x[0, 0, 0, 0] = np.nan
        w = np.ones((1, 1, 1, 1))
        out, _ = K.conv2d(x, w, np.zeros(1))  # silent with checks off
        assert np.isnan(out).any()
        K.set_debug_finite_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                K.conv2d(x, w, np.zeros(1))
        finally:
            K.set_debug_finite_checks(False)

    def test_multi_shares_unfold(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w1 = rng.normal(size=(4, 3, 3, 3))
        w2 = rng.normal(size=(2, 3, 3, 3))
        b1, b2 = rng.normal(size=4), rng.normal(size=2)
        (o1, o2), ctx = K.conv2d_multi(x, [(w1, b1), (w2, b2)], 1, 1)
        np.testing.assert_allclose(o1, K.conv2d(x, w1, b1, 1, 1)[0])
        np.testing.assert_allclose(o2, K.conv2d(x, w2, b2, 1, 1)[0])
        g1 = rng.normal(size=o1.shape)
        g2 = rng.normal(size=o2.shape)
        gx, grads = K.conv2d_multi_backward(ctx, [g1, g2])
        gx1, gw1, gb1 = K.conv2d_backward(K.conv2d(x, w1, b1, 1, 1)[1], g1)
        gx2, gw2, gb2 = K.conv2d_backward(K.conv2d(x, w2, b2, 1, 1)[1], g2)
        np.testing.assert_allclose(gx, gx1 + gx2, atol=1e-12)
        np.testing.assert_allclose(grads[0][0], gw1, atol=1e-12)
        np.testing.assert_allclose(grads[1][1], gb2, atol=1e-12)


class TestConvTranspose2d:
    def test_upsample_shape(self, rng):
        x = rng.normal(size=(1, 64, 25, 25)).astype(np.float32)
        w = rng.normal(size=(64, 8, 4, 4)).astype(np.float32)
        out, _ = K.conv_transpose2d(x, w, np.zeros(8, np.float32), stride=2, padding=1)
        assert out.shape == (1, 8, 50, 50)

    def test_identity(self):
        x = np.array([[[[3.25]]]])
        w = np.ones((1, 1, 1, 1))
        out, _ = K.conv_transpose2d(x, w, np.zeros(1), stride=1, padding=0)
        np.testing.assert_array_equal(out, x)

    def test_agrees_with_conv_grad_input(self, rng):
        # conv_transpose2d(y, w) must equal the input gradient of conv2d with
        # the same kernel when y plays the role of the output gradient.
        y = rng.normal(size=(1, 2, 3, 3))
        w_conv = rng.normal(size=(2, 4, 3, 3))  # conv: 4 -> 2 channels
        stride, pad = 2, 1
        h_in = (3 - 1) * stride - 2 * pad + 3
        x_probe = rng.normal(size=(1, 4, h_in, h_in))
        out, ctx = K.conv2d(x_probe, w_conv, None, stride, pad)
        assert out.shape == y.shape
        gx_ref, _, _ = K.conv2d_backward(ctx, y)
        out_t, _ = K.conv_transpose2d(y, w_conv, None, stride, pad)
        np.testing.assert_allclose(out_t, gx_ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(2, 3, 3, 4))
        w = rng.normal(size=(3, 2, 4, 4))
        b = rng.normal(size=2)
        stride, pad = 2, 1
        out, ctx = K.conv_transpose2d(x, w, b, stride, pad)
        r = rng.normal(size=out.shape)
        gx, gw, gb = K.conv_transpose2d_backward(ctx, r)

        assert max_rel_err(gx, central_diff(
            lambda v: float((K.conv_transpose2d(v, w, b, stride, pad)[0] * r).sum()), x)) < 1e-4
        assert max_rel_err(gw, central_diff(
            lambda v: float((K.conv_transpose2d(x, v, b, stride, pad)[0] * r).sum()), w)) < 1e-4
        assert max_rel_err(gb, central_diff(
            lambda v: float((K.conv_transpose2d(x, w, v, stride, pad)[0] * r).sum()), b)) < 1e-4

    def test_inverts_conv_shape_map(self, rng):
        for (h, k, s, p) in [(9, 3, 2, 1), (8, 4, 2, 1), (5, 3, 1, 1), (7, 5, 3, 2)]:
            x = rng.normal(size=(1, 2, h, h))
            wd = rng.normal(size=(3, 2, k, k))
            down, _ = K.conv2d(x, wd, None, s, p)
            wu = rng.normal(size=(3, 2, k, k))
            up, _ = K.conv_transpose2d(down, wu, None, s, p)
            assert up.shape[2] == (down.shape[2] - 1) * s - 2 * p + k

    @pytest.mark.parametrize("k,s,p", [(3, 2, 1), (1, 2, 0), (5, 3, 2)])
    def test_backward_fd_with_uneven_phase_extents(self, k, s, p):
        # kernels whose taps split unevenly across output phases exercise the
        # multi-group decomposition (and, for k < s, all-zero phases)
        rng = np.random.default_rng(777 + k)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 3, k, k))
        b = rng.normal(size=3)
        out, ctx = K.conv_transpose2d(x, w, b, s, p)
        r = rng.normal(size=out.shape)
        gx, gw, gb = K.conv_transpose2d_backward(ctx, r)

        assert max_rel_err(gx, central_diff(
            lambda v: float((K.conv_transpose2d(v, w, b, s, p)[0] * r).sum()), x)) < 1e-4
        assert max_rel_err(gw, central_diff(
            lambda v: float((K.conv_transpose2d(x, v, b, s, p)[0] * r).sum()), w)) < 1e-4
        assert max_rel_err(gb, central_diff(
            lambda v: float((K.conv_transpose2d(x, w, v, s, p)[0] * r).sum()), b)) < 1e-4

    def test_zero_stuffed_rows_for_small_kernel(self, rng):
        # kernel 1, stride 2: odd output rows/cols receive no kernel taps
        x = rng.normal(size=(1, 1, 3, 3))
        w = np.full((1, 1, 1, 1), 2.0)
        out, _ = K.conv_transpose2d(x, w, None, 2, 0)
        assert out.shape == (1, 1, 5, 5)
        np.testing.assert_array_equal(out[0, 0, ::2, ::2], 2.0 * x[0, 0])
        assert np.all(out[0, 0, 1::2, :] == 0)
        assert np.all(out[0, 0, :, 1::2] == 0)


class TestGroupNorm:
    def test_constant_input_normalizes_to_beta(self):
        x = np.full((2, 4, 3, 3), 5.0)
        out, _ = K.group_norm(x, 2, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, 0.0, atol=1e-6)
        out2, _ = K.group_norm(x, 2, np.ones(4), np.full(4, 0.7))
        np.testing.assert_allclose(out2, 0.7, atol=1e-6)

    def test_statistics_of_normalized_output(self, rng):
        # Recompute statistics from the output with an independent routine.
        x = rng.normal(loc=2.0, scale=3.0, size=(2, 64, 5, 5))
        gamma, beta = np.ones(64), np.zeros(64)
        out, _ = K.group_norm(x, 4, gamma, beta)
        for n in range(2):
            for g in range(4):
                chunk = out[n, g * 16:(g + 1) * 16]
                vals = [chunk[c, i, j] for c in range(16) for i in range(5) for j in range(5)]
                m = sum(vals) / len(vals)
                v = sum((u - m) ** 2 for u in vals) / len(vals)
                assert abs(m) < 1e-10
                assert abs(v - 1.0) < 1e-4

    def test_affine_applies_per_channel(self, rng):
        x = rng.normal(size=(1, 4, 4, 4))
        gamma = np.array([1.0, 2.0, 3.0, 4.0])
        beta = np.array([0.5, -0.5, 0.0, 1.0])
        out, _ = K.group_norm(x, 2, gamma, beta)
        base, _ = K.group_norm(x, 2, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, base * gamma[:, None, None] + beta[:, None, None])

    def test_divisibility_error(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            K.group_norm(rng.normal(size=(1, 3, 2, 2)), 2, np.ones(3), np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.normal(size=(2, 6, 3, 4))
        gamma = rng.normal(size=6)
        beta = rng.normal(size=6)
        out, ctx = K.group_norm(x, 3, gamma, beta)
        r = rng.normal(size=out.shape)
        gx, gg, gb = K.group_norm_backward(ctx, r)

        assert max_rel_err(gx, central_diff(
            lambda v: float((K.group_norm(v, 3, gamma, beta)[0] * r).sum()), x)) < 1e-4
        assert max_rel_err(gg, central_diff(
            lambda v: float((K.group_norm(x, 3, v, beta)[0] * r).sum()), gamma)) < 1e-4
        assert max_rel_err(gb, central_diff(
            lambda v: float((K.group_norm(x, 3, gamma, v)[0] * r).sum()), beta)) < 1e-4

    def test_groups_for_rule(self):
        assert K.groups_for(64, 16) == 4
        assert K.groups_for(96, 16) == 6
        assert K.groups_for(6, 16) == 1  # non-divisible falls back to one group


class TestElementwise:
    def test_sigmoid_at_zero(self):
        out, _ = K.elementwise("sigmoid", np.zeros((2, 3)))
        np.testing.assert_allclose(out, 0.5)

    def test_tanh_at_zero(self):
        out, _ = K.elementwise("tanh", np.zeros((4,)))
        np.testing.assert_allclose(out, 0.0)

    def test_hadamard_annihilator(self, rng):
        a = rng.normal(size=(2, 2))
        out, _ = K.elementwise("hadamard", a, np.zeros_like(a))
        np.testing.assert_array_equal(out, 0.0)

    def test_sigmoid_saturation_is_finite(self):
        out, _ = K.sigmoid(np.array([-1e4, 1e4], dtype=np.float32))
        np.testing.assert_allclose(out, [0.0, 1.0])
        assert np.isfinite(out).all()

    def test_binary_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            K.elementwise("add", rng.normal(size=(2, 2)), rng.normal(size=(2, 3)))

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "add", "hadamard"])
    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, kind, seed):
        rng = np.random.default_rng(300 + seed)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) if kind in ("add", "hadamard") else None
        out, ctx = K.elementwise(kind, a, b)
        r = rng.normal(size=out.shape)
        grads = K.elementwise_backward(ctx, r)
        if b is None:
            ga = grads
            assert max_rel_err(ga, central_diff(
                lambda v: float((K.elementwise(kind, v)[0] * r).sum()), a)) < 1e-4
        else:
            ga, gb = grads
            assert max_rel_err(ga, central_diff(
                lambda v: float((K.elementwise(kind, v, b)[0] * r).sum()), a)) < 1e-4
            assert max_rel_err(gb, central_diff(
                lambda v: float((K.elementwise(kind, a, v)[0] * r).sum()), b)) < 1e-4


class TestConcatSplit:
    def test_concat_shape(self, rng):
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(1, 2, 3, 3))
        out, _ = K.concat_channels([a, b])
        assert out.shape == (1, 4, 3, 3)

    def test_round_trip_bit_exact(self, rng):
        a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        b = rng.normal(size=(2, 5, 4, 4)).astype(np.float32)
        out, _ = K.concat_channels([a, b])
        ra, rb = K.split_channels(out, [3, 5])
        np.testing.assert_array_equal(ra, a)
        np.testing.assert_array_equal(rb, b)

    def test_concat_backward_routes_slices(self, rng):
        a = rng.normal(size=(1, 2, 2, 2))
        b = rng.normal(size=(1, 3, 2, 2))
        out, ctx = K.concat_channels([a, b])
        r = rng.normal(size=out.shape)
        ga, gb = K.concat_channels_backward(ctx, r)

        assert max_rel_err(ga, central_diff(
            lambda v: float((K.concat_channels([v, b])[0] * r).sum()), a)) < 1e-6
        assert max_rel_err(gb, central_diff(
            lambda v: float((K.concat_channels([a, v])[0] * r).sum()), b)) < 1e-6
        ones = np.ones_like(out)
        ga1, gb1 = K.concat_channels_backward(ctx, ones)
        np.testing.assert_array_equal(ga1, np.ones_like(a))
        np.testing.assert_array_equal(gb1, np.ones_like(b))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="disagree"):
            K.concat_channels([rng.normal(size=(1, 2, 3, 3)),
                               rng.normal(size=(1, 2, 4, 4))])
        with pytest.raises(ValueError, match="sum"):
            K.split_channels(rng.normal(size=(1, 4, 2, 2)), [3, 3])

    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(1, 5), min_size=1, max_size=4),
           seed=st.integers(0, 2 ** 16))
    def test_split_concat_identity_property(self, sizes, seed):
        rng = np.random.default_rng(seed)
        parts = [rng.normal(size=(2, s, 3, 3)).astype(np.float32) for s in sizes]
        out, _ = K.concat_channels(parts)
        back = K.split_channels(out, sizes)
        for p, q in zip(parts, back):
            np.testing.assert_array_equal(p, q)
