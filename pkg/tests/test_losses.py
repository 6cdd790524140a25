"""Loss and metric tests with scalar and brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starbrinet import losses as L

from conftest import central_diff, max_rel_err


def scalar_ssl(i, ihat, c, s):
    """Independent scalar evaluation of the single sigmoid loss."""
    si = 1.0 / (1.0 + math.exp(-(i - c) * s))
    sh = 1.0 / (1.0 + math.exp(-(ihat - c) * s))
    return (si - sh) ** 2


def brute_confusion(pred, gt, thr):
    """Per-pixel confusion counting by explicit iteration."""
    h = m = f = n = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        if p >= thr and g >= thr:
            h += 1
        elif p < thr and g >= thr:
            m += 1
        elif p >= thr and g < thr:
            f += 1
        else:
            n += 1
    return h, m, f, n


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        assert L.normalize(70.0) == pytest.approx(1.0)
        assert L.normalize(0.0) == pytest.approx(0.0)
        assert L.normalize(35.0) == pytest.approx(0.5)

    def test_round_trip(self, rng):
        r = rng.uniform(0, 70, size=50)
        np.testing.assert_allclose(L.denormalize(L.normalize(r)), r, rtol=1e-12)

    def test_clamps_with_warning(self):
        with pytest.warns(UserWarning, match="clamped"):
            assert L.normalize(80.0) == pytest.approx(1.0)
        with pytest.warns(UserWarning, match="clamped"):
            assert L.normalize(-5.0) == pytest.approx(0.0)


class TestSingleSigmoidLoss:
    def test_identical_inputs_zero(self, rng):
        x = rng.uniform(0, 1, size=(4, 4))
        loss, grad = L.single_sigmoid_loss(x, x.copy(), 20 / 70, 15.0)
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_scalar_case(self):
        expected = scalar_ssl(0.5, 0.3, 20 / 70, 15.0)
        loss, _ = L.single_sigmoid_loss(np.array(0.5), np.array(0.3), 20 / 70, 15.0)
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.1665, abs=1e-3)

    def test_upper_bound_is_pixel_count(self, rng):
        i = rng.uniform(0, 1, size=(8, 8))
        ih = rng.uniform(0, 1, size=(8, 8))
        loss, _ = L.single_sigmoid_loss(i, ih, 0.5, 50.0)
        assert loss <= i.size

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, size=(5, 5))
        b = rng.uniform(0, 1, size=(5, 5))
        la, _ = L.single_sigmoid_loss(a, b, 30 / 70, 15.0)
        lb, _ = L.single_sigmoid_loss(b, a, 30 / 70, 15.0)
        assert la == pytest.approx(lb, rel=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            L.single_sigmoid_loss(rng.uniform(size=(2, 2)), rng.uniform(size=(3,)), 0.3, 15)


class TestMultiSigmoidLoss:
    def test_identity_zero(self, rng):
        cfg = L.LossConfig()
        x = rng.uniform(0, 1, size=(3, 6, 6))
        loss, grad = L.multi_sigmoid_loss(x, x.copy(), cfg)
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_scalar_sum_matches_oracle(self):
        cfg = L.LossConfig(lambda_mse=0.0)
        expected = sum(scalar_ssl(0.5, 0.3, c, 15.0) for c in cfg.critical_points)
        loss, _ = L.multi_sigmoid_loss(np.array(0.5), np.array(0.3), cfg)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_mse_term(self, rng):
        i = rng.uniform(0, 1, size=(4, 4))
        ih = rng.uniform(0, 1, size=(4, 4))
        base, _ = L.multi_sigmoid_loss(i, ih, L.LossConfig(lambda_mse=0.0))
        both, _ = L.multi_sigmoid_loss(i, ih, L.LossConfig(lambda_mse=2.0))
        assert both == pytest.approx(base + 2.0 * float(((i - ih) ** 2).sum()), rel=1e-12)

    @pytest.mark.parametrize("lambda_mse", [0.0, 1.0])
    def test_gradient_matches_finite_differences(self, lambda_mse):
        rng = np.random.default_rng(99)
        cfg = L.LossConfig(lambda_mse=lambda_mse)
        i = rng.uniform(0, 1, size=(3, 4))
        ih = rng.uniform(0, 1, size=(3, 4))
        _, grad = L.multi_sigmoid_loss(i, ih, cfg)
        num = central_diff(lambda v: L.multi_sigmoid_loss(i, v, cfg)[0], ih)
        assert max_rel_err(grad, num) < 1e-5

    def test_nonnegative_property(self, rng):
        cfg = L.LossConfig()
        for _ in range(20):
            i = rng.uniform(0, 1, size=(4, 4))
            ih = rng.uniform(0, 1, size=(4, 4))
            loss, _ = L.multi_sigmoid_loss(i, ih, cfg)
            assert loss >= 0.0

    def test_monotone_as_forecast_crosses_threshold(self):
        # Fixed target above c; sweeping the forecast downward across c must
        # never decrease the loss.
        cfg = L.LossConfig(critical_points=(20 / 70,), lambda_mse=0.0)
        target = np.array(0.6)
        losses = [L.multi_sigmoid_loss(target, np.array(v), cfg)[0]
                  for v in np.linspace(0.6, 0.0, 100)]
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_empty_points_error(self):
        cfg = L.LossConfig(critical_points=(), lambda_mse=1.0)
        with pytest.raises(ValueError, match="critical point"):
            L.multi_sigmoid_loss(np.zeros(2), np.zeros(2), cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            L.LossConfig(critical_points=(0.5, 0.3))
        with pytest.raises(ValueError, match="strictly in"):
            L.LossConfig(critical_points=(0.0, 0.5))
        with pytest.raises(ValueError, match="scale"):
            L.LossConfig(scale=-1.0)


class TestCsi:
    def test_perfect_forecast(self, rng):
        gt = rng.uniform(0, 1, size=(6, 6))
        gt[0, 0] = 0.9  # ensure at least one positive
        value, counts = L.csi(gt.copy(), gt, 20 / 70)
        assert value == pytest.approx(1.0)
        assert counts.misses == 0 and counts.false_alarms == 0

    def test_two_by_two_dbz_case(self):
        pred = np.array([[25.0, 15.0], [25.0, 25.0]]) / 70.0
        gt = np.array([[25.0, 25.0], [15.0, 25.0]]) / 70.0
        value, counts = L.csi(pred, gt, 20 / 70)
        assert (counts.hits, counts.misses, counts.false_alarms) == (2, 1, 1)
        assert value == pytest.approx(0.5)

    def test_degenerate_undefined(self):
        below = np.full((3, 3), 0.1)
        value, counts = L.csi(below, below.copy(), 20 / 70)
        assert value is None
        assert counts.correct_negatives == 9

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(7)
        thr = 20 / 70
        for _ in range(100):
            pred = rng.uniform(0, 1, size=(8, 8))
            gt = rng.uniform(0, 1, size=(8, 8))
            value, counts = L.csi(pred, gt, thr)
            h, m, f, n = brute_confusion(pred, gt, thr)
            assert (counts.hits, counts.misses, counts.false_alarms,
                    counts.correct_negatives) == (h, m, f, n)
            assert counts.total == 64
            if h + m + f == 0:
                assert value is None
            else:
                assert value == pytest.approx(h / (h + m + f))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16),
           scale=st.floats(0.1, 10.0),
           shift=st.floats(-1.0, 1.0))
    def test_invariant_under_monotone_rescaling(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0, 1, size=(5, 5))
        gt = rng.uniform(0, 1, size=(5, 5))
        thr = 0.4
        v1, c1 = L.csi(pred, gt, thr)
        v2, c2 = L.csi(pred * scale + shift, gt * scale + shift, thr * scale + shift)
        assert (c1.hits, c1.misses, c1.false_alarms) == (c2.hits, c2.misses, c2.false_alarms)
        assert v1 == v2 or (v1 is not None and v2 is not None and v1 == pytest.approx(v2))

    def test_sequence_csi_excludes_undefined(self):
        gt = np.stack([np.full((4, 4), 0.9), np.full((4, 4), 0.1)])
        pred = gt.copy()
        mean, undefined = L.sequence_csi(pred, gt, 20 / 70)
        assert mean == pytest.approx(1.0)
        assert undefined == 1


class TestFrameMse:
    def test_identical_sequences(self, rng):
        x = rng.uniform(size=(5, 6, 6))
        assert L.frame_mse(x, x.copy()) == 0.0

    def test_constant_difference(self):
        # one 10x10 frame offset by 0.1 everywhere: 100 * 0.01 = 1.0
        a = np.zeros((1, 10, 10))
        b = np.full((1, 10, 10), 0.1)
        assert L.frame_mse(a, b) == pytest.approx(1.0)

    def test_symmetry(self, rng):
        a = rng.uniform(size=(3, 5, 5))
        b = rng.uniform(size=(3, 5, 5))
        assert L.frame_mse(a, b) == pytest.approx(L.frame_mse(b, a), rel=1e-15)

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            L.frame_mse(rng.uniform(size=(3, 4, 4)), rng.uniform(size=(2, 4, 4)))
