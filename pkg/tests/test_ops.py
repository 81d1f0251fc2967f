"""Candidate op and stereo-operation tests with brute-force oracles."""

import numpy as np
import pytest

from stereonas.errors import ConfigError, EvaluationError, ShapeError
from stereonas.ops import (
    CandidateOpKind,
    OP_BY_NAME,
    OP_NAMES,
    apply_candidate,
    avg_downsample,
    correlation1d,
    epe,
    make_op,
    multiscale_epe,
    warp_horizontal,
)
from stereonas.tensor import Tape, backward, grad_check, mul, sum_all, tensor

from oracles import brute_correlation

ALL_KINDS = list(CandidateOpKind)
CONV_KINDS = [
    CandidateOpKind.SEP_CONV3,
    CandidateOpKind.SEP_CONV5,
    CandidateOpKind.DIL_CONV3,
    CandidateOpKind.DIL_CONV5,
]


class TestCandidateOps:
    def test_exactly_eight_kinds(self):
        assert len(ALL_KINDS) == 8
        assert len(set(OP_NAMES.values())) == 8
        assert OP_BY_NAME["zero"] == CandidateOpKind.ZERO

    def test_zero_output(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.normal(size=(2, 3, 4, 6)))
        out = apply_candidate(make_op(CandidateOpKind.ZERO, 3), x)
        assert out.shape == (2, 3, 4, 6)
        assert not out.data.any()
        strided = apply_candidate(make_op(CandidateOpKind.ZERO, 3, stride=2), x)
        assert strided.shape == (2, 3, 2, 3)
        assert not strided.data.any()

    def test_skip_identity(self):
        x = tensor(np.random.default_rng(1).normal(size=(1, 2, 4, 4)))
        out = apply_candidate(make_op(CandidateOpKind.SKIP, 2), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_skip_stride2_subsamples(self):
        x = np.arange(64.0).reshape(1, 1, 8, 8)
        out = apply_candidate(make_op(CandidateOpKind.SKIP, 1, stride=2), tensor(x))
        np.testing.assert_array_equal(out.data, x[:, :, ::2, ::2])

    def test_skip_and_zero_carry_no_weights(self):
        for kind in (CandidateOpKind.ZERO, CandidateOpKind.SKIP):
            assert make_op(kind, 4, stride=2).params() == []

    @pytest.mark.parametrize("kind", ALL_KINDS[2:])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_shapes(self, kind, stride):
        rng = np.random.default_rng(7)
        op = make_op(kind, 4, stride=stride, rng=rng)
        x = tensor(rng.normal(size=(1, 4, 6, 8)))
        out = apply_candidate(op, x)
        expect = (1, 4, 6 // stride, 8 // stride)
        assert out.shape == expect, kind.name

    @pytest.mark.parametrize("kind", CONV_KINDS)
    def test_conv_kind_gradients(self, kind):
        rng = np.random.default_rng(int(kind))
        op = make_op(kind, 2, stride=1, rng=rng)

        def f(t):
            y = apply_candidate(op, t)
            return sum_all(mul(y, y))

        x = rng.normal(size=(1, 2, 5, 5)) + 0.3
        assert grad_check(f, tensor(x)) < 1e-5

    def test_weight_gradients_flow(self):
        rng = np.random.default_rng(3)
        op = make_op(CandidateOpKind.SEP_CONV3, 2, rng=rng)
        x = tensor(rng.normal(size=(1, 2, 4, 4)))
        with Tape() as tape:
            loss = sum_all(mul(apply_candidate(op, x), apply_candidate(op, x)))
        grads = backward(tape, loss)
        assert len(op.params()) == 4
        for w in op.params():
            assert w in grads and np.any(grads[w] != 0)

    def test_affine_flag_adds_params(self):
        rng = np.random.default_rng(4)
        plain = make_op(CandidateOpKind.DIL_CONV3, 3, rng=rng, affine=False)
        affine = make_op(CandidateOpKind.DIL_CONV3, 3, rng=np.random.default_rng(4), affine=True)
        assert len(affine.params()) == len(plain.params()) + 2
        # identity-initialized affine leaves the forward pass unchanged
        x = tensor(np.random.default_rng(5).normal(size=(1, 3, 4, 4)))
        np.testing.assert_allclose(
            apply_candidate(plain, x).data, apply_candidate(affine, x).data, atol=1e-12
        )

    def test_channel_mismatch_raises(self):
        op = make_op(CandidateOpKind.SKIP, 3)
        with pytest.raises(ShapeError):
            apply_candidate(op, tensor(np.zeros((1, 2, 4, 4))))


class TestCorrelation1d:
    def test_self_correlation_channel0(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 4, 6))
        out = correlation1d(tensor(x), tensor(x), max_disp=3).data
        np.testing.assert_allclose(out[:, 0], (x * x).mean(axis=1), atol=1e-12)

    def test_self_correlation_maximal_for_unit_features(self):
        # constant-norm feature vectors: Cauchy-Schwarz makes the d=0 match
        # strictly dominate every displaced match
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 4, 3, 7))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        out = correlation1d(tensor(x), tensor(x), max_disp=3).data
        assert np.all(out[:, 0, :, 3:] >= out[:, 1:, :, 3:].max(axis=1) - 1e-12)

    def test_shifted_input_peaks_at_shift(self):
        rng = np.random.default_rng(1)
        k = 2
        left = rng.normal(size=(1, 4, 3, 10))
        right = np.zeros_like(left)
        right[:, :, :, :-k] = left[:, :, :, k:]  # right is left shifted by k
        out = correlation1d(tensor(left), tensor(right), max_disp=4).data
        self_corr = (left * left).mean(axis=1)
        np.testing.assert_allclose(out[0, k, :, k:-k], self_corr[0, :, k:-k], atol=1e-12)

    def test_zero_inputs(self):
        z = tensor(np.zeros((1, 2, 3, 5)))
        assert not correlation1d(z, z, 2).data.any()

    def test_against_brute_force(self):
        rng = np.random.default_rng(2)
        left = rng.normal(size=(2, 4, 4, 8))
        right = rng.normal(size=(2, 4, 4, 8))
        got = correlation1d(tensor(left), tensor(right), max_disp=5).data
        np.testing.assert_allclose(got, brute_correlation(left, right, 5), atol=1e-12)

    def test_max_disp_bound(self):
        z = tensor(np.zeros((1, 1, 2, 4)))
        with pytest.raises(ConfigError):
            correlation1d(z, z, 4)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        other = tensor(rng.normal(size=(1, 2, 3, 6)))

        def f_left(t):
            return sum_all(mul(correlation1d(t, other, 2), correlation1d(t, other, 2)))

        def f_right(t):
            return sum_all(mul(correlation1d(other, t, 2), correlation1d(other, t, 2)))

        x = rng.normal(size=(1, 2, 3, 6))
        assert grad_check(f_left, tensor(x.copy())) < 1e-5
        assert grad_check(f_right, tensor(x.copy())) < 1e-5


class TestWarpHorizontal:
    def test_zero_disparity_identity(self):
        img = np.random.default_rng(0).normal(size=(2, 3, 4, 7))
        out = warp_horizontal(tensor(img), tensor(np.zeros((2, 1, 4, 7))))
        np.testing.assert_array_equal(out.data, img)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_integer_shift(self, k):
        img = np.random.default_rng(k).normal(size=(1, 2, 3, 8))
        disp = tensor(np.full((1, 1, 3, 8), float(k)))
        out = warp_horizontal(tensor(img), disp).data
        np.testing.assert_allclose(out[:, :, :, k:], img[:, :, :, :-k], atol=1e-12)
        assert not out[:, :, :, :k].any()

    def test_fractional_shift_interpolates(self):
        ramp = np.arange(8.0).reshape(1, 1, 1, 8)
        out = warp_horizontal(tensor(ramp), tensor(np.full((1, 1, 1, 8), 0.5))).data
        # interior samples sit halfway between neighbors
        np.testing.assert_allclose(out[0, 0, 0, 1:], np.arange(8.0)[1:] - 0.5, atol=1e-12)

    def test_disparity_gradient(self):
        rng = np.random.default_rng(4)
        img = tensor(rng.normal(size=(1, 2, 3, 9)))

        def f(d):
            y = warp_horizontal(img, d)
            return sum_all(mul(y, y))

        # keep disparities strictly fractional so floor() is smooth locally
        d0 = rng.uniform(0.2, 0.8, size=(1, 1, 3, 9)) + rng.integers(0, 3, size=(1, 1, 3, 9))
        assert grad_check(f, tensor(d0), eps=1e-6) < 1e-4

    def test_image_gradient(self):
        rng = np.random.default_rng(5)
        disp = tensor(rng.uniform(0.2, 2.8, size=(1, 1, 3, 9)))

        def f(t):
            y = warp_horizontal(t, disp)
            return sum_all(mul(y, y))

        assert grad_check(f, tensor(rng.normal(size=(1, 2, 3, 9)))) < 1e-5

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            warp_horizontal(tensor(np.zeros((1, 1, 4, 4))), tensor(np.zeros((1, 1, 4, 5))))


class TestEpe:
    def test_perfect_prediction(self):
        x = tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)))
        assert epe(x, x).item() == 0.0

    def test_offset_by_one(self):
        gt = tensor(np.random.default_rng(1).normal(size=(2, 1, 3, 5)))
        pred = tensor(gt.data + 1.0)
        assert epe(pred, gt).item() == pytest.approx(1.0)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(2)
        pred = rng.normal(size=(1, 1, 4, 6))
        gt = rng.normal(size=(1, 1, 4, 6))
        mask = (rng.random((1, 1, 4, 6)) > 0.3).astype(float)
        got = epe(tensor(pred), tensor(gt), tensor(mask)).item()
        acc, cnt = 0.0, 0
        for i in range(4):
            for j in range(6):
                if mask[0, 0, i, j]:
                    acc += abs(pred[0, 0, i, j] - gt[0, 0, i, j])
                    cnt += 1
        assert got == pytest.approx(acc / cnt, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = tensor(rng.normal(size=(1, 1, 3, 3)))
            b = tensor(rng.normal(size=(1, 1, 3, 3)))
            assert epe(a, b).item() >= 0.0

    def test_empty_mask_raises(self):
        x = tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(EvaluationError):
            epe(x, x, tensor(np.zeros((1, 1, 2, 2))))

    def test_gradient(self):
        rng = np.random.default_rng(6)
        gt = tensor(rng.normal(size=(1, 1, 4, 4)))
        x = rng.normal(size=(1, 1, 4, 4)) + 5.0  # keep |pred-gt| off zero
        assert grad_check(lambda t: epe(t, gt), tensor(x)) < 1e-5


class TestMultiscaleEpe:
    def test_single_scale_equals_epe(self):
        rng = np.random.default_rng(0)
        pred = tensor(rng.normal(size=(1, 1, 4, 8)))
        gt = tensor(rng.normal(size=(1, 1, 4, 8)))
        assert multiscale_epe([(pred, 1)], gt, [1.0]).item() == pytest.approx(
            epe(pred, gt).item(), abs=1e-14)

    def test_perfect_predictions_zero(self):
        gt_arr = np.random.default_rng(1).normal(size=(1, 1, 4, 8))
        gt = tensor(gt_arr)
        preds = []
        for scale in (1, 2):
            down = gt_arr.reshape(1, 1, 4 // scale, scale, 8 // scale, scale).mean(axis=(3, 5))
            preds.append((tensor(down / scale), scale))
        assert multiscale_epe(preds, gt, [1.0, 1.0]).item() == pytest.approx(0.0, abs=1e-14)

    def test_two_scales_vs_loop_oracle(self):
        rng = np.random.default_rng(2)
        gt_arr = rng.normal(size=(1, 1, 4, 4))
        p1 = rng.normal(size=(1, 1, 4, 4))
        p2 = rng.normal(size=(1, 1, 2, 2))
        got = multiscale_epe(
            [(tensor(p1), 1), (tensor(p2), 2)], tensor(gt_arr), [1.0, 0.5]
        ).item()
        e1 = np.abs(p1 - gt_arr).mean()
        gt2 = gt_arr.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5)) / 2.0
        e2 = np.abs(p2 - gt2).mean()
        assert got == pytest.approx(e1 + 0.5 * e2, abs=1e-12)

    def test_mismatched_scale_raises(self):
        gt = tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ConfigError):
            multiscale_epe([(tensor(np.zeros((1, 1, 4, 4))), 2)], gt, [1.0])

    def test_avg_downsample_block_mean(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = avg_downsample(tensor(x), 2).data
        np.testing.assert_allclose(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])
