"""Factorized pointwise convolution and receptive-range tests."""

import numpy as np
import pytest

from falconnet import (BnParams, ChannelPattern, RefCOBranch, SFConvSpec, SFConvWeights,
                       ShapeError, admissible_kernel_sizes, choose_kernel_size,
                       random_refco_branches, receptive_range, refco_forward,
                       sfconv_forward, sfconv_param_count)


def random_valid_spec(rng, c_max=64):
    """Rejection-sample a valid spec with random admissible kernel size."""
    while True:
        c_in = int(rng.integers(1, c_max + 1))
        reduction = int(rng.choice([1, 2, 4]))
        mult = int(rng.choice([1, 2, 3, 4, 6]))
        c_out = c_in * mult
        sizes = admissible_kernel_sizes(c_in, c_out, reduction)
        if sizes:
            return SFConvSpec(c_in, c_out, int(rng.choice(sizes)), reduction)


class TestKernelSizeChoice:
    def test_expand_case(self):
        assert choose_kernel_size(64, 384, 2) == 32
        costs = {k: 64 * k // 2 + 384 * 64 // k for k in admissible_kernel_sizes(64, 384, 2)}
        assert costs[32] == 1792 and costs[16] == 2048 and costs[64] == 2432

    def test_tie_breaks_to_smaller(self):
        assert choose_kernel_size(4, 4, 2) == 2
        assert sfconv_param_count(SFConvSpec(4, 4, 2, 2)) == 12
        assert sfconv_param_count(SFConvSpec(4, 4, 4, 2)) == 12

    def test_no_admissible_size(self):
        with pytest.raises(ValueError, match="no admissible"):
            choose_kernel_size(3, 6, 2)

    def test_optimal_over_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c_in = int(rng.integers(1, 129))
            c_out = int(rng.integers(1, 129)) * int(rng.choice([1, 2, 4]))
            r = int(rng.choice([1, 2, 3, 4]))
            sizes = admissible_kernel_sizes(c_in, c_out, r)
            if not sizes:
                continue
            best = choose_kernel_size(c_in, c_out, r)
            cost = lambda k: c_in * k // r + c_out * c_in // k
            assert all(cost(best) <= cost(k) for k in sizes)
            assert all(best <= k for k in sizes if cost(k) == cost(best))


class TestParamCount:
    def test_expand_example(self):
        spec = SFConvSpec(64, 384, 32, 2)
        assert sfconv_param_count(spec) == 1024 + 768 == 1792

    def test_degenerate_single_window(self):
        # One window (C == K) and one hidden channel (R == K).
        spec = SFConvSpec(8, 5, 8, 8)
        assert sfconv_param_count(spec) == 8 + 5

    def test_ratio_close_to_continuous_bound(self):
        spec = SFConvSpec(64, 384, 32, 2)
        dense = 64 * 384
        ratio = sfconv_param_count(spec) / dense
        bound = 2.0 / np.sqrt(6 * 64 * 2)
        assert ratio == pytest.approx(0.07292, abs=1e-4)
        assert bound == pytest.approx(0.07217, abs=1e-4)
        assert abs(ratio - bound) < 0.002

    def test_counted_elements_match_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            spec = random_valid_spec(rng, c_max=256)
            w1 = np.zeros((spec.hidden_channels, spec.windows, spec.kernel), np.float32)
            w2 = np.zeros((spec.c_out, spec.windows), np.float32)
            assert w1.size + w2.size == sfconv_param_count(spec)


def ones_weights(spec):
    return SFConvWeights(spec,
                         np.ones((spec.hidden_channels, spec.windows, spec.kernel), np.float32),
                         np.ones((spec.c_out, spec.windows), np.float32))


class TestSFConvForward:
    def test_all_ones_gives_c_in(self):
        spec = SFConvSpec(16, 24, 4, 2)
        x = np.ones((1, 16, 2, 2), np.float32)
        out = sfconv_forward(x, spec, ones_weights(spec))
        np.testing.assert_array_equal(out, np.full((1, 24, 2, 2), 16.0, np.float32))

    def test_zero_second_stage_zeroes_output(self):
        spec = SFConvSpec(8, 8, 4, 2)
        rng = np.random.default_rng(2)
        w = SFConvWeights(spec, rng.standard_normal((2, 2, 4)).astype(np.float32),
                          np.zeros((8, 2), np.float32))
        x = rng.standard_normal((1, 8, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(sfconv_forward(x, spec, w), np.zeros((1, 8, 3, 3)))

    def test_zeroing_one_window_changes_outputs_linearly(self):
        spec = SFConvSpec(12, 12, 4, 2)
        rng = np.random.default_rng(3)
        w = SFConvWeights(spec, rng.standard_normal((2, 3, 4)).astype(np.float32),
                          rng.standard_normal((12, 3)).astype(np.float32))
        x = rng.standard_normal((1, 12, 2, 2)).astype(np.float32)
        full = sfconv_forward(x, spec, w)
        masked = x.copy()
        masked[:, 4:8] = 0.0  # window p=1
        part = sfconv_forward(masked, spec, w)
        only = x.copy()
        only[:, :4] = 0.0
        only[:, 8:] = 0.0
        np.testing.assert_allclose(full - part, sfconv_forward(only, spec, w), atol=1e-5)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        spec = random_valid_spec(rng)
        w = SFConvWeights(spec,
                          rng.standard_normal((spec.hidden_channels, spec.windows,
                                               spec.kernel)).astype(np.float32),
                          rng.standard_normal((spec.c_out, spec.windows)).astype(np.float32))
        x = rng.standard_normal((1, spec.c_in, 3, 3)).astype(np.float32)
        y = rng.standard_normal((1, spec.c_in, 3, 3)).astype(np.float32)
        a, b = 1.3, -0.7
        lhs = sfconv_forward(a * x + b * y, spec, w)
        rhs = a * sfconv_forward(x, spec, w) + b * sfconv_forward(y, spec, w)
        np.testing.assert_allclose(lhs, rhs, atol=1e-4)

    def test_pixelwise_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        spec = SFConvSpec(8, 16, 4, 2)
        w = SFConvWeights(spec, rng.standard_normal((2, 2, 4)).astype(np.float32),
                          rng.standard_normal((16, 2)).astype(np.float32))
        x = rng.standard_normal((1, 8, 2, 3)).astype(np.float32)
        out = sfconv_forward(x, spec, w)
        flat = x.reshape(1, 8, 6)
        perm = rng.permutation(6)
        xp = flat[:, :, perm].reshape(1, 8, 2, 3)
        outp = sfconv_forward(xp, spec, w)
        np.testing.assert_allclose(outp.reshape(1, 16, 6),
                                   out.reshape(1, 16, 6)[:, :, perm], atol=1e-5)

    def test_channel_mismatch_error(self):
        spec = SFConvSpec(8, 8, 4, 2)
        with pytest.raises(ShapeError, match="channels"):
            sfconv_forward(np.zeros((1, 6, 2, 2), np.float32), spec, ones_weights(spec))


class TestRefCO:
    def test_degenerate_single_branches_equal_sfconv(self):
        # C/K == K == 1 forces C == 1 and one branch per stage.
        spec = SFConvSpec(1, 3, 1, 1)
        rng = np.random.default_rng(6)
        b1, b2 = random_refco_branches(spec, rng)
        b1 = (RefCOBranch(b1[0].weight, BnParams.identity(spec.hidden_channels)),)
        b2 = (RefCOBranch(b2[0].weight, BnParams.identity(spec.c_out)),)
        x = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        fused = SFConvWeights(spec, b1[0].weight, b2[0].weight)
        np.testing.assert_allclose(refco_forward(x, spec, b1, b2),
                                   sfconv_forward(x, spec, fused), atol=1e-6)

    def test_duplicated_stage1_branch_doubles_output(self):
        spec = SFConvSpec(8, 8, 4, 2)
        rng = np.random.default_rng(7)
        w1 = rng.standard_normal((2, 2, 4)).astype(np.float32)
        id1 = BnParams.identity(2)
        stage2 = tuple(RefCOBranch(rng.standard_normal((8, 2)).astype(np.float32),
                                   BnParams.identity(8)) for _ in range(4))
        x = rng.standard_normal((1, 8, 3, 3)).astype(np.float32)
        half = np.zeros((2, 2, 4), np.float32)
        single = refco_forward(x, spec, (RefCOBranch(w1, id1), RefCOBranch(half, id1)),
                               stage2)
        double = refco_forward(x, spec, (RefCOBranch(w1, id1), RefCOBranch(w1, id1)),
                               stage2)
        np.testing.assert_allclose(double, 2 * single, atol=1e-4)

    def test_zero_branch_with_identity_bn_contributes_nothing(self):
        spec = SFConvSpec(8, 16, 4, 2)
        rng = np.random.default_rng(8)
        b1, b2 = random_refco_branches(spec, rng)
        x = rng.standard_normal((1, 8, 2, 2)).astype(np.float32)
        base = refco_forward(x, spec, b1, b2)
        zeroed = b2[:-1] + (RefCOBranch(np.zeros((16, 2), np.float32),
                                        BnParams.identity(16)),)
        muted = b2[:-1] + (RefCOBranch(b2[-1].weight, b2[-1].bn),)
        np.testing.assert_allclose(refco_forward(x, spec, b1, muted), base, atol=0)
        without_last = refco_forward(x, spec, b1, zeroed)
        manual = base - _branch_output(x, spec, b1, b2[-1])
        np.testing.assert_allclose(without_last, manual, atol=1e-5)

    def test_branch_count_is_strict(self):
        spec = SFConvSpec(8, 8, 4, 2)
        rng = np.random.default_rng(9)
        b1, b2 = random_refco_branches(spec, rng)
        with pytest.raises(ShapeError, match="stage 1"):
            refco_forward(np.zeros((1, 8, 2, 2), np.float32), spec, b1[:-1], b2)
        with pytest.raises(ShapeError, match="stage 2"):
            refco_forward(np.zeros((1, 8, 2, 2), np.float32), spec, b1, b2 + b2[:1])


def _branch_output(x, spec, branches1, stage2_branch):
    """Stage-2 contribution of one branch given the shared fused hidden map."""
    from falconnet.channel import _split_windows, _stage1, _stage2
    from falconnet.ops import batch_norm_infer

    xw = _split_windows(np.asarray(x, np.float32), spec)
    hidden = None
    for br in branches1:
        y = _stage1(xw, br.weight)
        s, t = br.bn.scale_shift()
        y = y * s[None, :, None, None, None] + t[None, :, None, None, None]
        hidden = y if hidden is None else hidden + y
    return batch_norm_infer(_stage2(hidden, stage2_branch.weight, spec), stage2_branch.bn)


class TestReceptiveRange:
    def test_dense_full(self):
        np.testing.assert_array_equal(receptive_range(ChannelPattern.dense(8)),
                                      np.full(8, 8))

    def test_group(self):
        np.testing.assert_array_equal(receptive_range(ChannelPattern.group(8, 4)),
                                      np.full(8, 2))

    def test_channel_wise(self):
        np.testing.assert_array_equal(
            receptive_range(ChannelPattern.channel_wise(8, 3)), np.full(8, 3))

    def test_sf_full_range(self):
        spec = SFConvSpec(16, 16, 4, 2)
        np.testing.assert_array_equal(receptive_range(ChannelPattern.sf(spec)),
                                      np.full(16, 16))

    def test_pattern_validation(self):
        with pytest.raises(ShapeError):
            ChannelPattern.group(8, 3)
        with pytest.raises(ShapeError):
            ChannelPattern.channel_wise(8, 9)
        with pytest.raises(ShapeError):
            ChannelPattern("sf", 8, 8)
