import numpy as np
import pytest
from numpy.testing import assert_allclose

from lesionseg.autodiff import Tensor, grad_check
from lesionseg.backbone import (
    BackboneConfig,
    BlockFeatures,
    ConfigError,
    backbone_forward,
    block_factors,
    init_params,
)
from lesionseg.mcdf import (
    NonpositiveSigmaError,
    ScoreStack,
    bilinear_kernel,
    classify_upsample,
    consistency_coeff,
    fuse_scores,
    head_params_from,
    init_head_params,
    local_std,
    score_heads,
    sum_fuse,
)


def scalar_fusion_oracle(maps, windows, sigma_sq):
    """Per-pixel loop re-deriving mean, std, weight, and the weighted sum."""
    k_total = len(maps)
    c, h, w = maps[0].shape
    fused = np.zeros((c, h, w))
    for k in range(k_total):
        l = windows[k]
        r = (l - 1) // 2
        padded = np.pad(maps[k], ((0, 0), (r, r), (r, r)), mode="edge")
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    win = padded[ci, i:i + l, j:j + l]
                    mean = win.mean()
                    var = ((win - mean) ** 2).mean()
                    alpha = np.exp(-var / sigma_sq)
                    fused[ci, i, j] += alpha * maps[k][ci, i, j]
    return fused


class TestLocalStd:
    def test_constant_map_zero(self):
        out = local_std(Tensor(np.full((2, 6, 6), 4.2)), 3)
        assert not out.data.any()

    def test_window1_zero(self):
        rng = np.random.default_rng(0)
        out = local_std(Tensor(rng.standard_normal((1, 5, 5))), 1)
        assert not out.data.any()

    def test_hand_derived_center_value(self):
        grid = np.array([[[0.0, 2.0, 0.0], [2.0, 0.0, 2.0], [0.0, 2.0, 0.0]]])
        out = local_std(Tensor(grid), 3)
        vals = grid[0].ravel()
        want = np.sqrt(((vals - vals.mean()) ** 2).mean())
        assert out.data[0, 1, 1] == pytest.approx(want, rel=1e-12)

    def test_matches_deviation_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 8, 8)) * 3
        for l in (3, 5):
            r = (l - 1) // 2
            xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="edge")
            want = np.zeros_like(x)
            for c in range(2):
                for i in range(8):
                    for j in range(8):
                        win = xp[c, i:i + l, j:j + l]
                        want[c, i, j] = np.sqrt(((win - win.mean()) ** 2).mean())
            assert_allclose(local_std(Tensor(x), l).data, want, atol=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        out = local_std(Tensor(rng.standard_normal((3, 7, 7))), 5)
        assert (out.data >= 0).all()


class TestConsistencyCoeff:
    def test_zero_std_gives_one(self):
        out = consistency_coeff(Tensor(np.zeros((1, 4, 4))), 10.0)
        assert np.array_equal(out.data, np.ones((1, 4, 4)))

    def test_paper_operating_point(self):
        out = consistency_coeff(Tensor([[[np.sqrt(10.0)]]]), 10.0)
        assert out.data[0, 0, 0] == pytest.approx(np.exp(-1.0), abs=1e-9)
        assert out.data[0, 0, 0] == pytest.approx(0.367879, abs=1e-6)

    def test_monotone_decay_to_zero(self):
        sig = np.linspace(0, 40, 50).reshape(1, 5, 10)
        out = consistency_coeff(Tensor(sig), 10.0).data.ravel()
        assert (np.diff(out) < 0).all()
        assert out[-1] < 1e-30
        assert (out > 0).all() and (out <= 1).all()

    def test_rejects_nonpositive_sigma_sq(self):
        with pytest.raises(NonpositiveSigmaError):
            consistency_coeff(Tensor(np.zeros((1, 2, 2))), 0.0)


class TestFuseScores:
    def test_single_constant_map_passes_through(self):
        m = Tensor(np.full((2, 6, 6), 1.25))
        out = fuse_scores(ScoreStack([m], (3,), 10.0))
        assert np.array_equal(out.data, m.data)

    def test_huge_sigma_reduces_to_sum(self):
        rng = np.random.default_rng(3)
        maps = [Tensor(rng.standard_normal((2, 8, 8))) for _ in range(3)]
        fused = fuse_scores(ScoreStack(maps, (3, 5, 3), 1e12)).data
        plain = sum_fuse(ScoreStack(maps, (3, 5, 3), 1e12)).data
        assert_allclose(fused, plain, rtol=1e-6, atol=1e-9)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(4):
            k = int(rng.integers(1, 5))
            maps = [rng.standard_normal((2, 8, 8)) * 2 for _ in range(k)]
            windows = tuple(int(w) for w in rng.choice([1, 3, 5], size=k))
            stack = ScoreStack([Tensor(m) for m in maps], windows, 10.0)
            want = scalar_fusion_oracle(maps, windows, 10.0)
            assert_allclose(fuse_scores(stack).data, want, atol=1e-9)

    def test_alpha_one_exactly_on_constant_windows(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((1, 16, 16))
        base[0, 4:13, 4:13] = 0.75  # 9x9 constant patch
        stack = ScoreStack([Tensor(base)], (3,), 10.0)
        fused = fuse_scores(stack).data
        assert np.array_equal(fused[0, 5:12, 5:12], base[0, 5:12, 5:12])

    def test_alpha_in_unit_interval(self):
        rng = np.random.default_rng(6)
        score = Tensor(rng.standard_normal((2, 10, 10)) * 4)
        sig = local_std(score, 5)
        alpha = consistency_coeff(sig, 10.0).data
        assert (alpha > 0).all() and (alpha <= 1).all()

    def test_gradient_through_weights(self):
        rng = np.random.default_rng(7)
        other = Tensor(rng.standard_normal((2, 6, 6)))
        w = Tensor(rng.standard_normal((2, 6, 6)))

        def fusion(t):
            stack = ScoreStack([t, other], (3, 5), 10.0)
            return (fuse_scores(stack) * w).sum()

        err = grad_check(fusion, Tensor(rng.standard_normal((2, 6, 6))))
        assert err < 1e-4

    def test_stop_grad_alpha_changes_gradient(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((1, 6, 6))
        grads = []
        for flag in (False, True):
            t = Tensor(data, requires_grad=True)
            fuse_scores(ScoreStack([t], (3,), 10.0), stop_grad_alpha=flag).sum().backward()
            grads.append(t.grad.copy())
        assert not np.allclose(grads[0], grads[1])

    def test_stop_grad_alpha_same_forward(self):
        rng = np.random.default_rng(9)
        t = Tensor(rng.standard_normal((1, 6, 6)))
        a = fuse_scores(ScoreStack([t], (3,), 10.0), stop_grad_alpha=False).data
        b = fuse_scores(ScoreStack([t], (3,), 10.0), stop_grad_alpha=True).data
        assert np.array_equal(a, b)


class TestSumFuse:
    def test_single_map_identity(self):
        m = Tensor(np.random.default_rng(10).standard_normal((2, 4, 4)))
        assert np.array_equal(sum_fuse(ScoreStack([m], (3,), 10.0)).data, m.data)

    def test_opposite_maps_cancel(self):
        m = np.random.default_rng(11).standard_normal((2, 4, 4))
        stack = ScoreStack([Tensor(m), Tensor(-m)], (3, 3), 10.0)
        assert_allclose(sum_fuse(stack).data, 0.0, atol=1e-15)


class TestScoreStackValidation:
    def test_even_window_rejected(self):
        with pytest.raises(ConfigError):
            ScoreStack([Tensor(np.zeros((2, 8, 8)))], (4,), 10.0)

    def test_oversized_window_rejected(self):
        with pytest.raises(ConfigError):
            ScoreStack([Tensor(np.zeros((2, 8, 8)))], (9,), 10.0)

    def test_window_count_mismatch(self):
        with pytest.raises(ConfigError):
            ScoreStack([Tensor(np.zeros((2, 8, 8)))], (3, 3), 10.0)


DESK = BackboneConfig(channels=(4, 6, 8, 8, 8), strides=(1, 2, 2, 1, 1),
                      reduce_channels=4)


class TestScoreHeads:
    def test_block_heads_full_resolution(self):
        rng = np.random.default_rng(12)
        bb = init_params(DESK, seed=0)
        feats = backbone_forward(Tensor(rng.random((3, 32, 32))), DESK, bb)
        factors = block_factors(DESK)
        hp = init_head_params([4, 6, 8, 8, 8], factors, num_classes=2, seed=1)
        heads = head_params_from(hp, factors)
        stack = score_heads(feats, None, [], heads, (3, 3, 3, 5, 7), 10.0)
        assert len(stack) == 5
        for m in stack.maps:
            assert m.shape == (2, 32, 32)

    def test_k4_heads_from_generic_sources(self):
        rng = np.random.default_rng(13)
        chans = [3, 5, 4, 6]
        factors = [1, 2, 4, 4]
        hp = head_params_from(init_head_params(chans, factors, 2, seed=3), factors)
        maps = []
        for c, f in zip(chans, factors):
            src = Tensor(rng.random((c, 64 // f, 64 // f)))
            maps.append(classify_upsample(src, hp.heads[len(maps)]))
        stack = ScoreStack(maps, (3, 5, 7, 9), 10.0)
        assert len(stack) == 4
        for m in stack.maps:
            assert m.shape == (2, 64, 64)

    def test_zero_features_zero_scores(self):
        bb = init_params(DESK, seed=4)
        feats = backbone_forward(Tensor(np.zeros((3, 32, 32))), DESK, bb)
        factors = block_factors(DESK)
        hp = init_head_params([4, 6, 8, 8, 8], factors, 2, seed=5)
        stack = score_heads(feats, None, [], head_params_from(hp, factors),
                            (3, 3, 3, 5, 7), 10.0)
        for m in stack.maps:
            assert not m.data.any()

    def test_fused_replaces_block5_source(self):
        rng = np.random.default_rng(14)
        bb = init_params(DESK, seed=6)
        feats = backbone_forward(Tensor(rng.random((3, 32, 32))), DESK, bb)
        factors = block_factors(DESK)
        hp = head_params_from(init_head_params([4, 6, 8, 8, 8], factors, 2, seed=7),
                              factors)
        base = score_heads(feats, None, [], hp, (3, 3, 3, 5, 7), 10.0)
        fused = Tensor(rng.random(feats.per_block[4].shape))
        swapped = score_heads(feats, fused, [], hp, (3, 3, 3, 5, 7), 10.0)
        for k in range(4):
            assert np.array_equal(base.maps[k].data, swapped.maps[k].data)
        assert not np.array_equal(base.maps[4].data, swapped.maps[4].data)

    def test_window_count_mismatch_error(self):
        bb = init_params(DESK, seed=8)
        feats = backbone_forward(Tensor(np.zeros((3, 32, 32))), DESK, bb)
        factors = block_factors(DESK)
        hp = head_params_from(init_head_params([4, 6, 8, 8, 8], factors, 2, seed=9),
                              factors)
        with pytest.raises(ConfigError):
            score_heads(feats, None, [], hp, (3, 3, 3), 10.0)

    def test_paper_window_schedule_shape(self):
        # ten heads: blocks 1-3 at window 3, then 5,7 and the five levels 9..17
        windows = (3, 3, 3, 5, 7, 9, 11, 13, 15, 17)
        assert len(windows) == 10
        assert windows[3:] == tuple(range(5, 18, 2))


class TestBilinearKernel:
    def test_factor2_classic_weights(self):
        k = bilinear_kernel(1, 2)
        profile = np.array([0.25, 0.75, 0.75, 0.25])
        assert_allclose(k[0, 0], np.outer(profile, profile))

    def test_upsample_constant_preserved(self):
        # a constant map upsampled bilinearly stays constant away from edges
        from lesionseg.autodiff import ConvParams, conv_transpose2d
        k = Tensor(bilinear_kernel(2, 4))
        p = ConvParams(k, Tensor(np.zeros(2)), stride=4, padding=2)
        out = conv_transpose2d(Tensor(np.full((2, 8, 8), 3.0)), p)
        assert out.shape == (2, 32, 32)
        assert_allclose(out.data[:, 8:24, 8:24], 3.0, rtol=1e-12)
