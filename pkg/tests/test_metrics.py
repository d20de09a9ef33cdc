import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from skimage.metrics import structural_similarity

from oracles import shift_mae_brute
from sitsr.core import ConfigError, DomainError, Raster
from sitsr.datapipe import SynthConfig, bicubic_resample, closest_frame, synth_generate
from sitsr.metrics import (
    GAP_BINS,
    EvalConfig,
    MetricsReport,
    RandomConvPyramid,
    ShiftMAEConfig,
    evaluate,
    gap_bin,
    mae,
    perceptual_distance,
    psnr,
    rmse,
    shift_mae,
    ssim,
)

byte_imgs = hnp.arrays(np.float64, (3, 12, 12), elements=st.integers(0, 255).map(float))


def test_mae_rmse_basics(rng):
    a = rng.integers(0, 250, (3, 8, 8)).astype(float)
    assert mae(a, a) == 0 and rmse(a, a) == 0
    assert mae(a + 3, a) == 3 and rmse(a + 3, a) == 3
    b = rng.integers(0, 256, (3, 8, 8)).astype(float)
    assert rmse(a, b) >= mae(a, b)
    with pytest.raises(DomainError):
        mae(a, a[:, :4])


def test_raster_inputs_are_byte_scaled():
    a = Raster(np.zeros((1, 4, 4), np.float32))
    b = Raster(np.full((1, 4, 4), 2.0, np.float32))  # clipped to 1 -> 255
    assert mae(a, b) == 255.0


class TestShiftMAE:
    def test_identity(self, rng):
        a = rng.random((3, 20, 20)) * 255
        assert shift_mae(a, a) == 0

    def test_translated_copy(self, rng):
        big = rng.integers(0, 256, (3, 30, 30)).astype(float)
        hr = big[:, 5:25, 5:25]
        sr = big[:, 5 + 2:25 + 2, 5 - 1:25 - 1]
        assert shift_mae(sr, hr) == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        sr, hr = r.integers(0, 256, (2, 3, 20, 20)).astype(float)
        assert shift_mae(sr, hr) == shift_mae_brute(sr, hr)
        fr, fh = r.random((2, 3, 20, 20)) * 255
        assert shift_mae(fr, fh) == pytest.approx(shift_mae_brute(fr, fh), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(byte_imgs, byte_imgs)
    def test_not_above_aligned_crop(self, sr, hr):
        m = 3
        aligned = float(np.mean(np.abs(sr[:, m:-m, m:-m] - hr[:, m:-m, m:-m])))
        assert shift_mae(sr, hr) <= aligned

    def test_config_and_size_errors(self):
        with pytest.raises(ConfigError):
            ShiftMAEConfig(delta=5)
        with pytest.raises(DomainError):
            shift_mae(np.zeros((1, 6, 6)), np.zeros((1, 6, 6)))
        assert ShiftMAEConfig().margin == 3


class TestPSNR:
    def test_identical_is_inf(self, rng):
        a = rng.random((3, 8, 8))
        assert psnr(a, a) == math.inf

    def test_constant_offset(self, rng):
        a = rng.integers(0, 200, (3, 8, 8)).astype(float)
        assert psnr(a + 16, a) == pytest.approx(10 * math.log10(255**2 / 256))
        assert psnr(a + 16, a) == pytest.approx(24.04840, abs=1e-5)

    def test_monotone_in_noise(self, rng):
        a = rng.random((3, 32, 32)) * 255
        base = rng.normal(size=a.shape)
        vals = [psnr(a + s * base, a) for s in (1, 2, 4, 8)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


class TestSSIM:
    def test_identity(self, rng):
        a = rng.random((3, 16, 16)) * 255
        assert ssim(a, a) == pytest.approx(1.0)

    def test_negative_is_anticorrelated(self, rng):
        a = rng.random((3, 24, 24)) * 255
        assert ssim(a, 255 - a) < 0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_skimage(self, seed):
        r = np.random.default_rng(seed)
        a = r.random((3, 32, 32)) * 255
        b = np.clip(a + r.normal(0, 20, a.shape), 0, 255)
        ref = np.mean([
            structural_similarity(x, y, data_range=255, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False, win_size=11)
            for x, y in zip(a, b)
        ])
        # skimage averages over the full image after cropping (win-1)/2, the valid region
        assert ssim(a, b) == pytest.approx(ref, abs=1e-3)

    def test_too_small(self):
        with pytest.raises(DomainError):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


class TestPerceptual:
    def test_zero_and_symmetric(self, rng):
        a, b = rng.random((2, 3, 32, 32)) * 255
        assert perceptual_distance(a, a) == 0
        assert perceptual_distance(a, b) == pytest.approx(perceptual_distance(b, a), rel=1e-6)

    def test_blur_worse_than_tiny_noise(self, rng):
        from scipy import ndimage

        a = rng.random((3, 32, 32)) * 255
        blurred = ndimage.gaussian_filter(a, (0, 3, 3))
        noisy = a + rng.normal(0, 0.5, a.shape)
        assert perceptual_distance(a, blurred) > perceptual_distance(a, noisy)

    def test_fixed_seed_extractor(self, rng):
        a, b = rng.random((2, 3, 16, 16)) * 255
        e1, e2 = RandomConvPyramid(seed=0), RandomConvPyramid(seed=0)
        assert perceptual_distance(a, b, e1) == perceptual_distance(a, b, e2)


def test_gap_bins_edges():
    assert [gap_bin(g) for g in (0, 9, 10, 30, 31, -12)] == ["<10", "<10", "10-30", "10-30", ">30", "10-30"]


class TestEvaluate:
    DS = synth_generate(SynthConfig(n_samples=12, lr_size=8, series_min=3, series_max=5))

    def test_oracle_model(self):
        rep = evaluate(lambda s: s.hr, self.DS, EvalConfig(perceptual=False))
        assert rep.aggregates["mae"] == 0 and rep.aggregates["ssim"] == pytest.approx(1.0)
        assert sum(rep.strata[b]["count"] for b in GAP_BINS) == 12
        for b in GAP_BINS:
            if rep.strata[b]["count"]:
                assert rep.strata[b]["mae"] == 0

    def test_bicubic_baseline(self):
        def bicubic(s):
            lr = s.lr_series.rasters[closest_frame(s.lr_series)]
            return bicubic_resample(lr, s.scale)

        rep = evaluate(bicubic, self.DS, EvalConfig(perceptual=False))
        assert 0 < rep.aggregates["mae"] < 255 and math.isfinite(rep.aggregates["psnr"])
        assert rep.aggregates["mae"] == pytest.approx(np.mean([r["mae"] for r in rep.per_sample]), abs=1e-9)
        back = MetricsReport.from_dict(rep.to_dict())
        assert back.aggregates == rep.aggregates

    def test_scale_mismatch(self):
        from sitsr.backbones import ModelSpec, build_model

        model = build_model(ModelSpec(kind="highresnet_ltae", scale=2, base_channels=8))
        with pytest.raises(ConfigError):
            evaluate(model, self.DS[:1])

    def test_model_with_series_length(self):
        from sitsr.backbones import ModelSpec, build_model

        model = build_model(ModelSpec(kind="highresnet_ltae", base_channels=8))
        rep = evaluate(model, self.DS[:4], EvalConfig(series_length=2, perceptual=False))
        assert rep.meta["series_length"] == 2 and len(rep.per_sample) == 4
