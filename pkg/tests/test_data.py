import numpy as np
import pytest
from numpy.testing import assert_allclose

from lesionseg.autodiff import Tensor
from lesionseg.backbone import ConfigError
from lesionseg.data import (
    DatasetError,
    Sample,
    SynthConfig,
    gen_synthetic,
    load_dataset,
    read_manifest,
    resize_bilinear,
    resize_nearest,
    split_dataset,
    write_image,
    write_manifest,
    write_mask,
    write_sample,
)


class TestSynthConfig:
    def test_rejects_bad_fraction_range(self):
        with pytest.raises(ConfigError):
            SynthConfig(lesion_fraction=(0.4, 0.1))
        with pytest.raises(ConfigError):
            SynthConfig(lesion_fraction=(0.0, 0.5))


class TestGenerator:
    def test_bit_identical_for_same_seed(self):
        cfg = SynthConfig(count=6, size=48, seed=21)
        a, b = gen_synthetic(cfg), gen_synthetic(cfg)
        for s1, s2 in zip(a, b):
            assert s1.id == s2.id
            assert np.array_equal(s1.image.data, s2.image.data)
            assert np.array_equal(s1.mask.data, s2.mask.data)

    def test_different_seeds_differ(self):
        a = gen_synthetic(SynthConfig(count=2, size=48, seed=1))
        b = gen_synthetic(SynthConfig(count=2, size=48, seed=2))
        assert not np.array_equal(a[0].image.data, b[0].image.data)

    def test_lesion_fraction_within_range(self):
        cfg = SynthConfig(count=30, size=64, seed=3, lesion_fraction=(0.05, 0.4))
        tol = 1.0 / cfg.size  # one pixel row of slack
        for s in gen_synthetic(cfg):
            frac = s.mask.data.mean()
            assert 0.05 - tol <= frac <= 0.4 + tol, (s.id, frac)

    def test_masks_binary_images_in_unit_range(self):
        for s in gen_synthetic(SynthConfig(count=8, size=48, seed=4, hair_prob=1.0)):
            assert np.isin(s.mask.data, (0.0, 1.0)).all()
            assert s.image.data.min() >= 0.0 and s.image.data.max() <= 1.0
            assert s.image.shape[0] == 3 and s.mask.shape[0] == 1

    def test_zero_contrast_hides_lesion(self):
        cfg = SynthConfig(count=10, size=64, seed=5, contrast=(0.0, 0.0),
                          noise_std=0.02, hair_prob=0.0)
        gaps = []
        for s in gen_synthetic(cfg):
            mask = s.mask.data[0].astype(bool)
            inside = s.image.data[:, mask].mean()
            outside = s.image.data[:, ~mask].mean()
            gaps.append(abs(inside - outside))
        # no lesion-dependent term remains, only illumination drift and noise
        assert float(np.mean(gaps)) < 0.02

    def test_lesion_darker_than_surround_at_normal_contrast(self):
        cfg = SynthConfig(count=6, size=64, seed=6, contrast=(0.3, 0.5),
                          noise_std=0.01, hair_prob=0.0)
        for s in gen_synthetic(cfg):
            mask = s.mask.data[0].astype(bool)
            assert s.image.data[:, mask].mean() < s.image.data[:, ~mask].mean()


class TestResizers:
    def test_bilinear_identity(self):
        x = np.random.default_rng(0).random((3, 9, 7))
        assert np.array_equal(resize_bilinear(x, 9, 7), x)

    def test_bilinear_constant_preserved(self):
        out = resize_bilinear(np.full((1, 8, 8), 0.4), 13, 11)
        assert_allclose(out, 0.4, rtol=1e-12)

    def test_nearest_keeps_values(self):
        x = (np.random.default_rng(1).random((1, 6, 6)) > 0.5).astype(float)
        out = resize_nearest(x, 9, 9)
        assert np.isin(out, (0.0, 1.0)).all()

    def test_downscale_upscale_shapes(self):
        x = np.random.default_rng(2).random((3, 16, 16))
        assert resize_bilinear(x, 8, 8).shape == (3, 8, 8)
        assert resize_nearest(x, 24, 24).shape == (3, 24, 24)


class TestFileIO:
    def test_ppm_image_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        img = rng.random((3, 10, 12))
        path = tmp_path / "img.ppm"
        write_image(img, path)
        samples_dir = tmp_path / "set"
        (samples_dir / "images").mkdir(parents=True)
        (samples_dir / "masks").mkdir(parents=True)
        write_image(img, samples_dir / "images" / "x.ppm")
        write_mask(np.zeros((1, 10, 12)), samples_dir / "masks" / "x.pgm")
        loaded = load_dataset(samples_dir, size=12)
        assert len(loaded) == 1

    def test_mask_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        mask = (rng.random((1, 16, 16)) > 0.5).astype(float)
        path = tmp_path / "m.pgm"
        write_mask(mask, path)
        from lesionseg.data import _read_pnm
        raw = _read_pnm(path)
        assert np.array_equal((raw >= 128).astype(float), mask[0])

    def test_all_zero_mask_decodes_to_zero(self, tmp_path):
        path = tmp_path / "z.pgm"
        write_mask(np.zeros((1, 8, 8)), path)
        from lesionseg.data import _read_pnm
        assert not _read_pnm(path).any()

    def test_quantization_clamps_extremes(self, tmp_path):
        img = np.full((3, 4, 4), 1.5)
        img[1] = -0.2
        path = tmp_path / "c.ppm"
        write_image(img, path)
        from lesionseg.data import _read_pnm
        raw = _read_pnm(path)
        assert raw[..., 0].max() == 255 and raw[..., 1].max() == 0

    def test_synthetic_roundtrip(self, tmp_path):
        samples = gen_synthetic(SynthConfig(count=4, size=32, seed=9))
        for s in samples:
            write_sample(s, tmp_path)
        loaded = load_dataset(tmp_path, size=32)
        assert len(loaded) == 4
        for orig, got in zip(samples, loaded):
            assert orig.id == got.id
            assert np.array_equal(orig.mask.data, got.mask.data)
            assert np.abs(orig.image.data - got.image.data).max() <= 1.0 / 255 + 1e-12

    def test_png_roundtrip(self, tmp_path):
        pytest.importorskip("PIL")
        samples = gen_synthetic(SynthConfig(count=2, size=32, seed=10))
        for s in samples:
            write_sample(s, tmp_path, fmt="png")
        loaded = load_dataset(tmp_path, size=32)
        assert len(loaded) == 2
        for orig, got in zip(samples, loaded):
            assert np.array_equal(orig.mask.data, got.mask.data)


class TestLoadDataset:
    def test_empty_dir_warns_not_raises(self, tmp_path):
        with pytest.warns(UserWarning):
            assert load_dataset(tmp_path, size=32) == []

    def test_unpaired_stems_error(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        write_image(np.zeros((3, 8, 8)), tmp_path / "images" / "only.ppm")
        with pytest.raises(DatasetError, match="only"):
            load_dataset(tmp_path, size=8)

    def test_mask_binarized_at_128(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        write_image(np.zeros((3, 4, 4)), tmp_path / "images" / "a.ppm")
        from lesionseg.data import _write_pnm
        levels = np.array([[0, 100, 127, 128], [129, 200, 255, 0],
                           [0, 0, 0, 0], [255, 255, 255, 255]], dtype=np.uint8)
        _write_pnm(tmp_path / "masks" / "a.pgm", levels)
        sample = load_dataset(tmp_path, size=4)[0]
        want = (levels >= 128).astype(float)
        assert np.array_equal(sample.mask.data[0], want)

    def test_rectangular_input_padded_square(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        write_image(np.full((3, 8, 16), 0.5), tmp_path / "images" / "r.ppm")
        write_mask(np.ones((1, 8, 16)), tmp_path / "masks" / "r.pgm")
        sample = load_dataset(tmp_path, size=16)[0]
        assert sample.image.shape == (3, 16, 16)
        assert sample.mask.shape == (1, 16, 16)
        assert not sample.mask.data[0, 8:, :].any()  # padded rows are background


class TestManifestAndSplit:
    def test_manifest_roundtrip(self, tmp_path):
        write_manifest(tmp_path, [("a", "train"), ("b", "val")])
        assert read_manifest(tmp_path) == {"a": "train", "b": "val"}

    def test_missing_manifest_empty(self, tmp_path):
        assert read_manifest(tmp_path) == {}

    def test_split_deterministic_and_proportional(self):
        samples = gen_synthetic(SynthConfig(count=20, size=32, seed=12))
        t1, v1 = split_dataset(samples, 0.8, seed=3)
        t2, v2 = split_dataset(samples, 0.8, seed=3)
        assert [s.id for s in t1] == [s.id for s in t2]
        assert len(t1) == 16 and len(v1) == 4
        assert {s.id for s in t1}.isdisjoint({s.id for s in v1})


class TestSampleValidation:
    def test_rejects_non_binary_mask(self):
        with pytest.raises(DatasetError):
            Sample(image=Tensor(np.zeros((3, 4, 4))),
                   mask=Tensor(np.full((1, 4, 4), 0.5)), id="bad")
