import hashlib
import os

import numpy as np
import pytest

from unshade.imaging import ImagePlane, load_image, load_mask, save_image
from unshade.synthesis import (
    AffineShadeParams,
    GenerationSummary,
    ShadowMatte,
    SynthesisManifestEntry,
    binarize_matte,
    composite,
    generate_dataset,
    load_manifest,
    procedural_matte,
    sample_shade_params,
    save_manifest,
    shade,
)


def rand_image(seed, h=8, w=8):
    rng = np.random.default_rng(seed)
    return ImagePlane(rng.random((3, h, w)).astype(np.float32))


class TestShade:
    def test_single_value(self):
        img = ImagePlane(np.full((3, 4, 4), 0.6, dtype=np.float32))
        out = shade(img, AffineShadeParams(2.0, (0.1, 0.1, 0.1)))
        # 0.6/2 - 0.1/2 = 0.25
        np.testing.assert_allclose(out.data, 0.25, atol=1e-6)

    def test_identity_params(self):
        img = rand_image(0)
        out = shade(img, AffineShadeParams(1.0, (0.0, 0.0, 0.0)))
        np.testing.assert_allclose(out.data, img.data, atol=1e-7)

    def test_affine_round_trip(self):
        # inputs chosen so no clamping occurs; alpha + gamma * shaded == input
        rng = np.random.default_rng(1)
        img = ImagePlane((0.2 + 0.7 * rng.random((3, 8, 8))).astype(np.float32))
        p = AffineShadeParams(2.0, (0.1, 0.05, 0.0))
        out = shade(img, p)
        alpha = np.asarray(p.alpha, dtype=np.float32).reshape(3, 1, 1)
        back = alpha + p.gamma * out.data
        np.testing.assert_allclose(back, img.data, atol=1e-6)

    def test_never_brightens(self):
        img = rand_image(2)
        out = shade(img, AffineShadeParams(1.7, (0.02, 0.05, 0.08)))
        assert np.all(out.data <= img.data + 1e-7)

    def test_rejects_bad_gamma(self):
        with pytest.raises(ValueError):
            shade(rand_image(3), AffineShadeParams(0.0, (0.0, 0.0, 0.0)))
        with pytest.raises(ValueError):
            AffineShadeParams(0.5, (0.0, 0.0, 0.0))

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            AffineShadeParams(2.0, (0.0, 0.0))
        with pytest.raises(ValueError):
            AffineShadeParams(2.0, (-0.1, 0.0, 0.0))
        with pytest.raises(ValueError):
            AffineShadeParams(2.0, (0.0, 0.0, 1.0))


class TestComposite:
    def test_matte_zero_passes_shadow_free(self):
        sf, sh = rand_image(4), rand_image(5)
        m = ShadowMatte(np.zeros((8, 8), dtype=np.float32))
        np.testing.assert_array_equal(composite(sf, sh, m).data, sf.data)

    def test_matte_one_passes_shaded(self):
        sf, sh = rand_image(6), rand_image(7)
        m = ShadowMatte(np.ones((8, 8), dtype=np.float32))
        np.testing.assert_allclose(composite(sf, sh, m).data, sh.data, atol=1e-7)

    def test_midpoint_blend(self):
        sf = ImagePlane(np.full((3, 4, 4), 0.8, dtype=np.float32))
        sh = ImagePlane(np.full((3, 4, 4), 0.2, dtype=np.float32))
        m = ShadowMatte(np.full((4, 4), 0.5, dtype=np.float32))
        np.testing.assert_allclose(composite(sf, sh, m).data, 0.5, atol=1e-7)

    def test_equal_inputs_fixed_point(self):
        img = rand_image(8)
        m = ShadowMatte(np.random.default_rng(9).random((8, 8)).astype(np.float32))
        np.testing.assert_allclose(composite(img, img, m).data, img.data, atol=1e-7)

    def test_convex_combination_bounds(self):
        sf, sh = rand_image(10), rand_image(11)
        m = ShadowMatte(np.random.default_rng(12).random((8, 8)).astype(np.float32))
        out = composite(sf, sh, m).data
        lo = np.minimum(sf.data, sh.data)
        hi = np.maximum(sf.data, sh.data)
        assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            composite(rand_image(0), rand_image(0, h=4, w=4),
                      ShadowMatte(np.zeros((8, 8), dtype=np.float32)))
        with pytest.raises(ValueError):
            composite(rand_image(0), rand_image(0),
                      ShadowMatte(np.zeros((4, 4), dtype=np.float32)))


class TestProceduralMatte:
    def test_deterministic(self):
        a = procedural_matte(32, 32, seed=5, blur_sigma=2.0)
        b = procedural_matte(32, 32, seed=5, blur_sigma=2.0)
        np.testing.assert_array_equal(a.values, b.values)

    def test_zero_blur_is_binary(self):
        m = procedural_matte(64, 64, seed=7, blur_sigma=0.0)
        assert set(np.unique(m.values)) <= {0.0, 1.0}
        assert 0.0 < m.values.mean() < 1.0

    def test_blur_creates_penumbra(self):
        m = procedural_matte(64, 64, seed=7, blur_sigma=3.0)
        pen = np.count_nonzero((m.values > 0.0) & (m.values < 1.0))
        assert pen > 0
        # frozen count pins seeded determinism of the generator
        assert pen == 2574

    def test_values_in_range(self):
        m = procedural_matte(40, 24, seed=3, blur_sigma=4.0)
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0

    def test_degenerate_dims(self):
        with pytest.raises(ValueError):
            procedural_matte(7, 64, seed=0)
        with pytest.raises(ValueError):
            procedural_matte(64, 7, seed=0)
        with pytest.raises(ValueError):
            procedural_matte(16, 16, seed=0, blur_sigma=-1.0)


class TestBinarize:
    def test_endpoints(self):
        ones = ShadowMatte(np.ones((4, 4), dtype=np.float32))
        zeros = ShadowMatte(np.zeros((4, 4), dtype=np.float32))
        assert binarize_matte(ones, 0.3).values.all()
        assert not binarize_matte(zeros, 0.7).values.any()

    def test_tie_maps_to_shadow(self):
        m = ShadowMatte(np.full((4, 4), 0.5, dtype=np.float32))
        assert binarize_matte(m, 0.5).values.all()

    def test_threshold_must_be_interior(self):
        m = ShadowMatte(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            binarize_matte(m, 0.0)
        with pytest.raises(ValueError):
            binarize_matte(m, 1.0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [
            SynthesisManifestEntry("a.png", 2.0, (0.1, 0.0, 0.05),
                                   procedural={"seed": 1, "blur_sigma": 3.0}),
            SynthesisManifestEntry("b.png", 1.5, (0.0, 0.0, 0.0), matte="m.png"),
        ]
        path = tmp_path / "manifest.jsonl"
        save_manifest(entries, str(path))
        back = load_manifest(str(path))
        assert back == entries

    def test_rejects_both_or_neither_source(self):
        with pytest.raises(ValueError):
            SynthesisManifestEntry("a.png", 2.0, (0, 0, 0))
        with pytest.raises(ValueError):
            SynthesisManifestEntry("a.png", 2.0, (0, 0, 0), matte="m.png",
                                   procedural={"seed": 0, "blur_sigma": 0.0})

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"shadow_free": "a.png"}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            load_manifest(str(path))


def tree_digest(root):
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        h.update(name.encode())
        with open(os.path.join(root, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


class TestGenerateDataset:
    def test_empty_manifest(self, tmp_path):
        summary = generate_dataset([], str(tmp_path / "out"))
        assert isinstance(summary, GenerationSummary)
        assert summary.total == 0 and summary.written == 0 and not summary.failures
        assert os.path.getsize(summary.index_path) == 0

    def test_zero_matte_reproduces_input(self, tmp_path):
        img = rand_image(20, h=16, w=16)
        sf_path = str(tmp_path / "sf.png")
        save_image(img, sf_path)
        matte_path = str(tmp_path / "zero.png")
        save_image(ImagePlane(np.zeros((1, 16, 16), dtype=np.float32)), matte_path)
        entry = SynthesisManifestEntry(sf_path, 2.5, (0.1, 0.1, 0.1), matte=matte_path)
        summary = generate_dataset([entry], str(tmp_path / "out"))
        assert summary.written == 1 and not summary.failures
        shadow = load_image(str(tmp_path / "out" / "00000_shadow.png"))
        original = load_image(sf_path)
        assert np.abs(shadow.data - original.data).max() <= 1 / 255
        mask = load_mask(str(tmp_path / "out" / "00000_mask.png"))
        assert not mask.values.any()

    def test_rerun_is_byte_identical(self, tmp_path):
        sf_path = str(tmp_path / "sf.png")
        save_image(rand_image(21, h=24, w=24), sf_path)
        entries = [
            SynthesisManifestEntry(sf_path, 2.0, (0.05, 0.02, 0.08),
                                   procedural={"seed": 11, "blur_sigma": 2.0}),
            SynthesisManifestEntry(sf_path, 1.8, (0.0, 0.0, 0.0),
                                   procedural={"seed": 12, "blur_sigma": 0.0}),
        ]
        generate_dataset(entries, str(tmp_path / "a"))
        generate_dataset(entries, str(tmp_path / "b"))
        assert tree_digest(str(tmp_path / "a")) == tree_digest(str(tmp_path / "b"))

    def test_failures_do_not_stop_the_run(self, tmp_path):
        sf_path = str(tmp_path / "sf.png")
        save_image(rand_image(22, h=16, w=16), sf_path)
        entries = [
            SynthesisManifestEntry(str(tmp_path / "missing.png"), 2.0, (0, 0, 0),
                                   procedural={"seed": 1, "blur_sigma": 0.0}),
            SynthesisManifestEntry(sf_path, 2.0, (0, 0, 0),
                                   procedural={"seed": 2, "blur_sigma": 1.0}),
        ]
        summary = generate_dataset(entries, str(tmp_path / "out"))
        assert summary.total == 2 and summary.written == 1
        assert len(summary.failures) == 1 and summary.failures[0][0] == 0
        with open(summary.index_path) as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 1 and "00001_shadow.png" in lines[0]

    def test_matte_resized_to_image(self, tmp_path):
        sf_path = str(tmp_path / "sf.png")
        save_image(rand_image(23, h=16, w=16), sf_path)
        matte_path = str(tmp_path / "small.png")
        save_image(ImagePlane(np.ones((1, 8, 8), dtype=np.float32)), matte_path)
        entry = SynthesisManifestEntry(sf_path, 2.0, (0, 0, 0), matte=matte_path)
        summary = generate_dataset([entry], str(tmp_path / "out"))
        assert summary.written == 1 and not summary.failures
        mask = load_mask(str(tmp_path / "out" / "00000_mask.png"))
        assert mask.values.shape == (16, 16) and mask.values.all()

    def test_parallel_matches_serial(self, tmp_path):
        sf_path = str(tmp_path / "sf.png")
        save_image(rand_image(24, h=16, w=16), sf_path)
        entries = [
            SynthesisManifestEntry(sf_path, 1.5 + 0.1 * i, (0.01 * i, 0.0, 0.02),
                                   procedural={"seed": i, "blur_sigma": 1.5})
            for i in range(4)
        ]
        generate_dataset(entries, str(tmp_path / "serial"), jobs=1)
        generate_dataset(entries, str(tmp_path / "par"), jobs=3)
        assert tree_digest(str(tmp_path / "serial")) == tree_digest(str(tmp_path / "par"))


def test_sample_shade_params_ranges():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = sample_shade_params(rng)
        assert 1.5 <= p.gamma <= 3.0
        assert all(0.0 <= a <= 0.1 for a in p.alpha)
