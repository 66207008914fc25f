import json
import struct

import numpy as np
import pytest
from scipy import stats

from unshade import autodiff as ad
from unshade.autodiff import EPS_STAT, Tensor
from unshade.gradcheck import grad_check
from unshade.imaging import ImagePlane
from unshade.model import (
    ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
    DiagGaussian,
    LatentSample,
    Model,
    ModelConfig,
    gaussian_log_density,
    images_to_batch,
    load_weights,
    sample_latent,
    save_weights,
)

TINY = ModelConfig(ladder=(4, 8, 16), bottleneck=16, seed=3)


def batch(shape, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random(shape).astype(dtype))


def unit_gaussians(n, d, dtype=np.float64):
    zero = lambda: Tensor(np.zeros((n, d), dtype=dtype))
    return DiagGaussian(zero(), zero()), DiagGaussian(zero(), zero())


class TestModelConfig:
    def test_presets_are_valid(self):
        assert ModelConfig.desk().ladder == (16, 32, 64)
        assert ModelConfig.full_scale().bottleneck == 288

    def test_rejects_non_increasing_ladder(self):
        with pytest.raises(ValueError):
            ModelConfig(ladder=(16, 16, 64), bottleneck=64)

    def test_rejects_bottleneck_mismatch(self):
        with pytest.raises(ValueError):
            ModelConfig(ladder=(16, 32, 64), bottleneck=32)

    def test_rejects_bad_samples_and_kernel(self):
        with pytest.raises(ValueError):
            ModelConfig(samples=0)
        with pytest.raises(ValueError):
            ModelConfig(kernel_size=4)


class TestEncode:
    def test_bottleneck_spatial_size(self):
        model = Model(ModelConfig.desk())
        skips, bott = model.encode(batch((1, 3, 64, 64), 0))
        assert bott.shape == (1, 64, 8, 8)
        assert [s.shape for s in skips] == [(1, 16, 32, 32), (1, 32, 16, 16)]

    def test_rejects_indivisible_dims(self):
        model = Model(TINY)
        with pytest.raises(ValueError):
            model.encode(batch((1, 3, 20, 16), 0))

    def test_deterministic_across_runs(self):
        a = Model(ModelConfig(ladder=(4, 8, 16), bottleneck=16, seed=9))
        b = Model(ModelConfig(ladder=(4, 8, 16), bottleneck=16, seed=9))
        x = batch((1, 3, 16, 16), 1)
        _, ba = a.encode(x)
        _, bb = b.encode(x)
        np.testing.assert_array_equal(ba.data, bb.data)

    def test_zero_input_zero_final_block(self):
        model = Model(TINY)
        last = len(TINY.ladder) - 1
        for suffix in ("down_w", "down_b", "conv_w", "conv_b"):
            name = f"enc{last}_{suffix}"
            model.params[name].data = np.zeros_like(model.params[name].data)
        _, bott = model.encode(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
        assert not bott.data.any()


class TestHeads:
    def test_zero_init_gives_unit_gaussians(self):
        model = Model(TINY)
        _, bott = model.encode(batch((2, 3, 16, 16), 2))
        for dist in model.prior_heads(bott):
            assert dist.mu.shape == (2, 16)
            assert not dist.mu.data.any()
            assert not dist.logvar.data.any()

    def test_posterior_same_contract(self):
        model = Model(TINY)
        x, y = batch((1, 3, 16, 16), 3), batch((1, 3, 16, 16), 4)
        for dist in model.posterior_heads(x, y):
            assert dist.mu.shape == (1, 16)
            assert not dist.mu.data.any()

    def test_posterior_rejects_dim_mismatch(self):
        model = Model(TINY)
        with pytest.raises(ValueError):
            model.posterior_heads(batch((1, 3, 16, 16), 0),
                                  batch((1, 3, 32, 32), 0))

    def test_deterministic_per_input(self):
        model = Model(TINY)
        _, bott = model.encode(batch((1, 3, 16, 16), 5))
        d1, _ = model.prior_heads(bott)
        d2, _ = model.prior_heads(bott)
        np.testing.assert_array_equal(d1.mu.data, d2.mu.data)

    def test_diag_gaussian_rejects_non_finite(self):
        with pytest.raises(FloatingPointError):
            DiagGaussian(Tensor(np.array([[np.nan]])), Tensor(np.zeros((1, 1))))


class TestSampleLatent:
    def test_vanishing_sigma_returns_mu(self):
        mu = np.random.default_rng(6).standard_normal((1, 8))
        dist = DiagGaussian(Tensor(mu.copy()), Tensor(np.full((1, 8), -1000.0)))
        s = sample_latent((dist, dist), np.random.default_rng(0))
        np.testing.assert_array_equal(s.a.data, mu)

    def test_fixed_seed_reproducible(self):
        dists = unit_gaussians(2, 8)
        s1 = sample_latent(dists, np.random.default_rng(11))
        s2 = sample_latent(dists, np.random.default_rng(11))
        np.testing.assert_array_equal(s1.a.data, s2.a.data)
        np.testing.assert_array_equal(s1.b.data, s2.b.data)
        np.testing.assert_array_equal(s1.log_prior_density, s2.log_prior_density)

    def test_unit_gaussian_moments_over_many_draws(self):
        # 10^4 draws via one batched call
        dists = unit_gaussians(10_000, 1)
        s = sample_latent(dists, np.random.default_rng(12))
        draws = s.a.data.ravel()
        assert abs(draws.mean()) < 0.05
        assert abs(draws.var() - 1.0) < 0.05

    def test_scale_is_strictly_positive(self):
        dists = unit_gaussians(1000, 2)
        s = sample_latent(dists, np.random.default_rng(13))
        assert (s.b.data >= EPS_STAT).all()

    def test_log_density_matches_scipy(self):
        rng = np.random.default_rng(14)
        mu = rng.standard_normal((3, 5))
        logvar = rng.uniform(-2, 1, (3, 5))
        mean_dist = DiagGaussian(Tensor(mu.copy()), Tensor(logvar.copy()))
        std_dist = DiagGaussian(Tensor(mu * 0.5), Tensor(logvar * 0.5))
        s = sample_latent((mean_dist, std_dist), np.random.default_rng(15))
        a_raw = s.a.data
        b_raw = np.log(np.expm1(s.b.data - EPS_STAT))  # invert softplus
        expected = (
            stats.norm.logpdf(a_raw, loc=mu, scale=np.exp(0.5 * logvar)).sum(axis=1)
            + stats.norm.logpdf(b_raw, loc=mu * 0.5,
                                scale=np.exp(0.25 * logvar)).sum(axis=1))
        np.testing.assert_allclose(s.log_prior_density, expected, atol=1e-8)

    def test_density_under_explicit_prior(self):
        post = unit_gaussians(1, 4)
        prior_mean = DiagGaussian(Tensor(np.full((1, 4), 2.0)),
                                  Tensor(np.zeros((1, 4))))
        prior = (prior_mean, post[1])
        s_self = sample_latent(post, np.random.default_rng(16))
        s_prior = sample_latent(post, np.random.default_rng(16), prior=prior)
        # same draws, different reference density
        np.testing.assert_array_equal(s_self.a.data, s_prior.a.data)
        assert s_prior.log_prior_density[0] < s_self.log_prior_density[0]


def fixed_sample(n, d, a_value, b_value, dtype=np.float32):
    a = Tensor(np.full((n, d), a_value, dtype=dtype))
    b = Tensor(np.full((n, d), b_value, dtype=dtype))
    return LatentSample(a=a, b=b, log_prior_density=np.zeros(n))


class TestPem:
    def test_inverse_modulation_is_identity(self):
        model = Model(TINY)
        x = batch((1, 16, 4, 4), 7)
        mu, sigma = ad.instance_stats(x)
        s = LatentSample(a=mu, b=sigma, log_prior_density=np.zeros(1))
        out = model.pem(x, s)
        np.testing.assert_allclose(out.data, x.data, atol=1e-5)

    def test_constant_channel_maps_to_shift(self):
        model = Model(TINY)
        x = Tensor(np.full((1, 16, 4, 4), 0.3, dtype=np.float32))
        out = model.pem(x, fixed_sample(1, 16, a_value=0.9, b_value=2.0))
        np.testing.assert_allclose(out.data, 0.9, atol=1e-6)

    def test_output_moments_match_sample(self):
        model = Model(TINY)
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32))
        a = Tensor(rng.standard_normal((2, 16)).astype(np.float32))
        b = Tensor((np.abs(rng.standard_normal((2, 16))) + 0.5).astype(np.float32))
        out = model.pem(x, LatentSample(a=a, b=b, log_prior_density=np.zeros(2)))
        mean = out.data.mean(axis=(2, 3))
        std = out.data.std(axis=(2, 3))
        np.testing.assert_allclose(mean, a.data, atol=1e-4)
        np.testing.assert_allclose(std, b.data, atol=1e-4)

    def test_moments_hold_for_small_input_std(self):
        model = Model(TINY)
        rng = np.random.default_rng(9)
        x = Tensor((0.5 + 1e-3 * rng.standard_normal((1, 16, 8, 8)))
                   .astype(np.float32))
        out = model.pem(x, fixed_sample(1, 16, a_value=0.25, b_value=1.5))
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), 0.25, atol=1e-4)
        np.testing.assert_allclose(out.data.std(axis=(2, 3)), 1.5, atol=1e-4)

    def test_rejects_channel_mismatch(self):
        model = Model(TINY)
        with pytest.raises(ValueError):
            model.pem(batch((1, 8, 4, 4), 0), fixed_sample(1, 8, 0.0, 1.0))


class TestDecode:
    def test_output_matches_input_dims_and_range(self):
        model = Model(TINY)
        x = batch((2, 3, 16, 16), 10)
        skips, bott = model.encode(x)
        out = model.decode(skips, bott)
        assert out.shape == (2, 3, 16, 16)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_deterministic(self):
        model = Model(TINY)
        x = batch((1, 3, 16, 16), 11)
        skips, bott = model.encode(x)
        np.testing.assert_array_equal(model.decode(skips, bott).data,
                                      model.decode(skips, bott).data)


def tiny_image(seed, size=16):
    rng = np.random.default_rng(seed)
    return ImagePlane(rng.random((3, size, size)).astype(np.float32))


class TestInferMap:
    def test_k1_returns_only_sample(self):
        model = Model(TINY)
        res = model.infer_map(tiny_image(20), k=1, seed=0)
        assert res.best_index == 0 and len(res.candidates) == 1
        np.testing.assert_array_equal(res.best.data, res.candidates[0].data)

    def test_default_k_from_config(self):
        model = Model(TINY)
        res = model.infer_map(tiny_image(21), seed=0)
        assert len(res.candidates) == TINY.samples == 10

    def test_fixed_seed_bitwise_reproducible(self):
        model = Model(TINY)
        r1 = model.infer_map(tiny_image(22), k=4, seed=77)
        r2 = model.infer_map(tiny_image(22), k=4, seed=77)
        assert r1.best_index == r2.best_index
        for c1, c2 in zip(r1.candidates, r2.candidates):
            np.testing.assert_array_equal(c1.data, c2.data)
        np.testing.assert_array_equal(r1.log_densities, r2.log_densities)

    def test_selection_is_argmax_of_reported_densities(self):
        model = Model(TINY)
        res = model.infer_map(tiny_image(23), k=6, seed=5)
        assert res.best_index == int(np.argmax(res.log_densities))
        np.testing.assert_array_equal(
            res.best.data, res.candidates[res.best_index].data)


class TestWeightArchive:
    def test_round_trip_forward_is_bitwise(self, tmp_path):
        model = Model(TINY)
        img = tiny_image(30)
        before = model.infer_map(img, k=3, seed=2)
        path = str(tmp_path / "weights.fnwt")
        save_weights(model, path)
        loaded = load_weights(path)
        after = loaded.infer_map(img, k=3, seed=2)
        assert before.best_index == after.best_index
        for c1, c2 in zip(before.candidates, after.candidates):
            np.testing.assert_array_equal(c1.data, c2.data)

    def test_corrupt_magic_rejected(self, tmp_path):
        model = Model(TINY)
        path = str(tmp_path / "weights.fnwt")
        save_weights(model, path)
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"XXXX"
        bad = tmp_path / "bad.fnwt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_weights(str(bad))

    def test_version_mismatch_rejected(self, tmp_path):
        model = Model(TINY)
        path = str(tmp_path / "weights.fnwt")
        save_weights(model, path)
        raw = bytearray(open(path, "rb").read())
        raw[4:8] = struct.pack("<I", 99)
        bad = tmp_path / "bad.fnwt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_weights(str(bad))

    def test_shape_mismatch_names_offending_array(self, tmp_path):
        blob = json.dumps({"ladder": [4, 8, 16], "bottleneck": 16,
                           "kernel_size": 3, "slope": 0.2, "samples": 10,
                           "seed": 3}, sort_keys=True).encode()
        path = tmp_path / "bad.fnwt"
        with open(path, "wb") as fh:
            fh.write(ARCHIVE_MAGIC)
            fh.write(struct.pack("<I", ARCHIVE_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", 1))
            name = b"enc0_down_w"
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", 4))
            fh.write(struct.pack("<4I", 1, 1, 1, 1))
            fh.write(np.zeros(1, dtype="<f4").tobytes())
        with pytest.raises(ValueError, match="enc0_down_w"):
            load_weights(str(path))

    def test_unknown_array_rejected(self, tmp_path):
        model = Model(TINY)
        path = str(tmp_path / "weights.fnwt")
        save_weights(model, path)
        raw = bytearray(open(path, "rb").read())
        idx = raw.find(b"enc0_down_w")
        raw[idx:idx + 11] = b"bogus_arr_x"
        bad = tmp_path / "bad.fnwt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="bogus_arr_x"):
            load_weights(str(bad))


class TestEndToEndGradients:
    # finite differences are only valid if no leaky-relu pre-activation sits
    # within the step h of its kink; each test verifies that margin for its
    # seed before trusting the numeric gradients
    H = 1e-5

    def float64_model(self):
        model = Model(TINY, dtype=np.float64)
        # zero-init heads block gradient flow through the latent path, so
        # give them small random weights for the check
        rng = np.random.default_rng(40)
        for name, p in model.params.items():
            if "head" in name and name.endswith("_w"):
                p.data = rng.standard_normal(p.data.shape) * 0.1
        return model

    def kink_margin(self, fn, inputs, monkeypatch):
        seen = [np.inf]
        original = ad.leaky_relu

        def tracked(x, slope=0.2):
            seen[0] = min(seen[0], float(np.abs(x.data).min()))
            return original(x, slope)

        monkeypatch.setattr(ad, "leaky_relu", tracked)
        fn(*inputs)
        monkeypatch.undo()
        return seen[0]

    def test_encode_pem_decode_path(self, monkeypatch):
        model = self.float64_model()
        target = np.random.default_rng(2007).random((1, 3, 16, 16))
        sample = fixed_sample(1, 16, a_value=0.2, b_value=1.1, dtype=np.float64)

        def fn(x, fw, fb):
            model.params["final_w"] = fw
            model.params["final_b"] = fb
            skips, bott = model.encode(x)
            out = model.decode(skips, model.pem(bott, sample))
            diff = out - Tensor(target)
            return (diff * diff).mean()

        x = Tensor(np.random.default_rng(7).random((1, 3, 16, 16)),
                   requires_grad=True)
        fw = Tensor(np.random.default_rng(1007).standard_normal((3, 4, 1, 1)) * 0.3,
                    requires_grad=True)
        fb = Tensor(np.zeros(3), requires_grad=True)
        fn(x, fw, fb).backward()
        assert np.abs(x.grad).max() > 0  # the check must not be vacuous
        assert self.kink_margin(fn, [x, fw, fb], monkeypatch) > 10 * self.H
        assert grad_check(fn, [x, fw, fb], h=self.H) < 1e-4

    def test_path_through_heads_and_reparameterization(self, monkeypatch):
        model = self.float64_model()
        # the final block is zero-initialised, which would make the loss
        # constant and the check vacuous; give it real weights
        model.params["final_w"].data = (
            np.random.default_rng(46).standard_normal(
                model.params["final_w"].data.shape) * 0.3)
        rng = np.random.default_rng(44)
        eps1 = Tensor(rng.standard_normal((1, 16)))
        eps2 = Tensor(rng.standard_normal((1, 16)))
        target = rng.random((1, 3, 16, 16))

        def fn(x):
            skips, bott = model.encode(x)
            mean_d, std_d = model.prior_heads(bott)
            a = mean_d.mu + ad.exp(mean_d.logvar * 0.5) * eps1
            b = ad.softplus(std_d.mu + ad.exp(std_d.logvar * 0.5) * eps2) + EPS_STAT
            s = LatentSample(a=a, b=b, log_prior_density=np.zeros(1))
            out = model.decode(skips, model.pem(bott, s))
            diff = out - Tensor(target)
            return (diff * diff).mean()

        x = Tensor(np.random.default_rng(44).random((1, 3, 16, 16)),
                   requires_grad=True)
        fn(x).backward()
        assert np.abs(x.grad).max() > 0  # the check must not be vacuous
        assert self.kink_margin(fn, [x], monkeypatch) > 10 * self.H
        assert grad_check(fn, [x], h=self.H) < 1e-4


def test_images_to_batch_stacks():
    imgs = [tiny_image(50), tiny_image(51)]
    t = images_to_batch(imgs)
    assert t.shape == (2, 3, 16, 16)
    np.testing.assert_array_equal(t.data[1], imgs[1].data)


def test_gaussian_log_density_standard_normal_at_zero():
    dist = DiagGaussian(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    val = gaussian_log_density(np.zeros((1, 2)), dist)
    assert val[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
