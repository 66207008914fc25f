"""Probabilistic enhancement network.

A strided-conv encoder compresses the shadow image to a bottleneck
feature map.  Two 1x1-conv heads over the globally pooled bottleneck
parameterize diagonal Gaussians for a per-channel modulation shift and
scale; a separate posterior encoder sees the (input, reference) pair at
training time.  Sampled (a, b) pairs modulate the instance-normalized
bottleneck (scale by b, shift by a), and a mirrored decoder with skip
connections maps the result back to a 3-channel image through a final
1x1 conv and sigmoid.

Inference draws K latent samples from the prior, decodes each one with
cached encoder features, and keeps the candidate whose raw draw has the
highest log density under the prior (MAP selection).

Weights round-trip through a little-endian binary archive (magic
"FNWT"): version, config JSON blob, then named float32 arrays.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_STAT, Tensor
from .imaging import ImagePlane

ARCHIVE_MAGIC = b"FNWT"
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ladder: encoder channels per stride-2 level; bottleneck must equal
    its last entry (latent vectors are per-bottleneck-channel).
    samples: latent draws per inference call.
    """

    ladder: tuple = (16, 32, 64)
    bottleneck: int = 64
    kernel_size: int = 3
    slope: float = 0.2
    samples: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(int(c) for c in self.ladder))
        if not self.ladder or any(b <= a for a, b in zip(self.ladder,
                                                         self.ladder[1:])):
            raise ValueError("channel ladder must be strictly increasing")
        if self.bottleneck != self.ladder[-1]:
            raise ValueError("bottleneck channels must equal the ladder top")
        if self.kernel_size % 2 == 0 or self.kernel_size < 3:
            raise ValueError("kernel size must be odd and >= 3")
        if self.samples < 1:
            raise ValueError("need at least one latent sample")

    @classmethod
    def desk(cls, seed=0):
        """Small CPU-friendly preset."""
        return cls(ladder=(16, 32, 64), bottleneck=64, seed=seed)

    @classmethod
    def full_scale(cls, seed=0):
        """Full-size preset for parameter/FLOPs accounting."""
        return cls(ladder=(36, 72, 144, 288), bottleneck=288, seed=seed)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian over D-dim latents, batched: mu/logvar are (N, D)."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError("mu and logvar shapes must match")
        if not (np.isfinite(self.mu.data).all()
                and np.isfinite(self.logvar.data).all()):
            raise FloatingPointError("non-finite latent distribution parameters")


@dataclass
class LatentSample:
    """One reparameterized draw: shift a, positive scale b, and the
    log density of the raw draws under the prior (per batch element)."""

    a: Tensor
    b: Tensor
    log_prior_density: np.ndarray


@dataclass
class InferenceResult:
    best: ImagePlane
    best_index: int
    candidates: list
    log_densities: np.ndarray


def gaussian_log_density(raw, dist):
    """Log density of raw (N,D) values under a DiagGaussian, summed over D."""
    mu = dist.mu.data
    logvar = dist.logvar.data
    # squaring after the scale keeps raw == mu finite even for extreme logvar
    quad = ((raw - mu) * np.exp(-0.5 * logvar)) ** 2
    return -0.5 * np.sum(np.log(2.0 * np.pi) + logvar + quad, axis=1)


def _reparameterize(dist, rng):
    eps = Tensor(rng.standard_normal(dist.mu.shape).astype(dist.mu.dtype))
    return dist.mu + ad.exp(dist.logvar * 0.5) * eps


def sample_latent(dists, rng, prior=None):
    """Draw a LatentSample from (mean_dist, std_dist).

    a is the raw shift draw; the scale draw passes through
    softplus + eps so b stays positive.  The reported log density is
    that of the raw draws under ``prior`` (default: the sampling
    distributions themselves, the inference-time case).
    """
    mean_dist, std_dist = dists
    a = _reparameterize(mean_dist, rng)
    b_raw = _reparameterize(std_dist, rng)
    b = ad.softplus(b_raw) + EPS_STAT
    prior_mean, prior_std = prior if prior is not None else (mean_dist, std_dist)
    density = (gaussian_log_density(a.data, prior_mean)
               + gaussian_log_density(b_raw.data, prior_std))
    return LatentSample(a=a, b=b, log_prior_density=density)


def images_to_batch(images, dtype=np.float32):
    data = np.stack([img.data for img in images]).astype(dtype)
    return Tensor(data)


class Model:
    """Encoder / latent heads / PEM / decoder bundle owning all parameters."""

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = {}
        self._build(np.random.default_rng(config.seed))

    # ---- construction ------------------------------------------------

    def _add_conv(self, name, c_out, c_in, k, rng, zero=False):
        if zero:
            w = np.zeros((c_out, c_in, k, k), dtype=self.dtype)
        else:
            std = np.sqrt(2.0 / (c_in * k * k))
            w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(self.dtype)
        self.params[name + "_w"] = Tensor(w, requires_grad=True)
        self.params[name + "_b"] = Tensor(np.zeros(c_out, dtype=self.dtype),
                                          requires_grad=True)

    def _build(self, rng):
        cfg = self.config
        k = cfg.kernel_size
        for stem, c_in in (("enc", 3), ("post", 6)):
            prev = c_in
            for i, c in enumerate(cfg.ladder):
                self._add_conv(f"{stem}{i}_down", c, prev, k, rng)
                self._add_conv(f"{stem}{i}_conv", c, c, k, rng)
                prev = c
        d = cfg.bottleneck
        for head in ("prior_shift_head", "prior_scale_head",
                     "post_shift_head", "post_scale_head"):
            self._add_conv(head, 2 * d, d, 1, rng, zero=True)
        levels = len(cfg.ladder)
        for j in range(levels):
            cur = cfg.ladder[levels - 1 - j]
            if j < levels - 1:
                skip = cfg.ladder[levels - 2 - j]
                target = skip
                self._add_conv(f"dec{j}_conv0", target, cur + skip, k, rng)
            else:
                target = cfg.ladder[0]
                self._add_conv(f"dec{j}_conv0", target, cur, k, rng)
            self._add_conv(f"dec{j}_conv1", target, target, k, rng)
        self._add_conv("final", 3, cfg.ladder[0], 1, rng, zero=True)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # ---- forward pieces ----------------------------------------------

    def _conv(self, h, name, stride=1):
        k = self.config.kernel_size
        if stride == 2:
            # bottom/right-heavy padding so even dims halve exactly
            p = (k - 3) // 2
            h = ad.pad_spatial(h, p, p + 1, p, p + 1)
            pad = 0
        else:
            pad = k // 2
        return ad.conv2d(h, self.params[name + "_w"], self.params[name + "_b"],
                         stride=stride, pad=pad)

    def _encode_with(self, x, stem):
        cfg = self.config
        levels = len(cfg.ladder)
        _, _, h, w = x.shape
        div = 1 << levels
        if h % div or w % div:
            raise ValueError(f"spatial dims must be divisible by {div}")
        skips = []
        cur = x
        for i in range(levels):
            cur = ad.leaky_relu(self._conv(cur, f"{stem}{i}_down", stride=2),
                                cfg.slope)
            cur = ad.leaky_relu(self._conv(cur, f"{stem}{i}_conv"), cfg.slope)
            if i < levels - 1:
                skips.append(cur)
        return skips, cur

    def encode(self, x):
        """Shadow-image batch (N,3,H,W) -> (skip features, bottleneck)."""
        return self._encode_with(x, "enc")

    def _heads(self, bottleneck, name):
        d = self.config.bottleneck
        pooled = ad.avg_pool_global(bottleneck)
        n = pooled.shape[0]
        out = ad.conv2d(pooled, self.params[name + "_w"],
                        self.params[name + "_b"])
        mu = ad.slice_channels(out, 0, d).reshape((n, d))
        logvar = ad.slice_channels(out, d, 2 * d).reshape((n, d))
        return DiagGaussian(mu, logvar)

    def prior_heads(self, bottleneck):
        """Latent distributions conditioned on the input alone."""
        return (self._heads(bottleneck, "prior_shift_head"),
                self._heads(bottleneck, "prior_scale_head"))

    def posterior_heads(self, x, y):
        """Latent distributions conditioned on the (input, reference) pair."""
        if x.shape != y.shape:
            raise ValueError("input and reference batches must match in shape")
        _, bottleneck = self._encode_with(ad.concat_channels([x, y]), "post")
        return (self._heads(bottleneck, "post_shift_head"),
                self._heads(bottleneck, "post_scale_head"))

    def pem(self, features, sample):
        """Modulate instance-normalized features: b * normalized + a."""
        n, c, h, w = features.shape
        if c != self.config.bottleneck:
            raise ValueError(f"expected {self.config.bottleneck} channels, got {c}")
        mu, sigma = ad.instance_stats(features)
        norm = (features - mu.reshape((n, c, 1, 1))) / sigma.reshape((n, c, 1, 1))
        return sample.b.reshape((n, c, 1, 1)) * norm + sample.a.reshape((n, c, 1, 1))

    def decode(self, skips, modulated):
        """Mirror the encoder back to a (N,3,H,W) image in [0,1]."""
        cfg = self.config
        levels = len(cfg.ladder)
        cur = modulated
        for j in range(levels):
            cur = ad.upsample_nearest(cur, 2)
            if j < levels - 1:
                cur = ad.concat_channels([cur, skips[levels - 2 - j]])
            cur = ad.leaky_relu(self._conv(cur, f"dec{j}_conv0"), cfg.slope)
            cur = ad.leaky_relu(self._conv(cur, f"dec{j}_conv1"), cfg.slope)
        out = ad.conv2d(cur, self.params["final_w"], self.params["final_b"])
        return ad.sigmoid(out)

    def infer_map(self, image, k=None, seed=0):
        """K prior draws, one encode, K decodes; keep the max-density one."""
        k = self.config.samples if k is None else int(k)
        if k < 1:
            raise ValueError("need at least one sample")
        x = images_to_batch([image], dtype=self.dtype)
        skips, bottleneck = self.encode(x)
        dists = self.prior_heads(bottleneck)
        rng = np.random.default_rng(seed)
        candidates, densities = [], []
        for _ in range(k):
            s = sample_latent(dists, rng)
            out = self.decode(skips, self.pem(bottleneck, s))
            candidates.append(ImagePlane(out.data[0].astype(np.float32)))
            densities.append(float(s.log_prior_density[0]))
        densities = np.asarray(densities)
        best = int(np.argmax(densities))
        return InferenceResult(best=candidates[best], best_index=best,
                               candidates=candidates, log_densities=densities)


# ---- weight archive ---------------------------------------------------

def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated archive while reading {what}")
    return data


def save_weights(model, path):
    """Write all parameters plus a config echo; see module docstring."""
    blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", ARCHIVE_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_archive_config(path):
    """Just the ModelConfig echo from an archive header."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != ARCHIVE_MAGIC:
            raise ValueError("not a weight archive (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {version}")
        blob_len = struct.unpack("<I", _read_exact(fh, 4, "config length"))[0]
        cfg = json.loads(_read_exact(fh, blob_len, "config").decode("utf-8"))
    cfg["ladder"] = tuple(cfg["ladder"])
    return ModelConfig(**cfg)


def load_weights(path):
    """Rebuild a Model from an archive; bit-exact with the saved one."""
    config = read_archive_config(path)
    model = Model(config)
    seen = set()
    with open(path, "rb") as fh:
        fh.seek(8)
        blob_len = struct.unpack("<I", _read_exact(fh, 4, "config length"))[0]
        fh.seek(blob_len, 1)
        count = struct.unpack("<I", _read_exact(fh, 4, "array count"))[0]
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, "rank"))[0]
            shape = struct.unpack(f"<{rank}I",
                                  _read_exact(fh, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            raw = _read_exact(fh, nbytes, f"data for {name}")
            if name not in model.params:
                raise ValueError(f"archive array '{name}' not part of this config")
            expected = model.params[name].data.shape
            if tuple(shape) != expected:
                raise ValueError(
                    f"archive array '{name}' has shape {tuple(shape)}, "
                    f"config expects {expected}")
            model.params[name].data = np.frombuffer(
                raw, dtype="<f4").reshape(shape).astype(np.float32)
            seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ValueError(f"archive is missing arrays: {sorted(missing)}")
    return model
