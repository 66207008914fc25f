"""Training objective: enhancement (MSE + perceptual proxy), two KL
alignment terms between prior and posterior latent distributions, and a
boundary term weighted by the dissociated detail mask.

The perceptual term uses a fixed, seeded feature extractor (four
orthogonally-initialised strided convolutions) rather than a pretrained
classifier, so the repository stays self-contained and deterministic.
The extractor sits behind a small interface; a stronger feature network
can be substituted without touching the loss code.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EXTRACTOR_SEED = 710
EXTRACTOR_LADDER = (8, 16, 32, 64)
_LRELU_SLOPE = 0.2
# variance-preserving gain for leaky-relu activations
_GAIN = float(np.sqrt(2.0 / (1.0 + _LRELU_SLOPE ** 2)))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    alpha scales the enhancement term, beta the two KL alignment terms,
    gamma_w the boundary term, and lambda_p the perceptual share inside
    the enhancement term.
    """

    alpha: float = 1.0
    beta: float = 0.1
    gamma_w: float = 0.5
    lambda_p: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_w", "lambda_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    """Every term of one objective evaluation, as scalar graph Tensors.

    total is the differentiable combination; call backward() on it.
    """

    l_e: Tensor
    l_mse: Tensor
    l_perc: Tensor
    l_m: Tensor
    l_s: Tensor
    l_b: Tensor
    total: Tensor

    def as_floats(self):
        """Plain-float view of every term, for logging."""
        return {
            "l_mse": self.l_mse.item(),
            "l_perc": self.l_perc.item(),
            "l_e": self.l_e.item(),
            "l_m": self.l_m.item(),
            "l_s": self.l_s.item(),
            "l_b": self.l_b.item(),
            "total": self.total.item(),
        }


def _orthogonal_rows(rng, rows, cols):
    # QR of the transpose gives orthonormal rows whenever rows <= cols;
    # the sign fix removes the QR sign ambiguity so results are stable
    a = rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T


class FeatureExtractor:
    """Fixed four-layer convolutional feature pyramid.

    Each layer is a 3x3 stride-2 convolution with orthogonally
    initialised rows (scaled for leaky-relu variance preservation) and a
    leaky-relu activation. Weights are generated from the seed at
    construction and never trained. features() returns the maps after
    the second and fourth layers.
    """

    def __init__(self, in_channels=3, seed=DEFAULT_EXTRACTOR_SEED,
                 dtype=np.float32):
        if in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        rng = np.random.default_rng(seed)
        self.in_channels = int(in_channels)
        self.weights = []
        c_in = self.in_channels
        for c_out in EXTRACTOR_LADDER:
            flat = _orthogonal_rows(rng, c_out, c_in * 9) * _GAIN
            w = flat.reshape(c_out, c_in, 3, 3).astype(dtype)
            self.weights.append(Tensor(w))
            c_in = c_out
        self._zero_bias = [
            Tensor(np.zeros(c, dtype=dtype)) for c in EXTRACTOR_LADDER]

    def features(self, x):
        """Feature maps at two depths for a (N, C, H, W) tensor.

        H and W must be divisible by 16 so the four stride-2 layers
        halve cleanly.
        """
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(
                f"extractor expects {self.in_channels} channels, got {c}")
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError("spatial dims must be divisible by 16")
        cur = x
        maps = []
        for weight, bias in zip(self.weights, self._zero_bias):
            # asymmetric pad keeps 3x3 stride-2 an exact halving on even dims
            cur = ad.pad_spatial(cur, 0, 1, 0, 1)
            cur = ad.leaky_relu(
                ad.conv2d(cur, weight, bias, stride=2, pad=0), _LRELU_SLOPE)
            maps.append(cur)
        return maps[1], maps[3]


_extractor_cache = {}


def default_extractor(in_channels, dtype=np.float32):
    """Shared fixed-seed extractor for the given input layout."""
    key = (int(in_channels), np.dtype(dtype).str)
    if key not in _extractor_cache:
        _extractor_cache[key] = FeatureExtractor(in_channels, dtype=dtype)
    return _extractor_cache[key]


def _check_same_shape(pred, ref):
    if pred.shape != ref.shape:
        raise ValueError(
            f"pred shape {pred.shape} != ref shape {ref.shape}")


def mse_loss(pred, ref):
    """Mean over all elements of the squared difference."""
    _check_same_shape(pred, ref)
    diff = pred - ref
    return (diff * diff).mean()


def perceptual_proxy_loss(pred, ref, extractor=None):
    """Mean squared feature distance at two extractor depths, summed.

    Gradients flow to pred only; ref enters as a constant.
    """
    _check_same_shape(pred, ref)
    if extractor is None:
        extractor = default_extractor(pred.shape[1], pred.data.dtype)
    ref_maps = extractor.features(Tensor(ref.data))
    pred_maps = extractor.features(pred)
    loss = None
    for fp, fr in zip(pred_maps, ref_maps):
        d = fp - fr
        term = (d * d).mean()
        loss = term if loss is None else loss + term
    return loss


def kl_diag_gaussian(p, q):
    """KL(p || q) for diagonal Gaussians, summed over dims, batch-averaged.

    The first argument is the distribution the expectation is taken
    under. In the training objective that is the prior branch (computed
    from the input alone) and the second is the posterior branch. The
    variance ratio is formed as exp(logvar_p - logvar_q) so identical
    parameters give exactly zero.
    """
    if p.mu.shape != q.mu.shape:
        raise ValueError(
            f"distribution shapes differ: {p.mu.shape} vs {q.mu.shape}")
    log_ratio = q.logvar - p.logvar
    var_ratio = ad.exp(p.logvar - q.logvar)
    dmu = p.mu - q.mu
    quad = dmu * dmu * ad.exp(-q.logvar)
    per_dim = (log_ratio + var_ratio + quad - 1.0) * 0.5
    return per_dim.sum(axis=1).mean()


def boundary_loss(pred, ref, dm_weights):
    """Mean of |pred - ref| weighted by the detail mask.

    dm_weights is an (H, W) array shared by the whole batch, or a
    per-sample (N, 1, H, W) stack; either way it broadcasts over
    channels so only pixels near the shadow boundary contribute.
    """
    _check_same_shape(pred, ref)
    weights = np.asarray(dm_weights)
    if weights.ndim == 2:
        if weights.shape != pred.shape[2:]:
            raise ValueError(
                f"dm_weights shape {weights.shape} does not match "
                f"spatial dims {pred.shape[2:]}")
        weights = weights.reshape(1, 1, *weights.shape)
    elif weights.ndim == 4:
        expected = (pred.shape[0], 1) + pred.shape[2:]
        if weights.shape != expected:
            raise ValueError(
                f"dm_weights shape {weights.shape} does not match {expected}")
    else:
        raise ValueError("dm_weights must be (H, W) or (N, 1, H, W)")
    w = Tensor(weights.astype(pred.data.dtype))
    return (ad.absolute(pred - ref) * w).mean()


def combine_terms(w, l_e, l_m, l_s, l_b):
    """Weighted sum of the four terms in a fixed association order:

        total = alpha * l_e + beta * (l_m + l_s) + gamma_w * l_b

    Works on graph Tensors and on plain floats alike.
    """
    return l_e * w.alpha + (l_m + l_s) * w.beta + l_b * w.gamma_w


def total_loss(pred, ref, dists_prior, dists_post, dm_weights, w,
               extractor=None):
    """Full objective with every term reported.

    dists_prior and dists_post are (mean_dist, std_dist) pairs from the
    prior and posterior heads; each KL takes the prior-branch
    distribution first.
    """
    l_mse = mse_loss(pred, ref)
    l_perc = perceptual_proxy_loss(pred, ref, extractor)
    l_e = l_mse + l_perc * w.lambda_p
    l_m = kl_diag_gaussian(dists_prior[0], dists_post[0])
    l_s = kl_diag_gaussian(dists_prior[1], dists_post[1])
    l_b = boundary_loss(pred, ref, dm_weights)
    total = combine_terms(w, l_e, l_m, l_s, l_b)
    return LossBreakdown(l_e=l_e, l_mse=l_mse, l_perc=l_perc,
                         l_m=l_m, l_s=l_s, l_b=l_b, total=total)
