"""Paired shadow / shadow-free data synthesis.

A shadow-free image is darkened with a per-channel affine shade model
(divide by gamma, subtract a channel offset), then blended with the
original under a soft matte.  Matte values of 1 mark the umbra, values
strictly between 0 and 1 the penumbra band, and 0 the lit region.

Mattes come either from files or from a seeded procedural generator
(random star-shaped polygon, optionally Gaussian-blurred to create a
penumbra).  ``generate_dataset`` turns a manifest of such recipes into
shadow images, binary masks, and mattes on disk, plus a JSON-lines
index; re-running the same manifest is byte-identical.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import (
    ImagePlane,
    ImagingError,
    RegionMask,
    load_image,
    resize_bilinear,
    save_image,
    save_mask,
)

# default sampling ranges for random shade parameters; overridable via config
GAMMA_RANGE = (1.5, 3.0)
ALPHA_RANGE = (0.0, 0.1)

BINARIZE_THRESHOLD = 0.5


@dataclass
class ShadowMatte:
    """Soft shadow matte on the pixel grid, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("matte must be 2-D (H, W)")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("matte values must lie in [0, 1]")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class AffineShadeParams:
    """Shade model parameters: scale ``gamma`` and per-channel offset ``alpha``."""

    gamma: float
    alpha: tuple

    def __post_init__(self):
        self.gamma = float(self.gamma)
        self.alpha = tuple(float(a) for a in self.alpha)
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1 (shadows darken)")
        if len(self.alpha) != 3:
            raise ValueError("alpha must have exactly 3 channel offsets")
        if any(a < 0.0 or a >= 1.0 for a in self.alpha):
            raise ValueError("alpha offsets must lie in [0, 1)")


@dataclass
class SynthesisManifestEntry:
    """One dataset recipe: a shadow-free image plus a matte source and params.

    Exactly one of ``matte`` (a file path) or ``procedural`` (a dict with
    ``seed`` and ``blur_sigma``) must be given.
    """

    shadow_free: str
    gamma: float
    alpha: tuple
    matte: str = None
    procedural: dict = None

    def __post_init__(self):
        if (self.matte is None) == (self.procedural is None):
            raise ValueError("entry needs exactly one of 'matte' or 'procedural'")
        if self.procedural is not None:
            missing = {"seed", "blur_sigma"} - set(self.procedural)
            if missing:
                raise ValueError(f"procedural entry missing {sorted(missing)}")
        # validate ranges up front so bad manifests fail before any I/O
        AffineShadeParams(self.gamma, self.alpha)

    def params(self):
        return AffineShadeParams(self.gamma, self.alpha)

    def to_json(self):
        rec = {
            "shadow_free": self.shadow_free,
            "gamma": self.gamma,
            "alpha": list(self.alpha),
        }
        if self.matte is not None:
            rec["matte"] = self.matte
        else:
            rec["procedural"] = {
                "seed": int(self.procedural["seed"]),
                "blur_sigma": float(self.procedural["blur_sigma"]),
            }
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed manifest line: {exc}") from exc
        if not isinstance(rec, dict):
            raise ValueError("manifest line must be a JSON object")
        try:
            return cls(
                shadow_free=rec["shadow_free"],
                gamma=rec["gamma"],
                alpha=tuple(rec["alpha"]),
                matte=rec.get("matte"),
                procedural=rec.get("procedural"),
            )
        except KeyError as exc:
            raise ValueError(f"manifest entry missing field {exc}") from exc


@dataclass
class GenerationSummary:
    total: int = 0
    written: int = 0
    failures: list = field(default_factory=list)
    index_path: str = ""

    def to_dict(self):
        return {
            "total": self.total,
            "written": self.written,
            "failures": [{"entry": i, "error": msg} for i, msg in self.failures],
            "index": self.index_path,
        }


def shade(x_sf, p):
    """Apply the affine shade model to a shadow-free image.

    Each channel k maps as x_sf / gamma - alpha_k / gamma, then the result
    is clamped to [0, 1].  Before clamping, alpha_k + gamma * x recovers
    the input exactly.

    Parameters
    ----------
    x_sf : ImagePlane
        3-channel shadow-free image.
    p : AffineShadeParams

    Returns
    -------
    ImagePlane
        Fully shaded image (the look inside the umbra).
    """
    if p.gamma <= 0:
        raise ValueError("gamma must be positive")
    if x_sf.channels != 3:
        raise ValueError("shade expects a 3-channel image")
    alpha = np.asarray(p.alpha, dtype=np.float32).reshape(3, 1, 1)
    out = x_sf.data / np.float32(p.gamma) - alpha / np.float32(p.gamma)
    return ImagePlane(np.clip(out, 0.0, 1.0))


def composite(x_sf, x_shade, m):
    """Blend shadow-free and shaded images under a matte.

    Per pixel and channel: (1 - m) * x_sf + m * x_shade, i.e. the matte
    is the shaded image's opacity.
    """
    if x_sf.data.shape != x_shade.data.shape:
        raise ValueError("image dimensions must match")
    if (m.height, m.width) != (x_sf.height, x_sf.width):
        raise ValueError("matte dimensions must match the images")
    mv = m.values[None, :, :]
    out = (1.0 - mv) * x_sf.data + mv * x_shade.data
    return ImagePlane(np.clip(out.astype(np.float32), 0.0, 1.0))


def _fill_polygon(xs, ys, h, w):
    # even-odd scanline fill sampled at pixel centers
    out = np.zeros((h, w), dtype=np.float32)
    n = len(xs)
    for j in range(h):
        y = j + 0.5
        crossings = []
        for k in range(n):
            x0, y0 = xs[k], ys[k]
            x1, y1 = xs[(k + 1) % n], ys[(k + 1) % n]
            # half-open span so a vertex shared by two edges counts once
            if (y0 <= y < y1) or (y1 <= y < y0):
                t = (y - y0) / (y1 - y0)
                crossings.append(x0 + t * (x1 - x0))
        crossings.sort()
        for a, b in zip(crossings[::2], crossings[1::2]):
            i0 = max(0, int(np.ceil(a - 0.5)))
            i1 = min(w, int(np.ceil(b - 0.5)))
            if i1 > i0:
                out[j, i0:i1] = 1.0
    return out


def procedural_matte(h, w, seed, blur_sigma=3.0):
    """Generate a seeded random polygon matte with an optional penumbra.

    A star-shaped polygon (5 to 10 vertices at sorted angles around a
    random center) is rasterized to {0, 1}; a Gaussian blur of
    ``blur_sigma`` pixels then widens the edge into a penumbra band.
    ``blur_sigma=0`` keeps the matte binary.  Deterministic per seed.
    """
    if h < 8 or w < 8:
        raise ValueError("matte dimensions must be at least 8x8")
    if blur_sigma < 0:
        raise ValueError("blur_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 11))
    cx = rng.uniform(0.25 * w, 0.75 * w)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    rmax = 0.45 * min(h, w)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    radii = rng.uniform(0.35, 1.0, n) * rmax
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    m = _fill_polygon(xs, ys, h, w)
    if blur_sigma > 0:
        m = ndimage.gaussian_filter(m, sigma=blur_sigma)
        m = np.clip(m, 0.0, 1.0)
    return ShadowMatte(m.astype(np.float32))


def binarize_matte(m, threshold=BINARIZE_THRESHOLD):
    """Threshold a soft matte to a binary region mask; ties map to shadow."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    return RegionMask((m.values >= threshold).astype(np.uint8))


def load_manifest(path):
    """Read a JSON-lines manifest; blank lines are skipped."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(SynthesisManifestEntry.from_json(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: {exc}") from exc
    return entries


def save_manifest(entries, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def _load_matte_file(path):
    img = load_image(path)
    values = img.data[0] if img.channels == 1 else img.gray()
    return ShadowMatte(values)


def _render_entry(entry, h, w):
    # matte source priority: explicit file, else procedural generator
    if entry.matte is not None:
        matte = _load_matte_file(entry.matte)
        if (matte.height, matte.width) != (h, w):
            plane = ImagePlane(matte.values[None, :, :])
            matte = ShadowMatte(resize_bilinear(plane, h, w).data[0])
    else:
        matte = procedural_matte(
            h, w, int(entry.procedural["seed"]), float(entry.procedural["blur_sigma"])
        )
    return matte


def generate_dataset(entries, out_dir, jobs=1):
    """Render every manifest entry into ``out_dir`` and write an index.

    Each entry produces ``NNNNN_shadow.png``, ``NNNNN_mask.png`` (matte
    thresholded at 0.5), and ``NNNNN_matte.png``.  The index
    ``index.jsonl`` lists one {shadow, shadow_free, mask, matte} object
    per successful entry, all paths relative to ``out_dir`` (including
    the shadow-free input, so the index resolves from any directory).

    Failures are recorded per entry and do not stop the run.  Output is
    byte-identical across re-runs of the same manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    summary = GenerationSummary(total=len(entries))
    records = [None] * len(entries)

    def render(i, entry):
        x_sf = load_image(entry.shadow_free)
        matte = _render_entry(entry, x_sf.height, x_sf.width)
        shaded = shade(x_sf, entry.params())
        x_s = composite(x_sf, shaded, matte)
        mask = binarize_matte(matte)
        names = {
            "shadow": f"{i:05d}_shadow.png",
            "mask": f"{i:05d}_mask.png",
            "matte": f"{i:05d}_matte.png",
        }
        save_image(x_s, os.path.join(out_dir, names["shadow"]))
        save_mask(mask, os.path.join(out_dir, names["mask"]))
        save_image(
            ImagePlane(matte.values[None, :, :]), os.path.join(out_dir, names["matte"])
        )
        return {
            "shadow": names["shadow"],
            # stored relative to out_dir so the index resolves from any cwd
            "shadow_free": os.path.relpath(os.path.abspath(entry.shadow_free),
                                           os.path.abspath(out_dir)),
            "mask": names["mask"],
            "matte": names["matte"],
        }

    def run_one(i, entry):
        try:
            records[i] = render(i, entry)
        except (ImagingError, ValueError, OSError) as exc:
            summary.failures.append((i, str(exc)))

    if jobs > 1 and len(entries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(lambda pair: run_one(*pair), enumerate(entries)))
        summary.failures.sort(key=lambda f: f[0])
    else:
        for i, entry in enumerate(entries):
            run_one(i, entry)

    index_path = os.path.join(out_dir, "index.jsonl")
    with open(index_path, "w", encoding="utf-8") as fh:
        for rec in records:
            if rec is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary.written = sum(rec is not None for rec in records)
    summary.index_path = index_path
    return summary


def sample_shade_params(rng, gamma_range=GAMMA_RANGE, alpha_range=ALPHA_RANGE):
    """Draw random shade parameters from uniform ranges."""
    gamma = float(rng.uniform(*gamma_range))
    alpha = tuple(float(a) for a in rng.uniform(alpha_range[0], alpha_range[1], 3))
    return AffineShadeParams(gamma, alpha)
