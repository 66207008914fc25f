"""Image containers, lossless file I/O, color conversion, cropping and error maps.

Images are stored channel-major (C, H, W) as floats in [0, 1]. Supported file
formats are PNG (8-bit gray/RGB, 16-bit gray) and binary PPM/PGM (8/16-bit);
everything else is rejected so round trips stay bit-exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

# sRGB -> XYZ (D65) matrix, documented to six decimals. The white point is the
# row sums of this matrix so that neutral grays map to a = b = 0 exactly.
_SRGB_TO_XYZ = np.array(
    [
        [0.412391, 0.357584, 0.180481],
        [0.212639, 0.715169, 0.072192],
        [0.019331, 0.119195, 0.950532],
    ],
    dtype=np.float64,
)
_WHITE_POINT = _SRGB_TO_XYZ.sum(axis=1)  # (0.950456, 1.000000, 1.089058)

_LAB_DELTA = 6.0 / 29.0


class ImagingError(Exception):
    """Raised for unreadable, unwritable, or unsupported image files."""


@dataclass
class ImagePlane:
    """H x W x C image, stored channel-major as float32 samples in [0, 1]."""

    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] not in (1, 3):
            raise ValueError(f"expected (C,H,W) with C in (1,3), got {d.shape}")
        if d.size == 0:
            raise ValueError("empty image")
        lo, hi = float(d.min()), float(d.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"samples outside [0,1]: min={lo}, max={hi}")
        self.data = d

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_hwc(cls, arr) -> "ImagePlane":
        """Build from an (H, W) or (H, W, C) array."""
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3:
            arr = np.moveaxis(arr, 2, 0)
        else:
            raise ValueError(f"expected 2D or 3D array, got shape {arr.shape}")
        return cls(arr)

    def to_hwc(self) -> np.ndarray:
        """Return an (H, W, C) float32 view-copy."""
        return np.moveaxis(self.data, 0, 2).copy()

    def gray(self) -> np.ndarray:
        """Rec.601 luminance as an (H, W) float64 array."""
        if self.channels == 1:
            return self.data[0].astype(np.float64)
        r, g, b = self.data.astype(np.float64)
        return 0.299 * r + 0.587 * g + 0.114 * b


@dataclass
class LabImage:
    """CIELAB planes: L in [0, 100], a/b signed chroma. Shape (H, W) each."""

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]

    def stack(self) -> np.ndarray:
        return np.stack([self.L, self.a, self.b])


@dataclass
class RegionMask:
    """Binary H x W mask; 1 marks the region of interest."""

    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2D, got {v.shape}")
        u = np.unique(v)
        if not np.isin(u, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.values = v.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# File I/O


def _read_netpbm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"(P[56])\s", raw)
    if m is None:
        raise ImagingError(f"{path}: not a binary PPM/PGM file")
    magic = m.group(1)
    # Header tokens (width, height, maxval), allowing '#' comments.
    tokens, pos = [], m.end()
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImagingError(f"{path}: truncated header")
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if maxval not in (255, 65535):
        raise ImagingError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.uint8
    count = width * height * channels
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if pixels.size != count:
        raise ImagingError(f"{path}: truncated pixel data")
    arr = pixels.reshape(height, width, channels).astype(np.float32) / maxval
    return arr


def _write_netpbm(path: str, hwc: np.ndarray, maxval: int) -> None:
    height, width, channels = hwc.shape
    magic = b"P6" if channels == 3 else b"P5"
    q = np.rint(hwc * maxval)
    q = q.astype(">u2" if maxval == 65535 else np.uint8)
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


def load_image(path: str) -> ImagePlane:
    """Load an 8/16-bit PNG or PPM/PGM, scaled to [0, 1] by the format max."""
    p = str(path)
    lower = p.lower()
    if lower.endswith((".ppm", ".pgm")):
        return ImagePlane.from_hwc(_read_netpbm(p))
    if not lower.endswith(".png"):
        raise ImagingError(f"{p}: unsupported format (PNG/PPM/PGM only)")
    try:
        img = Image.open(p)
        img.load()
    except Exception as exc:
        raise ImagingError(f"{p}: unreadable ({exc})") from exc
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32) / 255.0
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float32) / 255.0
    elif img.mode in ("I", "I;16"):
        raw = np.asarray(img).astype(np.float32)
        if raw.max(initial=0.0) > 65535:
            raise ImagingError(f"{p}: unsupported bit depth")
        arr = raw / 65535.0
    else:
        raise ImagingError(f"{p}: unsupported color type '{img.mode}'")
    return ImagePlane.from_hwc(arr)


def save_image(img: ImagePlane, path: str, bit_depth: int = 8) -> None:
    """Save to PNG or PPM/PGM. Round trip is exact to one quantization step."""
    p = str(path)
    lower = p.lower()
    if bit_depth not in (8, 16):
        raise ImagingError(f"unsupported bit depth {bit_depth}")
    hwc = img.to_hwc()
    if lower.endswith((".ppm", ".pgm")):
        _write_netpbm(p, hwc, 255 if bit_depth == 8 else 65535)
        return
    if not lower.endswith(".png"):
        raise ImagingError(f"{p}: unsupported format (PNG/PPM/PGM only)")
    try:
        if bit_depth == 8:
            q = np.rint(hwc * 255.0).astype(np.uint8)
            pil = Image.fromarray(q[:, :, 0] if img.channels == 1 else q)
        else:
            if img.channels != 1:
                raise ImagingError("16-bit PNG supported for grayscale only")
            q = np.rint(hwc[:, :, 0] * 65535.0).astype(np.uint16)
            pil = Image.fromarray(q)
        pil.save(p, format="PNG")
    except ImagingError:
        raise
    except Exception as exc:
        raise ImagingError(f"{p}: unwritable ({exc})") from exc


def load_mask(path: str) -> RegionMask:
    """Load a binary mask image; any sample >= 0.5 counts as foreground."""
    img = load_image(path)
    return RegionMask((img.data[0] >= 0.5).astype(np.uint8))


def save_mask(mask: RegionMask, path: str) -> None:
    save_image(ImagePlane(mask.values[None].astype(np.float32)), path)


# ---------------------------------------------------------------------------
# Color conversion


def srgb_to_lab(img: ImagePlane) -> LabImage:
    """sRGB -> linear RGB (D65) -> XYZ -> CIELAB. L lands in [0, 100]."""
    if img.channels != 3:
        raise ValueError(f"srgb_to_lab needs 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, lin)
    t = xyz / _WHITE_POINT[:, None, None]
    f = np.where(
        t > _LAB_DELTA**3,
        np.cbrt(t),
        t / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0,
    )
    L = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return LabImage(L, a, b)


# ---------------------------------------------------------------------------
# Cropping and resizing


def crop(img: ImagePlane, x0: int, y0: int, w: int, h: int) -> ImagePlane:
    """Exact sub-rectangle copy; (x0, y0) is the top-left column/row."""
    if x0 < 0 or y0 < 0 or w < 1 or h < 1:
        raise ValueError("crop window must be positive and inside bounds")
    if y0 + h > img.height or x0 + w > img.width:
        raise ValueError(
            f"crop window ({x0},{y0},{w},{h}) exceeds {img.width}x{img.height}"
        )
    return ImagePlane(img.data[:, y0 : y0 + h, x0 : x0 + w].copy())


def random_crop(img: ImagePlane, size: int, seed) -> ImagePlane:
    """Seeded random square crop; identical seed gives identical offsets."""
    if img.height < size or img.width < size:
        raise ValueError(f"image {img.width}x{img.height} smaller than crop {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x0 = int(rng.integers(0, img.width - size + 1))
    y0 = int(rng.integers(0, img.height - size + 1))
    return crop(img, x0, y0, size, size)


def resize_bilinear(img: ImagePlane, out_h: int, out_w: int) -> ImagePlane:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    c, h, w = img.data.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    d = img.data.astype(np.float64)
    top = d[:, y0[:, None], x0[None, :]] * (1 - wx) + d[:, y0[:, None], x1[None, :]] * wx
    bot = d[:, y1[:, None], x0[None, :]] * (1 - wx) + d[:, y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bot * wy
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Error maps

# Monotone-luminance ramp, dark blue -> teal -> green -> yellow. Linear
# interpolation between these anchors yields the fixed 256-entry table.
_COLORMAP_ANCHORS = [
    (0.000, (0.050, 0.030, 0.200)),
    (0.170, (0.130, 0.180, 0.480)),
    (0.330, (0.130, 0.380, 0.560)),
    (0.500, (0.120, 0.560, 0.500)),
    (0.670, (0.300, 0.730, 0.300)),
    (0.830, (0.750, 0.850, 0.180)),
    (1.000, (0.990, 0.980, 0.700)),
]


def _build_colormap() -> np.ndarray:
    pos = np.array([p for p, _ in _COLORMAP_ANCHORS])
    cols = np.array([c for _, c in _COLORMAP_ANCHORS])
    x = np.arange(256) / 255.0
    table = np.stack([np.interp(x, pos, cols[:, k]) for k in range(3)], axis=1)
    return table.astype(np.float32)


ERROR_COLORMAP = _build_colormap()  # (256, 3) in [0, 1]


def error_magnitude(pred: ImagePlane, ref: ImagePlane) -> np.ndarray:
    """Per-pixel mean absolute channel difference scaled to [0, 255]."""
    if pred.data.shape != ref.data.shape:
        raise ValueError(
            f"dimension mismatch: {pred.data.shape} vs {ref.data.shape}"
        )
    diff = np.abs(pred.data.astype(np.float64) - ref.data.astype(np.float64))
    return np.clip(diff.mean(axis=0) * 255.0, 0.0, 255.0)


def render_error_map(pred: ImagePlane, ref: ImagePlane) -> ImagePlane:
    """Map the error magnitude through the fixed colormap to a 3-channel image.

    The 0..255 scale is reported by the caller (no colorbar is embedded).
    """
    mag = error_magnitude(pred, ref)
    idx = np.rint(mag).astype(np.int64)
    rgb = ERROR_COLORMAP[idx]  # (H, W, 3)
    return ImagePlane(np.moveaxis(rgb, 2, 0))
