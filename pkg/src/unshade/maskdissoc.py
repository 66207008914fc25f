"""Mask dissociation: split a binary shadow mask into body and detail masks.

The split is driven by the exact Euclidean distance transform.  Each
foreground pixel's distance to the nearest background pixel is
normalized by the foreground maximum to give a field in [0, 1]; the
body mask is that field inside the mask and the detail mask is its
complement inside the mask.  Interior pixels are body-heavy, boundary
pixels detail-heavy, and body + detail reproduces the original mask
exactly on every pixel.
"""

from dataclasses import dataclass

import numpy as np

from .imaging import RegionMask


@dataclass
class DistanceField:
    """Per-pixel Euclidean distance (in pixels) to the nearest background pixel."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("distance field must be 2-D (H, W)")
        if d.min() < 0:
            raise ValueError("distances must be non-negative")
        self.d = d

    @property
    def height(self):
        return self.d.shape[0]

    @property
    def width(self):
        return self.d.shape[1]


@dataclass
class MaskPair:
    """Complementary body/detail masks whose sum is the original binary mask."""

    body: np.ndarray
    detail: np.ndarray

    def __post_init__(self):
        if self.body.shape != self.detail.shape:
            raise ValueError("body and detail shapes must match")
        for name, arr in (("body", self.body), ("detail", self.detail)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")


def _edt_1d_sq(f):
    """1-D squared-distance transform via the lower envelope of parabolas.

    ``f`` holds squared source distances per cell (np.inf for cells with
    no source).  Returns min_q (i - q)^2 + f[q] for every cell i.
    """
    n = f.shape[0]
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return np.full(n, np.inf)
    v = np.zeros(finite.size, dtype=np.intp)  # sites of envelope parabolas
    z = np.empty(finite.size + 1, dtype=np.float64)  # boundaries between them
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    k = 0
    for q in finite[1:]:
        # intersection of parabola at q with the current rightmost one
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    d = np.empty(n, dtype=np.float64)
    k = 0
    for i in range(n):
        while z[k + 1] < i:
            k += 1
        d[i] = (i - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(mask):
    """Exact Euclidean distance transform of a binary mask.

    Returns 0 on background pixels and, on each foreground pixel, the
    true (not chamfer-approximated) Euclidean distance to the nearest
    background pixel.

    Raises
    ------
    ValueError
        If the mask has no background pixel ("no background reference").
    """
    m = mask.values
    if m.all():
        raise ValueError("no background reference: mask has no background pixel")
    # squared distances; two separable passes keep them exact integers
    sq = np.where(m == 0, 0.0, np.inf)
    for j in range(sq.shape[1]):
        sq[:, j] = _edt_1d_sq(sq[:, j])
    for i in range(sq.shape[0]):
        sq[i, :] = _edt_1d_sq(sq[i, :])
    return DistanceField(np.sqrt(sq))


def dissociate(mask):
    """Split a binary mask into body and detail masks.

    The distance field is normalized by its maximum to Î in [0, 1]
    (all zeros when the mask is empty); body = mask * Î and
    detail = mask - body.  Computing detail by subtraction in float32
    makes body + detail == mask hold exactly, pixel for pixel.
    """
    field = distance_transform(mask)
    dmax = field.d.max()
    ihat = field.d / dmax if dmax > 0 else np.zeros_like(field.d)
    fg = mask.values.astype(np.float32)
    body = (mask.values * ihat).astype(np.float32)
    detail = fg - body
    return MaskPair(body, detail)


def weighted_detail_mask(pair):
    """Per-pixel boundary-loss weights: the detail mask values themselves.

    Kept as a named operation so other weighting schemes can be swapped
    in behind the same contract.
    """
    return pair.detail.copy()
