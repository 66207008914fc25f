"""Region-wise image quality metrics and model complexity accounting.

Metrics take (C, H, W) ImagePlanes in [0, 1] and an optional binary region
mask. Dataset evaluation reports PSNR / SSIM / LAB color error over the
shadow region (S), the non-shadow region (NS), and the full image (ALL),
plus the no-reference NRSS sharpness score per image; complexity accounting
covers exact parameter counts, a documented FLOP convention, and wall-clock
throughput.

The "rmse" column follows the shadow-removal literature's convention: the
default is the mean absolute difference over the three CIELAB channels
(reported as mode "mae-lab"); a true root-mean-square is available behind
a flag (mode "rmse-lab"). Aggregate JSON always reports both so the
convention is never ambiguous.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .imaging import (
    ImagePlane,
    RegionMask,
    load_image,
    load_mask,
    render_error_map,
    error_magnitude,
    resize_bilinear,
    save_image,
    srgb_to_lab,
)
from .trainer import load_training_index

# SSIM windowing constants (Gaussian-weighted local statistics).
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

# NRSS constants: reference-blur kernel, block geometry, ranked block count.
# The metric's published description leaves these unspecified; they are fixed
# here and echoed into every aggregate report.
NRSS_BLUR_SIZE = 7
NRSS_BLUR_SIGMA = 1.5
NRSS_BLOCK = 8
NRSS_BLOCKS = 64
NRSS_MIN_SIDE = NRSS_BLOCK * 8  # guarantees at least NRSS_BLOCKS whole tiles

REGIONS = ("S", "NS", "ALL")
# "Parity" matches the literature's reporting convention, where the quantity
# called RMSE is the mean absolute LAB difference; "strict" is a true RMSE.
RMSE_MODE_PARITY = "mae-lab"
RMSE_MODE_STRICT = "rmse-lab"

CSV_HEADER = ("image_id", "region", "psnr", "ssim", "rmse", "rmse_mode", "nrss")
METRICS_CSV = "metrics.csv"
SUMMARY_JSON = "summary.json"
PREDICTIONS_DIR = "predictions"
ERROR_MAP_DIR = "error_maps"


# ---------------------------------------------------------------------------
# Reference metrics


def _check_pair(pred, ref):
    if pred.data.shape != ref.data.shape:
        raise ValueError(
            f"dimension mismatch: {pred.data.shape} vs {ref.data.shape}"
        )


def _region_selector(img, mask):
    if (mask.height, mask.width) != (img.height, img.width):
        raise ValueError(
            f"mask {mask.width}x{mask.height} does not match "
            f"image {img.width}x{img.height}"
        )
    sel = mask.values.astype(bool)
    if not sel.any():
        raise ValueError("empty region: mask selects no pixels")
    return sel


def psnr(pred, ref, mask=None):
    """Peak signal-to-noise ratio in dB for a unit dynamic range.

    MSE runs over all channels of the selected pixels (all pixels without a
    mask). Identical inputs hit MSE = 0 and return the +infinity sentinel.
    """
    _check_pair(pred, ref)
    diff = pred.data.astype(np.float64) - ref.data.astype(np.float64)
    # both branches reduce over a C-ordered (C, N) layout so a full mask is
    # bitwise identical to no mask (boolean indexing returns Fortran order,
    # which would change the summation association)
    if mask is not None:
        diff = np.ascontiguousarray(diff[:, _region_selector(pred, mask)])
    else:
        diff = diff.reshape(diff.shape[0], -1)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def _gaussian_taps(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _window_filter(img, taps):
    # separable correlation over fully interior windows only, so boundary
    # handling never enters the statistics
    v = sliding_window_view(img, taps.size, axis=0) @ taps
    return sliding_window_view(v, taps.size, axis=1) @ taps


def _ssim_map(x, y):
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    mx = _window_filter(x, taps)
    my = _window_filter(y, taps)
    vx = _window_filter(x * x, taps) - mx * mx
    vy = _window_filter(y * y, taps) - my * my
    cxy = _window_filter(x * y, taps) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(pred, ref, mask=None):
    """Mean local structural similarity on Rec.601 luminance.

    Local statistics use a Gaussian-weighted 11x11 window (sd 1.5,
    K1 = 0.01, K2 = 0.03, unit dynamic range) evaluated at every fully
    interior position. The masked variant averages the positions whose
    window centers fall inside the region.
    """
    _check_pair(pred, ref)
    h, w = pred.height, pred.width
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {w}x{h} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    smap = _ssim_map(pred.gray(), ref.gray()).ravel()
    if mask is None:
        return float(smap.mean())
    sel = _region_selector(pred, mask)
    half = SSIM_WINDOW // 2
    centers = sel[half : h - half, half : w - half].ravel()
    if not centers.any():
        raise ValueError("empty region: no SSIM window centers in the mask")
    return float(smap[centers].mean())


def rmse_lab(pred, ref, mask=None, strict=False):
    """Color error in CIELAB over the selected pixels.

    Default mode is the mean absolute difference over the three LAB
    channels — what shadow-removal result tables conventionally label
    "RMSE". strict=True computes a true root mean square instead.
    """
    _check_pair(pred, ref)
    if pred.channels != 3:
        raise ValueError(f"LAB error needs 3 channels, got {pred.channels}")
    d = srgb_to_lab(pred).stack() - srgb_to_lab(ref).stack()
    if mask is not None:
        d = np.ascontiguousarray(d[:, _region_selector(pred, mask)])
    else:
        d = d.reshape(d.shape[0], -1)
    if strict:
        return float(np.sqrt(np.mean(d * d)))
    return float(np.mean(np.abs(d)))


# ---------------------------------------------------------------------------
# No-reference sharpness


def _sobel_magnitude(lum):
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def _block_ssim(a, b):
    # SSIM from whole-block moments: a single uniform window spanning each
    # 8x8 block, same K1/K2/range constants as the windowed metric
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    ma = a.mean(axis=1)
    mb = b.mean(axis=1)
    va = a.var(axis=1)
    vb = b.var(axis=1)
    cov = (a * b).mean(axis=1) - ma * mb
    return ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / (
        (ma * ma + mb * mb + c1) * (va + vb + c2)
    )


def nrss(img):
    """No-reference structural sharpness of a single image.

    Builds a low-pass reference with a 7x7 Gaussian blur (sd 1.5), takes
    Sobel gradient magnitudes of both, tiles them into non-overlapping 8x8
    blocks, and keeps the 64 blocks with the highest gradient variance
    (ties broken toward lower block index). The score is
    1 - mean block SSIM between the two gradient maps: blur changes a sharp
    image's gradients a lot, so sharper images score higher.
    """
    lum = img.gray()
    h, w = lum.shape
    if h < NRSS_MIN_SIDE or w < NRSS_MIN_SIDE:
        raise ValueError(
            f"image {w}x{h} smaller than {NRSS_MIN_SIDE}x{NRSS_MIN_SIDE}"
        )
    radius = NRSS_BLUR_SIZE // 2
    blurred = ndimage.gaussian_filter(
        lum, NRSS_BLUR_SIGMA, truncate=radius / NRSS_BLUR_SIGMA
    )
    g_img = _sobel_magnitude(lum)
    g_blur = _sobel_magnitude(blurred)
    bh, bw = h // NRSS_BLOCK, w // NRSS_BLOCK

    def tiles(g):
        t = g[: bh * NRSS_BLOCK, : bw * NRSS_BLOCK]
        t = t.reshape(bh, NRSS_BLOCK, bw, NRSS_BLOCK).swapaxes(1, 2)
        return t.reshape(bh * bw, NRSS_BLOCK * NRSS_BLOCK)

    t_img = tiles(g_img)
    order = np.argsort(-t_img.var(axis=1), kind="stable")[:NRSS_BLOCKS]
    scores = _block_ssim(t_img[order], tiles(g_blur)[order])
    return float(1.0 - scores.mean())


# ---------------------------------------------------------------------------
# Per-image records


@dataclass(frozen=True)
class RegionScores:
    """One region's metrics; both LAB-error conventions are kept."""

    psnr: float
    ssim: float
    rmse_mae: float
    rmse_strict: float


@dataclass(frozen=True)
class MetricsRecord:
    """All regions of one image plus its no-reference sharpness."""

    image_id: str
    shadow: RegionScores
    non_shadow: RegionScores
    all_image: RegionScores
    nrss: float
    rmse_mode: str
    shadow_pixels: int
    non_shadow_pixels: int

    def region(self, name):
        return {
            "S": self.shadow,
            "NS": self.non_shadow,
            "ALL": self.all_image,
        }[name]

    def rmse_of(self, scores):
        if self.rmse_mode == RMSE_MODE_STRICT:
            return scores.rmse_strict
        return scores.rmse_mae


def _region_scores(pred, ref, mask):
    return RegionScores(
        psnr=psnr(pred, ref, mask),
        ssim=ssim(pred, ref, mask),
        rmse_mae=rmse_lab(pred, ref, mask),
        rmse_strict=rmse_lab(pred, ref, mask, strict=True),
    )


def compute_record(pred, ref, mask, image_id="", strict_rmse=False):
    """Score one prediction against its reference over S / NS / ALL."""
    inverse = RegionMask(1 - mask.values)
    return MetricsRecord(
        image_id=image_id,
        shadow=_region_scores(pred, ref, mask),
        non_shadow=_region_scores(pred, ref, inverse),
        all_image=_region_scores(pred, ref, None),
        nrss=nrss(pred),
        rmse_mode=RMSE_MODE_STRICT if strict_rmse else RMSE_MODE_PARITY,
        shadow_pixels=int(mask.values.sum()),
        non_shadow_pixels=int(inverse.values.sum()),
    )


def _fmt(v):
    return repr(float(v))


def record_rows(record):
    """CSV rows for one record; nrss appears on the ALL row only."""
    rows = []
    for name in REGIONS:
        s = record.region(name)
        rows.append(
            (
                record.image_id,
                name,
                _fmt(s.psnr),
                _fmt(s.ssim),
                _fmt(record.rmse_of(s)),
                record.rmse_mode,
                _fmt(record.nrss) if name == "ALL" else "",
            )
        )
    return rows


def _region_means(records):
    out = {}
    for name in REGIONS:
        scores = [r.region(name) for r in records]
        out[name] = {
            "psnr": float(np.mean([s.psnr for s in scores])) if scores else None,
            "ssim": float(np.mean([s.ssim for s in scores])) if scores else None,
            "rmse_mae": (
                float(np.mean([s.rmse_mae for s in scores])) if scores else None
            ),
            "rmse_strict": (
                float(np.mean([s.rmse_strict for s in scores])) if scores else None
            ),
        }
    return out


# ---------------------------------------------------------------------------
# Dataset evaluation


@dataclass(frozen=True)
class EvalRunResult:
    records: tuple
    failures: tuple  # (image_id, message) pairs, index order
    csv_path: str
    json_path: str
    summary: dict


def _entry_task(args):
    """Score one dataset entry from files; exceptions become failure rows.

    Module-level and tuple-argumented so a process pool can run it.
    """
    (image_id, pred_path, ref_path, mask_path, strict, resize_to, errmap_path) = args
    try:
        pred = load_image(pred_path)
        ref = load_image(ref_path)
        mask = load_mask(mask_path)
        if resize_to is not None:
            pred = resize_bilinear(pred, resize_to, resize_to)
            ref = resize_bilinear(ref, resize_to, resize_to)
            scaled = resize_bilinear(
                ImagePlane(mask.values[None].astype(np.float32)),
                resize_to,
                resize_to,
            )
            mask = RegionMask((scaled.data[0] >= 0.5).astype(np.uint8))
        elif pred.data.shape[1:] != ref.data.shape[1:]:
            pred = resize_bilinear(pred, ref.height, ref.width)
        record = compute_record(pred, ref, mask, image_id, strict)
        if errmap_path is not None:
            save_image(render_error_map(pred, ref), errmap_path)
            scale = float(error_magnitude(pred, ref).max())
            with open(errmap_path + ".json", "w", encoding="utf-8") as fh:
                json.dump({"image_id": image_id, "max_error_255": scale}, fh)
                fh.write("\n")
        return record, None
    except Exception as exc:  # per-entry failures are recorded, not fatal
        return None, (image_id, f"{type(exc).__name__}: {exc}")


def _find_prediction(pred_dir, image_id):
    for ext in (".png", ".ppm", ".pgm"):
        candidate = os.path.join(pred_dir, image_id + ext)
        if os.path.isfile(candidate):
            return candidate
    raise FileNotFoundError(f"no prediction for '{image_id}' in {pred_dir}")


def evaluate_dataset(
    index_path,
    out_dir,
    model=None,
    pred_dir=None,
    strict_rmse=False,
    resize_to=None,
    write_error_maps=False,
    jobs=1,
    seed=0,
):
    """Score every index entry; write metrics.csv + summary.json to out_dir.

    Predictions come from pred_dir (files named by the shadow image's stem)
    or are materialized by running the model on each entry's shadow image
    (16-bit files under out_dir/predictions, inference seeded per entry as
    seed + position). Per-entry failures are recorded in the summary and
    the run continues. Scoring parallelizes over entries when jobs > 1;
    prediction materialization stays serial.
    """
    if (model is None) == (pred_dir is None):
        raise ValueError("provide exactly one of model or pred_dir")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    entries = load_training_index(index_path, allow_empty=True)
    ids = [os.path.splitext(os.path.basename(e.shadow))[0] for e in entries]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise ValueError(f"duplicate image ids in index: {sorted(dup)}")
    os.makedirs(out_dir, exist_ok=True)
    if write_error_maps:
        os.makedirs(os.path.join(out_dir, ERROR_MAP_DIR), exist_ok=True)

    failures = []
    tasks = []
    if model is not None:
        pred_of = _materialize_predictions(entries, ids, model, out_dir, seed, failures)
    else:
        pred_of = {}
        for image_id in ids:
            try:
                pred_of[image_id] = _find_prediction(pred_dir, image_id)
            except FileNotFoundError as exc:
                failures.append((image_id, f"FileNotFoundError: {exc}"))
    for image_id, entry in zip(ids, entries):
        if image_id not in pred_of:
            continue
        errmap_path = (
            os.path.join(out_dir, ERROR_MAP_DIR, image_id + ".png")
            if write_error_maps
            else None
        )
        tasks.append(
            (
                image_id,
                pred_of[image_id],
                entry.shadow_free,
                entry.mask,
                strict_rmse,
                resize_to,
                errmap_path,
            )
        )

    if jobs > 1 and tasks:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_entry_task, tasks))
    else:
        outcomes = [_entry_task(t) for t in tasks]
    records = []
    for record, failure in outcomes:
        if failure is not None:
            failures.append(failure)
        else:
            records.append(record)

    mode = RMSE_MODE_STRICT if strict_rmse else RMSE_MODE_PARITY
    csv_path = os.path.join(out_dir, METRICS_CSV)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for record in records:
            for row in record_rows(record):
                fh.write(",".join(row) + "\n")

    summary = {
        "images": len(records),
        "failures": [{"image_id": i, "error": m} for i, m in failures],
        "rmse_mode": mode,
        "regions": _region_means(records),
        "nrss": float(np.mean([r.nrss for r in records])) if records else None,
        "config": {
            "index": os.path.abspath(index_path),
            "source": "model" if model is not None else "predictions",
            "jobs": jobs,
            "seed": seed,
            "resize_to": resize_to,
            "resize_filter": "bilinear",
            "ssim_window": SSIM_WINDOW,
            "ssim_sigma": SSIM_SIGMA,
            "ssim_k1": SSIM_K1,
            "ssim_k2": SSIM_K2,
            "nrss_blur_size": NRSS_BLUR_SIZE,
            "nrss_blur_sigma": NRSS_BLUR_SIGMA,
            "nrss_block": NRSS_BLOCK,
            "nrss_blocks": NRSS_BLOCKS,
        },
    }
    json_path = os.path.join(out_dir, SUMMARY_JSON)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EvalRunResult(
        records=tuple(records),
        failures=tuple(failures),
        csv_path=csv_path,
        json_path=json_path,
        summary=summary,
    )


def _materialize_predictions(entries, ids, model, out_dir, seed, failures):
    """Run MAP inference per entry; 16-bit prediction files keep precision."""
    pred_root = os.path.join(out_dir, PREDICTIONS_DIR)
    os.makedirs(pred_root, exist_ok=True)
    pred_of = {}
    for position, (image_id, entry) in enumerate(zip(ids, entries)):
        try:
            image = load_image(entry.shadow)
            result = model.infer_map(image, seed=seed + position)
            path = os.path.join(pred_root, image_id + ".ppm")
            save_image(result.best, path, bit_depth=16)
            pred_of[image_id] = path
        except Exception as exc:  # recorded, run continues
            failures.append((image_id, f"{type(exc).__name__}: {exc}"))
    return pred_of


# ---------------------------------------------------------------------------
# Complexity accounting


@dataclass(frozen=True)
class ComplexityReport:
    """Parameter/FLOP accounting plus serial wall-clock timing."""

    params: int
    params_all: int
    flops: int
    height: int
    width: int
    k_samples: int
    runs: int
    ms_mean: float
    ms_std: float
    fps: float

    def as_dict(self):
        return {
            "params": self.params,
            "params_all": self.params_all,
            "flops": self.flops,
            "height": self.height,
            "width": self.width,
            "k_samples": self.k_samples,
            "runs": self.runs,
            "ms_mean": self.ms_mean,
            "ms_std": self.ms_std,
            "fps": self.fps,
        }


def count_params(model, include_training_branch=False):
    """Exact parameter element count.

    The posterior branch (separate 6-channel encoder + posterior heads)
    only exists during training, so it is excluded by default; the headline
    figure is the deployed inference network.
    """
    skip = not include_training_branch
    return sum(
        p.data.size
        for name, p in model.params.items()
        if not (skip and name.startswith("post"))
    )


def conv_flops(kernel, c_in, c_out, h_out, w_out, bias=True):
    """FLOPs for one convolution: 2 * k^2 * C_in multiply-adds per output
    element (1 MAC = 2 flops), plus one add per output element for bias."""
    flops = 2 * kernel * kernel * c_in * c_out * h_out * w_out
    if bias:
        flops += h_out * w_out * c_out
    return flops


# Elementwise stages charged per latent draw: four each for the shift and
# scale reparameterizations, two for the softplus floor, two for the
# density bookkeeping. Each stage costs 1 flop per latent dimension.
SAMPLING_STAGES = 12


def flop_breakdown(cfg, h, w, samples=1):
    """Itemized FLOP estimate of one inference forward at h x w.

    Convolutions use the exact convention from conv_flops; activations,
    upsampling, and other elementwise stages count 1 flop per element;
    pooling and normalization statistics count 1 flop per input element.
    Stages after the latent draw scale with the sample count (the encoder
    and heads run once regardless).
    """
    levels = len(cfg.ladder)
    div = 1 << levels
    if h % div or w % div:
        raise ValueError(f"spatial dims must be divisible by {div}")
    if samples < 1:
        raise ValueError("need at least one latent sample")
    k = cfg.kernel_size
    items = []
    ch, cw = h, w
    prev = 3
    for i, c in enumerate(cfg.ladder):
        ch //= 2
        cw //= 2
        items.append((f"enc{i}_down", conv_flops(k, prev, c, ch, cw)))
        items.append((f"enc{i}_down act", c * ch * cw))
        items.append((f"enc{i}_conv", conv_flops(k, c, c, ch, cw)))
        items.append((f"enc{i}_conv act", c * ch * cw))
        prev = c
    d = cfg.bottleneck
    for head in ("prior_shift_head", "prior_scale_head"):
        items.append((f"{head} pool", d * ch * cw))
        items.append((head, conv_flops(1, d, 2 * d, 1, 1)))
    items.append(("latent draws", samples * SAMPLING_STAGES * d))

    per_sample = [
        ("pem stats", 2 * d * ch * cw),
        ("pem normalize", 2 * d * ch * cw),
        ("pem modulate", 2 * d * ch * cw),
    ]
    dh, dw = ch, cw
    cur = d
    for j in range(levels):
        dh *= 2
        dw *= 2
        per_sample.append((f"dec{j} upsample", cur * dh * dw))
        if j < levels - 1:
            skip_c = cfg.ladder[levels - 2 - j]
            c_in, target = cur + skip_c, skip_c
        else:
            c_in, target = cur, cfg.ladder[0]
        per_sample.append((f"dec{j}_conv0", conv_flops(k, c_in, target, dh, dw)))
        per_sample.append((f"dec{j}_conv0 act", target * dh * dw))
        per_sample.append((f"dec{j}_conv1", conv_flops(k, target, target, dh, dw)))
        per_sample.append((f"dec{j}_conv1 act", target * dh * dw))
        cur = target
    per_sample.append(("final", conv_flops(1, cfg.ladder[0], 3, h, w)))
    per_sample.append(("final act", 3 * h * w))
    items.extend((name, n * samples) for name, n in per_sample)
    return tuple(items)


def count_flops(cfg, h, w, samples=1):
    """Total FLOPs of one inference forward under the documented convention."""
    return sum(n for _, n in flop_breakdown(cfg, h, w, samples))


def benchmark(model, h, w, runs=50, k=1, seed=0):
    """Serial wall-clock timing of single-image MAP inference.

    Runs 5 untimed warmups, then `runs` timed forwards (each one encode
    plus k sample/decode passes) on a fixed seeded image. Strictly
    single-threaded so the timings are stable.
    """
    if runs < 10:
        raise ValueError("need at least 10 timed runs")
    rng = np.random.default_rng(seed)
    image = ImagePlane(rng.random((3, h, w)).astype(np.float32))
    for _ in range(5):
        model.infer_map(image, k=k, seed=seed)
    times = np.empty(runs)
    for i in range(runs):
        start = time.perf_counter()
        model.infer_map(image, k=k, seed=seed)
        times[i] = (time.perf_counter() - start) * 1000.0
    mean = float(times.mean())
    return ComplexityReport(
        params=count_params(model),
        params_all=count_params(model, include_training_branch=True),
        flops=count_flops(model.config, h, w, samples=k),
        height=h,
        width=w,
        k_samples=k,
        runs=runs,
        ms_mean=mean,
        ms_std=float(times.std()),
        fps=1000.0 / mean,
    )
