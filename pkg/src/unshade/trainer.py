"""Training loop: synthetic pairs in, checkpoints and a loss log out.

Each step random-crops a batch, dissociates the cropped masks into
boundary weights, runs the posterior-sampled forward pass, and applies
one Adam update. A single seeded generator drives shuffling, crop
offsets, flips, and latent draws, so identical configs give identical
logs, and checkpoints capture enough state (weights, optimizer moments,
counters, generator state) for bitwise-identical resumption.

Masks are cropped BEFORE dissociation: the distance transform runs on
the crop, so boundary weights reflect the visible boundary rather than
stale full-image distances.
"""

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .imaging import RegionMask, load_image
from .losses import LossWeights, total_loss
from .maskdissoc import dissociate, weighted_detail_mask
from .model import Model, ModelConfig, sample_latent
from .optim import AdamState, LrSchedule, adam_step

CHECKPOINT_MAGIC = b"FNCK"
CHECKPOINT_VERSION = 1
FINAL_CHECKPOINT = "checkpoint_final.fnck"
LOG_NAME = "loss_log.csv"
LOG_COLUMNS = ("step", "lr", "l_mse", "l_perc", "l_e", "l_m", "l_s", "l_b",
               "total")


@dataclass(frozen=True)
class TrainConfig:
    index_path: str
    out_dir: str
    model: ModelConfig = ModelConfig()
    crop: int = 256
    batch: int = 8
    epochs: int = 500
    lr_initial: float = 1e-4
    lr_final: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 0
    weights: LossWeights = LossWeights()
    hflip: bool = False
    swap_kl: bool = False

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint cadence must be >= 0")
        if self.lr_final > self.lr_initial or self.lr_initial <= 0:
            raise ValueError("need lr_initial >= lr_final > 0")
        # crops must survive the encoder halvings and the loss extractor
        div = max(16, 1 << len(self.model.ladder))
        if self.crop < div or self.crop % div:
            raise ValueError(f"crop size must be a positive multiple of {div}")


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    epochs_completed: int
    steps_completed: int
    final_total: float


@dataclass
class DatasetEntry:
    shadow: str
    shadow_free: str
    mask: str
    where: str


def load_training_index(path, allow_empty=False):
    """Read a {shadow, shadow_free, mask} JSON-lines training index.

    Relative paths resolve against the index directory; every referenced
    file must exist. Errors name the offending index line. Training
    rejects an empty index; evaluation accepts one (allow_empty=True).
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc})") from exc
            missing = [k for k in ("shadow", "shadow_free", "mask")
                       if k not in rec]
            if missing:
                raise ValueError(f"{where}: missing key '{missing[0]}'")
            resolved = {}
            for key in ("shadow", "shadow_free", "mask"):
                p = rec[key]
                resolved[key] = p if os.path.isabs(p) else os.path.join(base, p)
                if not os.path.isfile(resolved[key]):
                    raise ValueError(f"{where}: missing file {resolved[key]}")
            entries.append(DatasetEntry(resolved["shadow"],
                                        resolved["shadow_free"],
                                        resolved["mask"], where))
    if not entries and not allow_empty:
        raise ValueError(f"{path}: empty index")
    return entries


def _schedule_for(cfg):
    # runs of 0 or 1 epochs cannot host a decay leg; padding the total
    # keeps the schedule valid and the emitted rate flat at lr_initial
    return LrSchedule(cfg.lr_initial, cfg.lr_final, max(cfg.epochs, 2))


def _detail_weights(mask01):
    # a crop with no visible boundary (all shadow or all background)
    # contributes nothing to the boundary term
    if mask01.all() or not mask01.any():
        return np.zeros(mask01.shape, dtype=np.float32)
    return weighted_detail_mask(dissociate(RegionMask(mask01)))


def _load_batch(cfg, batch_entries, rng):
    xs, ys, dms = [], [], []
    c = cfg.crop
    for entry in batch_entries:
        x = load_image(entry.shadow)
        y = load_image(entry.shadow_free)
        m = load_image(entry.mask)
        if x.data.shape != y.data.shape:
            raise ValueError(
                f"{entry.where}: shadow {x.data.shape} and reference "
                f"{y.data.shape} dims differ")
        if m.height != x.height or m.width != x.width:
            raise ValueError(f"{entry.where}: mask dims differ from image")
        if x.height < c or x.width < c:
            raise ValueError(
                f"{entry.where}: image {x.width}x{x.height} smaller than "
                f"crop {c}")
        top = int(rng.integers(0, x.height - c + 1))
        left = int(rng.integers(0, x.width - c + 1))
        xc = x.data[:, top:top + c, left:left + c]
        yc = y.data[:, top:top + c, left:left + c]
        mc = m.data[0, top:top + c, left:left + c]
        if cfg.hflip and rng.random() < 0.5:
            xc, yc, mc = xc[:, :, ::-1], yc[:, :, ::-1], mc[:, ::-1]
        xs.append(np.ascontiguousarray(xc))
        ys.append(np.ascontiguousarray(yc))
        dms.append(_detail_weights((mc > 0.5).astype(np.uint8)))
    return np.stack(xs), np.stack(ys), np.stack(dms)[:, None]


def _train_step(cfg, model, adam, rng, epoch, step, xs, ys, dms):
    x = Tensor(xs)
    y = Tensor(ys)
    skips, bottleneck = model.encode(x)
    dists_prior = model.prior_heads(bottleneck)
    dists_post = model.posterior_heads(x, y)
    sample = sample_latent(dists_post, rng)
    pred = model.decode(skips, model.pem(bottleneck, sample))
    first, second = ((dists_post, dists_prior) if cfg.swap_kl
                     else (dists_prior, dists_post))
    breakdown = total_loss(pred, y, first, second, dms, cfg.weights)
    floats = breakdown.as_floats()
    if not all(np.isfinite(v) for v in floats.values()):
        raise FloatingPointError(
            f"non-finite loss at epoch {epoch} step {step}: {floats}")
    breakdown.total.backward()
    lr = adam_step(model.parameters(), adam, epoch)
    return lr, floats


# ---- checkpoint files ---------------------------------------------------

def _write_array(fh, name, arr):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    out = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", out.ndim))
    fh.write(struct.pack(f"<{out.ndim}I", *out.shape))
    fh.write(out.tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data


def save_checkpoint(path, cfg, model, adam, rng, epoch, step):
    """Write weights, optimizer moments, counters, and generator state."""
    header = {
        "epoch": int(epoch),
        "step": int(step),
        "adam_step": int(adam.step),
        "rng_state": rng.bit_generator.state,
        "config": asdict(cfg),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    names = list(model.params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", 3 * len(names)))
        for name in names:
            _write_array(fh, "w:" + name, model.params[name].data)
        for i, name in enumerate(names):
            _write_array(fh, "m:" + name, adam.m[i])
        for i, name in enumerate(names):
            _write_array(fh, "v:" + name, adam.v[i])
    return path


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: array})."""
    arrays = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", _read_exact(fh, 4, "header length"))[0]
        header = json.loads(_read_exact(fh, blob_len, "header").decode("utf-8"))
        count = struct.unpack("<I", _read_exact(fh, 4, "array count"))[0]
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, "rank"))[0]
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            raw = _read_exact(fh, nbytes, f"data for {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape) \
                .astype(np.float32)
    return header, arrays


def _canonical(config_dict):
    return json.loads(json.dumps(config_dict, sort_keys=True))


def _check_config_compatible(saved, cfg):
    current = _canonical(asdict(cfg))
    saved = _canonical(saved)
    for key in current:
        if key == "out_dir":
            continue
        if saved.get(key) != current[key]:
            raise ValueError(
                f"checkpoint config mismatch on '{key}': saved "
                f"{saved.get(key)!r}, requested {current[key]!r}")


def _restore(header, arrays, cfg):
    model = Model(cfg.model)
    adam = AdamState.for_params(model.parameters(), _schedule_for(cfg))
    adam.step = int(header["adam_step"])
    for i, (name, p) in enumerate(model.params.items()):
        for prefix, slot in (("w:", None), ("m:", adam.m), ("v:", adam.v)):
            key = prefix + name
            if key not in arrays:
                raise ValueError(f"checkpoint missing array '{key}'")
            arr = arrays[key]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"checkpoint array '{key}' has shape {arr.shape}, "
                    f"config expects {p.data.shape}")
            if slot is None:
                p.data = arr
            else:
                slot[i] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return model, adam, rng


# ---- the loop -----------------------------------------------------------

def _run(cfg, entries, model, adam, rng, start_epoch, start_step, append_log):
    steps_per_epoch = len(entries) // cfg.batch
    if cfg.epochs > start_epoch and steps_per_epoch == 0:
        raise ValueError(
            f"dataset has {len(entries)} entries, smaller than one batch "
            f"of {cfg.batch}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, LOG_NAME)
    step = start_step
    final_total = float("nan")
    with open(log_path, "a" if append_log else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append_log:
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = rng.permutation(len(entries))
            for s in range(steps_per_epoch):
                chosen = order[s * cfg.batch:(s + 1) * cfg.batch]
                xs, ys, dms = _load_batch(
                    cfg, [entries[i] for i in chosen], rng)
                step += 1
                lr, floats = _train_step(cfg, model, adam, rng, epoch, step,
                                         xs, ys, dms)
                writer.writerow([step, lr] + [floats[k] for k in
                                              LOG_COLUMNS[2:]])
                fh.flush()
                final_total = floats["total"]
            if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0
                    and epoch < cfg.epochs):
                save_checkpoint(
                    os.path.join(cfg.out_dir, f"checkpoint_{epoch:05d}.fnck"),
                    cfg, model, adam, rng, epoch, step)
    final_path = save_checkpoint(os.path.join(cfg.out_dir, FINAL_CHECKPOINT),
                                 cfg, model, adam, rng, cfg.epochs, step)
    return TrainResult(checkpoint_path=final_path, log_path=log_path,
                       epochs_completed=cfg.epochs, steps_completed=step,
                       final_total=final_total)


def train(cfg):
    """Fresh training run; returns paths to the final checkpoint and log."""
    entries = load_training_index(cfg.index_path)
    model = Model(cfg.model)
    adam = AdamState.for_params(model.parameters(), _schedule_for(cfg))
    rng = np.random.default_rng(cfg.seed)
    return _run(cfg, entries, model, adam, rng, 0, 0, append_log=False)


def resume(checkpoint_path, cfg):
    """Continue training from a checkpoint, bitwise-identical to an
    uninterrupted run with the same config."""
    header, arrays = read_checkpoint(checkpoint_path)
    _check_config_compatible(header["config"], cfg)
    start_epoch = int(header["epoch"])
    if start_epoch > cfg.epochs:
        raise ValueError(
            f"checkpoint is at epoch {start_epoch}, beyond the configured "
            f"{cfg.epochs}")
    model, adam, rng = _restore(header, arrays, cfg)
    entries = load_training_index(cfg.index_path)
    return _run(cfg, entries, model, adam, rng, start_epoch,
                int(header["step"]), append_log=True)
