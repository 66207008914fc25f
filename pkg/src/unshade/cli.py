"""Batch command-line entry point tying all pipeline stages together.

Subcommands: synth, dissociate, train, infer, eval, bench, errmap.
Global flags (valid after any subcommand): --config (JSON settings file,
overridden by explicit flags), --seed, --out, --jobs, --verbose.

Exit codes are a stable scripting contract: 0 success, 1 usage or
configuration error, 2 data error (missing/invalid inputs, or any
per-entry failures), 3 numeric failure. Every artifact-producing run
writes run_config.json with all settings materialized beside its outputs,
so any result directory documents how to reproduce itself.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import evaluation
from .imaging import (
    ImagePlane,
    ImagingError,
    error_magnitude,
    load_image,
    load_mask,
    render_error_map,
    save_image,
)
from .losses import LossWeights
from .maskdissoc import dissociate
from .model import (
    ARCHIVE_MAGIC,
    Model,
    ModelConfig,
    load_weights,
    save_weights,
)
from .synthesis import generate_dataset, load_manifest
from .trainer import CHECKPOINT_MAGIC, TrainConfig, read_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

RUN_CONFIG_NAME = "run_config.json"
FINAL_WEIGHTS = "weights_final.fnwt"
IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm")

_REQUIRED = object()


class UsageError(Exception):
    """Bad flags, bad config file, or bad setting values."""


class DataError(Exception):
    """Missing or invalid input data."""


class _Parser(argparse.ArgumentParser):
    # route argparse's own failures through the documented exit contract
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Settings plumbing


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _settings(args, keys):
    """Merge defaults < config file < explicit flags for one subcommand."""
    data = _load_config_file(args.config) if args.config else {}
    unknown = sorted(set(data) - set(keys))
    if unknown:
        raise UsageError(
            f"unknown config key '{unknown[0]}' for {args.command}"
        )
    merged = {}
    for key, default in keys.items():
        cli = getattr(args, key, None)
        if isinstance(cli, bool):
            chosen = cli if cli else data.get(key, default)
        else:
            chosen = cli if cli is not None else data.get(key, default)
        if chosen is _REQUIRED:
            raise UsageError(f"missing required setting '{key}'")
        merged[key] = chosen
    return merged


def _seed_of(args):
    return 0 if args.seed is None else int(args.seed)


def _require_out(args):
    if args.out is None:
        raise UsageError("--out is required for this command")
    return args.out


def _write_run_config(out_dir, args, settings):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "subcommand": args.command,
        "config_file": args.config,
        "seed": _seed_of(args),
        "out": out_dir,
        "jobs": 1 if args.jobs is None else int(args.jobs),
        "verbose": bool(args.verbose),
        "settings": settings,
    }
    path = os.path.join(out_dir, RUN_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _data_phase(fn, *fn_args, **fn_kwargs):
    """Run a loading/processing step, mapping its errors to the data exit."""
    try:
        return fn(*fn_args, **fn_kwargs)
    except (ImagingError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _say(args, message):
    if args.verbose:
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Weight loading (archive or checkpoint)


def _model_from_checkpoint(path):
    header, arrays = read_checkpoint(path)
    model_cfg = dict(header["config"]["model"])
    model_cfg["ladder"] = tuple(model_cfg["ladder"])
    model = Model(ModelConfig(**model_cfg))
    for name, p in model.params.items():
        key = "w:" + name
        if key not in arrays:
            raise ValueError(f"checkpoint missing array '{key}'")
        if arrays[key].shape != p.data.shape:
            raise ValueError(
                f"checkpoint array '{key}' has shape {arrays[key].shape}, "
                f"config expects {p.data.shape}"
            )
        p.data = arrays[key].astype(np.float32)
    return model


def _load_model(path):
    """Accept a weight archive or a training checkpoint, sniffed by magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == ARCHIVE_MAGIC:
        return load_weights(path)
    if magic == CHECKPOINT_MAGIC:
        return _model_from_checkpoint(path)
    raise ValueError(f"{path}: neither a weight archive nor a checkpoint")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    settings = _settings(args, {"manifest": _REQUIRED, "jobs": None})
    jobs = 1 if settings["jobs"] is None else int(settings["jobs"])
    if jobs < 1:
        raise UsageError("jobs must be >= 1")
    entries = _data_phase(load_manifest, settings["manifest"])
    if args.dry_run:
        missing = [
            e.shadow_free for e in entries if not os.path.isfile(e.shadow_free)
        ]
        for path in missing:
            print(f"missing input: {path}", file=sys.stderr)
        print(f"manifest OK: {len(entries)} entries" if not missing
              else f"manifest has {len(missing)} missing inputs")
        return EXIT_OK if not missing else EXIT_DATA
    out_dir = _require_out(args)
    _write_run_config(out_dir, args, {"manifest": settings["manifest"],
                                      "jobs": jobs, "entries": len(entries)})
    summary = generate_dataset(entries, out_dir, jobs=jobs)
    print(f"wrote {summary.written}/{summary.total} triplets to {out_dir}")
    if summary.failures:
        print("failures:", file=sys.stderr)
        for index, message in summary.failures:
            print(f"  entry {index}: {message}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# dissociate


def cmd_dissociate(args):
    settings = _settings(args, {"mask": _REQUIRED})
    out_dir = _require_out(args)
    mask = _data_phase(load_mask, settings["mask"])
    pair = _data_phase(dissociate, mask)
    _write_run_config(out_dir, args, settings)
    # quantize the body once, then define the stored detail as the exact
    # 16-bit remainder so the on-disk pair reconstructs the mask bit-exactly
    body16 = np.rint(pair.body.astype(np.float64) * 65535.0)
    detail16 = mask.values.astype(np.float64) * 65535.0 - body16
    body_path = os.path.join(out_dir, "body.png")
    detail_path = os.path.join(out_dir, "detail.png")
    save_image(ImagePlane((body16 / 65535.0).astype(np.float32)[None]),
               body_path, bit_depth=16)
    save_image(ImagePlane((detail16 / 65535.0).astype(np.float32)[None]),
               detail_path, bit_depth=16)
    restored = (
        np.rint(load_image(body_path).data[0].astype(np.float64) * 65535.0)
        + np.rint(load_image(detail_path).data[0].astype(np.float64) * 65535.0)
    )
    if not np.array_equal(restored, mask.values.astype(np.float64) * 65535.0):
        raise FloatingPointError("body + detail failed to reconstruct the mask")
    print(f"wrote {body_path} and {detail_path} (reconstruction verified)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _model_config_from(data):
    allowed = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config key 'model.{unknown[0]}'")
    kwargs = dict(data)
    if "ladder" in kwargs:
        kwargs["ladder"] = tuple(kwargs["ladder"])
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _loss_weights_from(data):
    allowed = {f.name for f in fields(LossWeights)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config key 'weights.{unknown[0]}'")
    try:
        return LossWeights(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid loss weights: {exc}") from exc


def _train_config(args):
    if args.config is None:
        raise UsageError("train requires --config with the training settings")
    data = _load_config_file(args.config)
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config key '{unknown[0]}'")
    kwargs = dict(data)
    if isinstance(kwargs.get("model"), dict):
        kwargs["model"] = _model_config_from(kwargs["model"])
    if isinstance(kwargs.get("weights"), dict):
        kwargs["weights"] = _loss_weights_from(kwargs["weights"])
    if args.out is not None:
        kwargs["out_dir"] = args.out
    if args.seed is not None:
        kwargs["seed"] = int(args.seed)
    if args.swap_kl:
        kwargs["swap_kl"] = True
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def cmd_train(args):
    cfg = _train_config(args)
    _write_run_config(cfg.out_dir, args, asdict(cfg))
    result = _data_phase(train, cfg)
    model = _data_phase(_model_from_checkpoint, result.checkpoint_path)
    weights_path = os.path.join(cfg.out_dir, FINAL_WEIGHTS)
    save_weights(model, weights_path)
    print(
        f"trained {result.epochs_completed} epochs "
        f"({result.steps_completed} steps), final total loss "
        f"{result.final_total:.6f}" if result.steps_completed else
        f"initialized (0 epochs requested)"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"weights: {weights_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _input_images(source):
    if os.path.isdir(source):
        names = sorted(
            n for n in os.listdir(source)
            if n.lower().endswith(IMAGE_EXTENSIONS)
        )
        if not names:
            raise DataError(f"{source}: no supported images")
        return [os.path.join(source, n) for n in names]
    if not os.path.isfile(source):
        raise DataError(f"{source}: no such file or directory")
    return [source]


def cmd_infer(args):
    settings = _settings(
        args,
        {"weights": _REQUIRED, "input": _REQUIRED, "k": None,
         "all_samples": False},
    )
    out_dir = _require_out(args)
    seed = _seed_of(args)
    if settings["k"] is not None and int(settings["k"]) < 1:
        raise UsageError("k must be >= 1")
    model = _data_phase(_load_model, settings["weights"])
    inputs = _input_images(settings["input"])
    _write_run_config(out_dir, args, dict(settings, input_count=len(inputs)))
    k = None if settings["k"] is None else int(settings["k"])
    for position, path in enumerate(inputs):
        image = _data_phase(load_image, path)
        # one reproducible stream per file: seed + position in sorted order
        result = _data_phase(model.infer_map, image, k=k, seed=seed + position)
        stem = os.path.splitext(os.path.basename(path))[0]
        save_image(result.best, os.path.join(out_dir, f"{stem}.png"))
        if settings["all_samples"]:
            for j, candidate in enumerate(result.candidates):
                save_image(candidate,
                           os.path.join(out_dir, f"{stem}_sample_{j:02d}.png"))
            meta = {
                "image": os.path.basename(path),
                "seed": seed + position,
                "k": len(result.candidates),
                "best_index": result.best_index,
                "log_densities": [float(v) for v in result.log_densities],
            }
            with open(os.path.join(out_dir, f"{stem}_samples.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
        _say(args, f"{path} -> {stem}.png (best of {len(result.candidates)})")
    print(f"wrote {len(inputs)} result(s) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _print_metric_table(summary):
    mode = summary["rmse_mode"]
    print(f"{'region':<8}{'psnr':>10}{'ssim':>10}{'rmse(' + mode + ')':>16}")
    for region in ("S", "NS", "ALL"):
        block = summary["regions"][region]
        if block["psnr"] is None:
            print(f"{region:<8}{'-':>10}{'-':>10}{'-':>16}")
            continue
        rmse = block["rmse_strict" if mode == "rmse-lab" else "rmse_mae"]
        print(f"{region:<8}{block['psnr']:>10.3f}{block['ssim']:>10.4f}"
              f"{rmse:>16.4f}")
    nrss_mean = summary["nrss"]
    nrss_text = "-" if nrss_mean is None else f"{nrss_mean:.4f}"
    print(f"nrss {nrss_text}   images {summary['images']}   "
          f"failures {len(summary['failures'])}")


def cmd_eval(args):
    settings = _settings(
        args,
        {"index": _REQUIRED, "pred_dir": None, "weights": None,
         "strict_rmse": False, "resize": None, "error_maps": False,
         "jobs": None},
    )
    out_dir = _require_out(args)
    if (settings["pred_dir"] is None) == (settings["weights"] is None):
        raise UsageError("provide exactly one of --pred-dir or --weights")
    jobs = 1 if settings["jobs"] is None else int(settings["jobs"])
    if jobs < 1:
        raise UsageError("jobs must be >= 1")
    model = None
    if settings["weights"] is not None:
        model = _data_phase(_load_model, settings["weights"])
    _write_run_config(out_dir, args, settings)
    result = _data_phase(
        evaluation.evaluate_dataset,
        settings["index"],
        out_dir,
        model=model,
        pred_dir=settings["pred_dir"],
        strict_rmse=bool(settings["strict_rmse"]),
        resize_to=None if settings["resize"] is None else int(settings["resize"]),
        write_error_maps=bool(settings["error_maps"]),
        jobs=jobs,
        seed=_seed_of(args),
    )
    _print_metric_table(result.summary)
    for image_id, message in result.failures:
        print(f"failed {image_id}: {message}", file=sys.stderr)
    return EXIT_DATA if result.failures else EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args):
    settings = _settings(
        args, {"weights": _REQUIRED, "size": 256, "runs": 50, "k": 1}
    )
    model = _data_phase(_load_model, settings["weights"])
    try:
        report = evaluation.benchmark(
            model,
            int(settings["size"]),
            int(settings["size"]),
            runs=int(settings["runs"]),
            k=int(settings["k"]),
            seed=_seed_of(args),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"params {report.params} (inference) / {report.params_all} (all)")
    print(f"flops {report.flops} at {report.width}x{report.height}, "
          f"k={report.k_samples}")
    print(f"time {report.ms_mean:.3f} ms +- {report.ms_std:.3f} "
          f"({report.runs} runs)   fps {report.fps:.2f}")
    if report.ms_mean > 0 and report.ms_std / report.ms_mean >= 0.2:
        print("note: timing spread std/mean >= 0.2; machine may not be idle",
              file=sys.stderr)
    if args.out is not None:
        _write_run_config(args.out, args, settings)
        with open(os.path.join(args.out, "bench_report.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# errmap


def cmd_errmap(args):
    settings = _settings(args, {"pred": _REQUIRED, "ref": _REQUIRED})
    out_dir = _require_out(args)
    pred = _data_phase(load_image, settings["pred"])
    ref = _data_phase(load_image, settings["ref"])
    rendered = _data_phase(render_error_map, pred, ref)
    _write_run_config(out_dir, args, settings)
    map_path = os.path.join(out_dir, "error_map.png")
    save_image(rendered, map_path)
    scale = float(error_magnitude(pred, ref).max())
    with open(os.path.join(out_dir, "error_map.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"max_error_255": scale}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {map_path} (max error {scale:.3f}/255)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file; explicit flags win")
    common.add_argument("--seed", type=int, help="base RNG seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker cap where supported")
    common.add_argument("--verbose", action="store_true",
                        help="per-item progress on stderr")

    parser = _Parser(prog="unshade",
                     description="Shadow synthesis, removal, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common],
                       help="render shadowed triplets from a manifest")
    p.add_argument("--manifest", help="JSON-lines synthesis manifest")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the manifest, write nothing")

    p = sub.add_parser("dissociate", parents=[common],
                       help="split a mask into 16-bit body/detail images")
    p.add_argument("--mask", help="binary mask image")

    p = sub.add_parser("train", parents=[common],
                       help="train from a dataset index (--config required)")
    p.add_argument("--swap-kl", action="store_true",
                   help="ablation: swap the KL argument order")

    p = sub.add_parser("infer", parents=[common],
                       help="remove shadows from an image or directory")
    p.add_argument("--weights", help="weight archive or checkpoint")
    p.add_argument("--input", help="input image or directory")
    p.add_argument("--k", type=int, help="latent samples per image")
    p.add_argument("--all-samples", action="store_true", dest="all_samples",
                   help="write every sampled variant plus selection metadata")

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions region-wise against references")
    p.add_argument("--index", help="dataset index (JSON lines)")
    p.add_argument("--pred-dir", dest="pred_dir",
                   help="directory of predictions named by image id")
    p.add_argument("--weights", help="run this model instead of reading predictions")
    p.add_argument("--strict-rmse", action="store_true", dest="strict_rmse",
                   help="report true RMSE instead of the literature's MAE")
    p.add_argument("--resize", type=int,
                   help="evaluate at this square resolution (bilinear)")
    p.add_argument("--error-maps", action="store_true", dest="error_maps",
                   help="write per-image error maps")

    p = sub.add_parser("bench", parents=[common],
                       help="time single-image inference and count params/flops")
    p.add_argument("--weights", help="weight archive or checkpoint")
    p.add_argument("--size", type=int, help="square input size (default 256)")
    p.add_argument("--runs", type=int, help="timed runs (default 50, min 10)")
    p.add_argument("--k", type=int, help="latent samples per forward (default 1)")

    p = sub.add_parser("errmap", parents=[common],
                       help="render the error map between two images")
    p.add_argument("--pred", help="prediction image")
    p.add_argument("--ref", help="reference image")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "dissociate": cmd_dissociate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "errmap": cmd_errmap,
}


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImagingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
