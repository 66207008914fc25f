# Overfit a small model on the demo dataset for a minute or so, then
# export an inference weight archive. Run demos/make_dataset.py first.

import csv
import os
import sys

from unshade.model import ModelConfig, save_weights
from unshade.trainer import TrainConfig, read_checkpoint, train
from unshade import cli

index_path = "demo_out/dataset/data/index.jsonl"
if not os.path.isfile(index_path):
    sys.exit("no dataset yet - run demos/make_dataset.py first")

out_dir = "demo_out/training"
cfg = TrainConfig(
    index_path=index_path,
    out_dir=out_dir,
    model=ModelConfig(ladder=(8, 16, 32), bottleneck=32, samples=5, seed=1),
    crop=64,
    batch=4,
    epochs=80,
    lr_initial=5e-4,
    lr_final=5e-5,
    seed=7,
)
print(f"training {cfg.epochs} epochs on {index_path} ...")
result = train(cfg)
print(f"done: {result.steps_completed} steps, "
      f"final total loss {result.final_total:.5f}")

with open(result.log_path) as fh:
    rows = list(csv.DictReader(fh))
first, last = float(rows[0]["total"]), float(rows[-1]["total"])
print(f"loss trajectory: {first:.5f} -> {last:.5f} "
      f"({last / first:.1%} of the starting value)")
print("per-term at the last step: "
      + ", ".join(f"{k}={float(rows[-1][k]):.5f}"
                  for k in ("l_e", "l_m", "l_s", "l_b")))

# the checkpoint carries optimizer state for resuming; the weight
# archive is the small inference-only artifact
header, _ = read_checkpoint(result.checkpoint_path)
print(f"checkpoint: epoch {header['epoch']}, step {header['step']}")
model = cli._load_model(result.checkpoint_path)
weights_path = os.path.join(out_dir, "weights.fnwt")
save_weights(model, weights_path)
print(f"weights archive: {weights_path} "
      f"({os.path.getsize(weights_path) / 1024:.0f} KiB)")
