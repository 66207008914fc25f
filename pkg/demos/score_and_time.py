# Score the trained model region-wise (shadow / non-shadow / whole
# image) against the dataset references, then measure its size and
# speed. Run the dataset and training demos first.

import json
import os
import sys

from unshade.evaluation import benchmark, count_params, evaluate_dataset, flop_breakdown
from unshade.model import load_weights

weights_path = "demo_out/training/weights.fnwt"
index_path = "demo_out/dataset/data/index.jsonl"
for path in (weights_path, index_path):
    if not os.path.isfile(path):
        sys.exit(f"missing {path} - run the dataset and training demos first")

out_dir = "demo_out/scores"
model = load_weights(weights_path)

result = evaluate_dataset(index_path, out_dir, model=model, seed=0)
print(f"scored {result.summary['images']} images "
      f"({len(result.failures)} failures)")
print(f"{'region':<8}{'psnr':>9}{'ssim':>9}{'mae-lab':>10}{'rmse-lab':>10}")
for region in ("S", "NS", "ALL"):
    block = result.summary["regions"][region]
    print(f"{region:<8}{block['psnr']:>9.3f}{block['ssim']:>9.4f}"
          f"{block['rmse_mae']:>10.4f}{block['rmse_strict']:>10.4f}")
print(f"sharpness (nrss, no reference): {result.summary['nrss']:.4f}")
print(f"details: {result.csv_path}")

print()
print(f"parameters: {count_params(model)} inference / "
      f"{count_params(model, include_training_branch=True)} with the "
      f"training-only branch")

# where the compute goes at 96x96, single draw
breakdown = flop_breakdown(model.config, 96, 96, samples=1)
total = sum(flops for _, flops in breakdown)
print(f"flops at 96x96 (one draw): {total}")
for name, flops in sorted(breakdown, key=lambda kv: -kv[1])[:5]:
    print(f"  {name:<16} {flops:>12} ({flops / total:.0%})")

report = benchmark(model, 96, 96, runs=20, k=1, seed=0)
print(f"timing: {report.ms_mean:.1f} ms/image (+- {report.ms_std:.1f}), "
      f"{report.fps:.1f} images/s over {report.runs} runs")
with open(os.path.join(out_dir, "bench.json"), "w") as fh:
    json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
print(f"benchmark report: {out_dir}/bench.json")
