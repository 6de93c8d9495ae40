"""Train TAPE and a rotary baseline on addition, then compare them on longer operands.

Both models see operands of 1 to 10 digits (least significant digit first) and get
the same CPU budget. Evaluation covers operand lengths up to 15, so the cells
beyond 10 measure extrapolation.

Run: python demos/length_generalization.py            (reuses stored checkpoints)
     python demos/length_generalization.py --retrain  (about an hour on one core)
"""
import argparse
import shutil
from pathlib import Path

import numpy as np

from tape.model import ModelConfig, load_checkpoint, save_checkpoint
from tape.numcore import Rng
from tape.tasks import AdditionDataset, TrainConfig, evaluate_grid, train

HERE = Path(__file__).resolve().parent
CKPT_DIR = HERE / "checkpoints"

MODEL = ModelConfig(vocab=16, n_ctx=64, dim=128, heads=2, depth=2, seed=0)
RECIPE = TrainConfig(lr=1e-3, batch_size=64, steps=3400, warmup=100, seed=0,
                     precision="float32", time_budget=1750.0)
TRAIN_LEN, EVAL_LEN = 10, 15


def train_pair(out_dir=CKPT_DIR) -> None:
    """Train both variants with the shared recipe; writes ``tape.tapa`` and ``rope.tapa``."""
    out_dir = Path(out_dir)
    data = AdditionDataset.generate(TRAIN_LEN, 50_000, seed=0)
    for variant in ("tape", "rope"):
        run_dir = out_dir / f"{variant}_run"
        res = train(MODEL.replace(variant=variant), data, RECIPE, run_dir)
        # keep the weights and the training header, drop the optimizer state
        cfg, params, header = load_checkpoint(run_dir / "checkpoint.tapa")
        save_checkpoint(out_dir / f"{variant}.tapa", cfg, params,
                        {k: v for k, v in header.items() if k.startswith("train.")})
        shutil.move(run_dir / "loss.csv", out_dir / f"{variant}_loss.csv")
        shutil.rmtree(run_dir)
        print(f"{variant}: {res.steps_done} steps in {res.seconds:.0f} CPU-s, "
              f"final loss {res.losses[-1][1]:.4f}")


def show(grid, name: str) -> None:
    print(f"\n{name}: exact match by operand lengths (rows a, columns b)")
    print("     " + "".join(f"{j:>5}" for j in range(1, EVAL_LEN + 1)))
    for i, row in enumerate(grid.acc, 1):
        print(f"{i:>4} " + "".join(f"{v:5.2f}" for v in row))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--retrain", action="store_true")
    ap.add_argument("--samples", type=int, default=20, help="samples per grid cell")
    args = ap.parse_args()
    if args.retrain or not (CKPT_DIR / "tape.tapa").exists() or not (CKPT_DIR / "rope.tapa").exists():
        CKPT_DIR.mkdir(exist_ok=True)
        train_pair(CKPT_DIR)
    summary = {}
    for variant in ("tape", "rope"):
        cfg, params, header = load_checkpoint(CKPT_DIR / f"{variant}.tapa")
        grid = evaluate_grid(cfg, params, EVAL_LEN, args.samples, Rng(701), train_len=TRAIN_LEN)
        show(grid, variant)
        summary[variant] = (grid.in_distribution, grid.region_mean(TRAIN_LEN + 1, EVAL_LEN),
                            float(header["train.cpu_seconds"]), int(header["train.step"]))
    print()
    for variant, (ind, ext, secs, steps) in summary.items():
        print(f"{variant:>5}: in-distribution {ind:.3f}, lengths 11-15 {ext:.3f} "
              f"({steps} steps, {secs:.0f} CPU-s)")


if __name__ == "__main__":
    main()
