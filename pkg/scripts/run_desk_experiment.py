#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: generate a synthetic blob dataset,
fine-tune the toy backbone with simulated interactive prompting, and report
single-prompt scores plus IoU-vs-clicks curves on a held-out split.

Runs on CPU in roughly 15 minutes:

    python3 scripts/run_desk_experiment.py --out runs/desk
"""

import argparse
import os
import sys
import time

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptseg.evaluation import EvalConfig, emit_report, run_dataset
from promptseg.model import ModelConfig, ToyPromptableModel, inject_lora, save_checkpoint
from promptseg.synthetic import make_blob_dataset
from promptseg.training import TrainConfig, evaluate_single_prompt, train


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--epochs", type=int, default=4)
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    torch.set_num_threads(max(torch.get_num_threads(), 4))
    os.makedirs(args.out, exist_ok=True)

    dataset = make_blob_dataset(args.images, seed=7, size=128)
    holdout = make_blob_dataset(20, seed=1007, size=128)
    model = inject_lora(ToyPromptableModel(ModelConfig(input_size=128, seed=args.seed)))
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=1,
        grad_accumulation_steps=1,
        learning_rate=4e-3,
        warmup_steps=40,
        optimizer="schedulefree_adamw",
        augment_enabled=False,
        seed=args.seed,
        val_fraction=0.1,
        val_instance_cap=40,
    )
    t0 = time.monotonic()
    train(model, dataset, cfg, out_dir=args.out)
    print(f"training: {(time.monotonic() - t0) / 60:.1f} min")
    save_checkpoint(model, os.path.join(args.out, "final.ckpt"))

    rng = np.random.default_rng(99)
    box_iou = evaluate_single_prompt(model, holdout, "box", rng, instance_cap=100)
    point_iou = evaluate_single_prompt(model, holdout, "point", rng, instance_cap=100)
    print(f"held-out single prompt: box {box_iou:.3f}, point {point_iou:.3f}")

    report = None
    for mode in ("point", "box"):
        part = run_dataset(
            model, holdout, EvalConfig(start_mode=mode, max_clicks=5, seed=5),
            dataset_name="blobs",
        )
        report = part if report is None else report.merge(part)
    paths = emit_report(report, os.path.join(args.out, "eval"))
    for row in report.summary():
        print(
            f"  {row['start_mode']} clicks={row['clicks']}: "
            f"{row['mean_iou']:.3f} ± {row['std_iou']:.3f}"
        )
    print(f"report files: {paths}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
