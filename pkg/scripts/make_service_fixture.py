#!/usr/bin/env python3
"""Train the small 64 px fixture model used by the service contract tests
and write it to tests/golden/service_model.ckpt.

Rerun this (then tests/service_scenario.py) after any intentional change to
the model architecture or training loop; the goldens pin the service wire
format against this exact checkpoint.
"""

import os
import sys
import time

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptseg.model import ModelConfig, ToyPromptableModel, inject_lora, save_checkpoint
from promptseg.synthetic import make_blob_dataset
from promptseg.training import TrainConfig, evaluate_single_prompt, train


def main() -> None:
    out = os.path.join(os.path.dirname(__file__), "..", "tests", "golden", "service_model.ckpt")
    torch.manual_seed(0)
    model = inject_lora(ToyPromptableModel(ModelConfig(input_size=64, seed=123)))
    dataset = make_blob_dataset(80, seed=51, size=64, min_instances=2, max_instances=5)
    cfg = TrainConfig(
        epochs=2,
        batch_size=1,
        grad_accumulation_steps=1,
        learning_rate=4e-3,
        warmup_steps=30,
        optimizer="schedulefree_adamw",
        max_corrections=2,
        augment_enabled=False,
        seed=0,
        val_fraction=0.1,
        val_instance_cap=20,
    )
    t0 = time.monotonic()
    train(model, dataset, cfg)
    holdout = make_blob_dataset(8, seed=151, size=64, min_instances=2, max_instances=5)
    rng = np.random.default_rng(3)
    box_iou = evaluate_single_prompt(model, holdout, "box", rng, instance_cap=30)
    point_iou = evaluate_single_prompt(model, holdout, "point", rng, instance_cap=30)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    save_checkpoint(model, out)
    print(
        f"trained in {(time.monotonic() - t0) / 60:.1f} min; "
        f"holdout box IoU {box_iou:.3f}, point IoU {point_iou:.3f}; wrote {out}"
    )


if __name__ == "__main__":
    main()
