"""Iterative-click evaluation harness: single-prompt scores and
IoU-vs-click-count curves for any model behind the promptable interface.

Corrective clicks are placed with the deterministic distance-transform
center rule so one instance's trajectory replays exactly; randomness (which
instances, initial points, box margins) is fully determined by the seed.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .masks import box_from_mask, iou, sample_correction_click, sample_point_in_mask
from .pipeline import (
    map_box_to_model,
    map_point_to_model,
    postprocess_mask,
    preprocess,
)

logger = logging.getLogger(__name__)

START_MODES = ("point", "box")


@dataclass
class EvalConfig:
    instances_per_image: int = 10
    box_margin_range: tuple[int, int] = (0, 10)
    max_clicks: int = 5
    start_mode: str = "box"
    seed: int = 0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.box_margin_range, list):
            self.box_margin_range = tuple(self.box_margin_range)
        if self.start_mode not in START_MODES:
            raise ValueError(f"start_mode must be one of {START_MODES}")
        if self.max_clicks < 0 or self.instances_per_image < 1:
            raise ValueError("max_clicks must be >= 0 and instances_per_image >= 1")
        lo, hi = self.box_margin_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad margin range {self.box_margin_range}")


@dataclass
class InstanceResult:
    dataset: str
    image_id: str
    instance_index: int
    start_mode: str
    ious: list[float]


@dataclass
class EvalReport:
    config: dict
    results: list[InstanceResult] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(
            config=self.config,
            results=self.results + other.results,
            skipped=self.skipped + other.skipped,
        )

    def summary(self) -> list[dict]:
        """Mean/std IoU per (dataset, start mode, click count), recomputable
        from the raw per-instance trajectories."""
        groups: dict[tuple[str, str], list[list[float]]] = {}
        for r in self.results:
            groups.setdefault((r.dataset, r.start_mode), []).append(r.ious)
        rows = []
        for (dataset, mode), trajectories in sorted(groups.items()):
            arr = np.asarray(trajectories, dtype=np.float64)
            for clicks in range(arr.shape[1]):
                rows.append(
                    {
                        "dataset": dataset,
                        "start_mode": mode,
                        "clicks": clicks,
                        "mean_iou": float(arr[:, clicks].mean()),
                        "std_iou": float(arr[:, clicks].std()),
                        "n": int(arr.shape[0]),
                    }
                )
        return rows

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "results": [asdict(r) for r in self.results],
            "skipped": self.skipped,
            "summary": self.summary(),
        }


def run_instance(
    model,
    image: np.ndarray,
    gt: np.ndarray,
    cfg: EvalConfig,
    rng: np.random.Generator,
    embedding=None,
    record=None,
) -> list[float] | None:
    """IoU trajectory of length max_clicks+1 for one instance.

    Index 0 is the IoU after the initial prompt (point or box per the start
    mode, box margin uniform in range); subsequent indices follow successive
    corrective center-clicks. Early convergence pads the trajectory with the
    final value. Returns None for an empty ground truth (callers log a skip).
    """
    if not gt.any():
        return None
    if embedding is None or record is None:
        model_input, record = preprocess(image, model.input_size)
        with torch.no_grad():
            embedding = model.encode_image(model_input)
    points, boxes = [], []
    if cfg.start_mode == "point":
        p = sample_point_in_mask(gt, rng)
        points.append(map_point_to_model(p, record))
    else:
        lo, hi = cfg.box_margin_range
        box = box_from_mask(gt, margin=int(rng.integers(lo, hi + 1)))
        boxes.append(map_box_to_model(box, record))

    def decode() -> np.ndarray:
        with torch.no_grad():
            logits = model.predict_logits(embedding, points=points, boxes=boxes)
        return postprocess_mask(logits, record, cfg.binarize_threshold)

    pred = decode()
    trajectory = [iou(pred, gt)]
    for _ in range(cfg.max_clicks):
        click = sample_correction_click(pred, gt, placement="center")
        if click is None:
            trajectory.append(trajectory[-1])
            continue
        points.append(map_point_to_model(click, record))
        pred = decode()
        trajectory.append(iou(pred, gt))
    return trajectory


def run_dataset(model, samples, cfg: EvalConfig, dataset_name: str = "") -> EvalReport:
    """Evaluate every image of a split: up to ``instances_per_image``
    instances per image, sampled without replacement; deterministic given
    the seed."""
    rng = np.random.default_rng(cfg.seed)
    report = EvalReport(config={**asdict(cfg), "dataset": dataset_name})
    for sample in samples:
        usable = [i for i, m in enumerate(sample.masks) if m.any()]
        for i, m in enumerate(sample.masks):
            if not m.any():
                report.skipped.append(
                    {"image_id": sample.image_id, "instance_index": i, "reason": "empty gt"}
                )
                logger.warning("skipping empty instance %d of %s", i, sample.image_id)
        if not usable:
            continue
        k = min(cfg.instances_per_image, len(usable))
        chosen = rng.choice(len(usable), size=k, replace=False)
        model_input, record = preprocess(sample.image, model.input_size)
        with torch.no_grad():
            embedding = model.encode_image(model_input)
        for j in sorted(int(c) for c in chosen):
            idx = usable[j]
            ious = run_instance(
                model, sample.image, sample.masks[idx], cfg, rng,
                embedding=embedding, record=record,
            )
            report.results.append(
                InstanceResult(
                    dataset=dataset_name,
                    image_id=sample.image_id,
                    instance_index=idx,
                    start_mode=cfg.start_mode,
                    ious=ious,
                )
            )
    return report


def emit_report(report: EvalReport, out_dir, reference_rows=None) -> dict[str, str]:
    """Write report.csv (summary), report.json (full raw data), and
    curves.csv (plot data for IoU-vs-clicks curves).

    ``reference_rows`` may carry published comparison numbers as dicts with
    dataset/start_mode/clicks/mean_iou/std_iou/source keys; they are
    appended to the CSV for side-by-side reading.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": os.path.join(out_dir, "report.csv"),
        "json": os.path.join(out_dir, "report.json"),
        "curves": os.path.join(out_dir, "curves.csv"),
    }
    fields = ["dataset", "start_mode", "clicks", "mean_iou", "std_iou", "n", "source"]
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in report.summary():
            writer.writerow({**row, "source": "run"})
        for row in reference_rows or []:
            writer.writerow({f: row.get(f, "") for f in fields})
    with open(paths["json"], "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    with open(paths["curves"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["dataset", "start_mode", "clicks", "mean_iou", "std_iou"])
        writer.writeheader()
        for row in report.summary():
            writer.writerow({k: row[k] for k in ["dataset", "start_mode", "clicks", "mean_iou", "std_iou"]})
    return paths
