"""Fine-tuning loop: per-instance interactive simulation, dice+cross-entropy
loss, gradient accumulation, epoch scheduling, checkpointing, and metric
logging.

The optimizer interface exposes train/eval parameter switching (the
schedule-free method evaluates at an averaged iterate) and a plain-SGD mode
used by the accumulation-equivalence checks.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import AugmentationConfig, apply_augmentations
from .interaction import (
    SimulationConfig,
    binarize_logits,
    draw_n,
    simulate_interaction,
)
from .masks import box_from_mask, iou, sample_point_in_mask
from .model import save_checkpoint

logger = logging.getLogger(__name__)

DICE_EPS = 1.0


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training state was dumped for inspection."""


def segmentation_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Unweighted sum of soft-dice loss and mean binary cross-entropy.

    The dice term is smoothed with ε = 1 in numerator and denominator so an
    empty ground truth with an empty prediction costs nothing.
    """
    if isinstance(gt, np.ndarray):
        gt = torch.from_numpy(gt)
    gt = gt.to(dtype=logits.dtype, device=logits.device)
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits in loss")
    p = torch.sigmoid(logits)
    intersection = (p * gt).sum()
    dice = 1.0 - (2.0 * intersection + DICE_EPS) / (p.sum() + gt.sum() + DICE_EPS)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, gt)
    return dice + ce


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    grad_accumulation_steps: int = 4
    learning_rate: float = 1e-5
    points_per_image: int = 10
    boxes_per_image: int = 10
    max_corrections: int = 5
    seed: int = 0
    optimizer: str = "schedulefree_adamw"  # or "adamw" or "sgd"
    weight_decay: float = 0.01
    warmup_steps: int = 0
    val_fraction: float = 0.1
    val_instance_cap: int = 60
    box_margin_range: tuple[int, int] = (0, 10)
    initial_point_probability: float = 0.5
    # "per_image": quotas cap how many instances get a point-/box-initiated
    # simulation per image; "per_instance": every instance gets that many
    quota_mode: str = "per_image"
    augment_enabled: bool = True
    augment: AugmentationConfig | None = None

    def __post_init__(self):
        if isinstance(self.box_margin_range, list):
            self.box_margin_range = tuple(self.box_margin_range)
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        for name in ("epochs", "batch_size", "grad_accumulation_steps"):
            if getattr(self, name) < 0 or (name != "epochs" and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")
        if self.quota_mode not in ("per_image", "per_instance"):
            raise ValueError(f"unknown quota mode {self.quota_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box_margin_range"] = list(self.box_margin_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class ScheduleFreeAdamW(torch.optim.Optimizer):
    """Adaptive moments with decoupled weight decay, schedule-free variant.

    Gradients are evaluated at y = (1-β₁)z + β₁x, the fast iterate z takes
    Adam-style steps, and x tracks the weighted average of z. Parameters
    hold y while training; call :meth:`eval_mode` to switch them to x for
    validation/checkpointing and :meth:`train_mode` to switch back.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, warmup_steps=0):
        defaults = dict(
            lr=lr, betas=betas, eps=eps, weight_decay=weight_decay,
            warmup_steps=warmup_steps, k=0, weight_sum=0.0,
        )
        super().__init__(params, defaults)
        self._train_mode = True

    def eval_mode(self):
        if not self._train_mode:
            return
        for group in self.param_groups:
            for p in group["params"]:
                state = self.state.get(p)
                if state and "x" in state:
                    p.data.copy_(state["x"])
        self._train_mode = False

    def train_mode(self):
        if self._train_mode:
            return
        for group in self.param_groups:
            beta1 = group["betas"][0]
            for p in group["params"]:
                state = self.state.get(p)
                if state and "z" in state:
                    p.data.copy_(state["x"]).mul_(beta1).add_(state["z"], alpha=1.0 - beta1)
        self._train_mode = True

    def state_dict(self):
        sd = super().state_dict()
        sd["schedulefree_train_mode"] = self._train_mode
        return sd

    def load_state_dict(self, state_dict):
        state_dict = dict(state_dict)
        mode = state_dict.pop("schedulefree_train_mode", True)
        super().load_state_dict(state_dict)
        self._train_mode = mode

    @torch.no_grad()
    def step(self, closure=None):
        if not self._train_mode:
            raise RuntimeError("step() while parameters hold averaged weights")
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            group["k"] += 1
            k = group["k"]
            warmup = group["warmup_steps"]
            sched = min(1.0, k / warmup) if warmup > 0 else 1.0
            gamma = group["lr"] * sched
            bias_correction2 = 1.0 - beta2**k
            group["weight_sum"] += gamma**2
            c = (gamma**2 / group["weight_sum"]) if group["weight_sum"] > 0 else 0.0
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["z"] = p.detach().clone()
                    state["x"] = p.detach().clone()
                    state["exp_avg_sq"] = torch.zeros_like(p)
                grad = p.grad
                v = state["exp_avg_sq"]
                v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                denom = (v / bias_correction2).sqrt_().add_(group["eps"])
                z = state["z"]
                z.addcdiv_(grad, denom, value=-gamma)
                if group["weight_decay"] != 0.0:
                    z.add_(p, alpha=-gamma * group["weight_decay"])  # decay at y
                x = state["x"]
                x.mul_(1.0 - c).add_(z, alpha=c)
                p.data.copy_(x).mul_(beta1).add_(z, alpha=1.0 - beta1)
        return loss


class PlainSgd(torch.optim.SGD):
    """Vanilla gradient descent behind the shared optimizer interface."""

    def eval_mode(self):
        pass

    def train_mode(self):
        pass


class PlainAdamW(torch.optim.AdamW):
    def eval_mode(self):
        pass

    def train_mode(self):
        pass


def make_optimizer(name: str, params, cfg: TrainConfig):
    if name == "schedulefree_adamw":
        return ScheduleFreeAdamW(
            params,
            lr=cfg.learning_rate,
            weight_decay=cfg.weight_decay,
            warmup_steps=cfg.warmup_steps,
        )
    if name == "adamw":
        return PlainAdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if name == "sgd":
        return PlainSgd(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainState:
    epoch: int = 0
    batch_index: int = 0
    micro_step: int = 0
    optim_step: int = 0
    best_val_iou: float = -1.0
    permutation: list[int] | None = None
    rng_state: dict | None = None
    optimizer_state: dict | None = None


def save_train_state(state: TrainState, path) -> None:
    torch.save(asdict(state), path)


def load_train_state(path) -> TrainState:
    return TrainState(**torch.load(path, weights_only=False))


def split_indices(n: int, val_fraction: float, seed: int):
    """Deterministic train/val index split."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _simulation_config(cfg: TrainConfig) -> SimulationConfig:
    return SimulationConfig(
        max_corrections=cfg.max_corrections,
        initial_point_probability=cfg.initial_point_probability,
        box_margin_range=cfg.box_margin_range,
        click_placement="random",
    )


def image_loss(model, sample, cfg: TrainConfig, rng: np.random.Generator):
    """Mean interactive-simulation loss over one image's sampled instances.

    Each selected instance runs one simulation; point quotas force a point
    initial prompt, box quotas force a box with a random margin. Returns
    None when the image has no usable instances (callers skip it).
    """
    image, masks = sample.image, list(sample.masks)
    if cfg.augment_enabled:
        aug = cfg.augment or AugmentationConfig(output_size=model.input_size)
        image, masks = apply_augmentations(image, masks, aug, rng)
    masks = [m for m in masks if m.any()]
    if not masks:
        return None
    sim_cfg = _simulation_config(cfg)
    if cfg.quota_mode == "per_instance":
        point_idx = list(range(len(masks))) * cfg.points_per_image
        box_idx = list(range(len(masks))) * cfg.boxes_per_image
    else:
        k_pts = min(cfg.points_per_image, len(masks))
        k_box = min(cfg.boxes_per_image, len(masks))
        point_idx = rng.choice(len(masks), size=k_pts, replace=False).tolist()
        box_idx = rng.choice(len(masks), size=k_box, replace=False).tolist()
    embedding = model.encode_image(image)
    losses = []
    lo, hi = cfg.box_margin_range
    for idx in point_idx:
        gt = masks[idx]
        initial = sample_point_in_mask(gt, rng)
        _, logits = simulate_interaction(
            model, image, gt, draw_n(sim_cfg, rng), sim_cfg, rng,
            embedding=embedding, initial=initial,
        )
        losses.append(segmentation_loss(logits, gt))
    for idx in box_idx:
        gt = masks[idx]
        initial = box_from_mask(gt, margin=int(rng.integers(lo, hi + 1)))
        _, logits = simulate_interaction(
            model, image, gt, draw_n(sim_cfg, rng), sim_cfg, rng,
            embedding=embedding, initial=initial,
        )
        losses.append(segmentation_loss(logits, gt))
    return torch.stack(losses).mean()


def train_step(model, batch, cfg: TrainConfig, optimizer, rng, accumulation_index: int):
    """One micro-batch: mean image loss, scaled backward, optimizer step on
    the accumulation boundary. Returns the unscaled loss value, or None if
    every image in the batch was skipped."""
    losses = []
    for sample in batch:
        loss = image_loss(model, sample, cfg, rng)
        if loss is None:
            logger.warning("skipping image %s: no instances", sample.image_id or "<unnamed>")
            continue
        losses.append(loss)
    if not losses:
        return None
    loss = torch.stack(losses).mean()
    (loss / cfg.grad_accumulation_steps).backward()
    if (accumulation_index + 1) % cfg.grad_accumulation_steps == 0:
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
    return float(loss.detach())


@torch.no_grad()
def evaluate_single_prompt(model, samples, start: str, rng: np.random.Generator,
                           instance_cap: int | None = None) -> float:
    """Mean IoU over instances from a single prompt, point- or box-started."""
    ious, seen = [], 0
    for sample in samples:
        usable = [m for m in sample.masks if m.any()]
        if not usable:
            continue
        embedding = model.encode_image(sample.image)
        for gt in usable:
            if instance_cap is not None and seen >= instance_cap:
                return float(np.mean(ious)) if ious else 0.0
            if start == "point":
                p = sample_point_in_mask(gt, rng)
                logits = model.predict_logits(embedding, points=[p])
            else:
                logits = model.predict_logits(embedding, boxes=[box_from_mask(gt)])
            ious.append(iou(binarize_logits(logits), gt))
            seen += 1
    return float(np.mean(ious)) if ious else 0.0


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def train(
    model,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume_state: TrainState | None = None,
    stop_after_optim_steps: int | None = None,
) -> TrainResult:
    """Run the fine-tuning loop.

    Logs one JSON line per micro-step and a validation entry per epoch when
    ``out_dir`` is given, alongside best-IoU and last checkpoints. The
    returned state resumes training deterministically from an optimizer-step
    boundary: the loss trajectory matches an uninterrupted run.
    """
    history: list[dict] = []
    state = resume_state or TrainState()
    if cfg.epochs == 0 or len(dataset) == 0:
        return TrainResult(model=model, history=history, state=state)

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    if not train_idx:
        raise ValueError("empty training split")
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(cfg.optimizer, params, cfg)
    if resume_state is not None:
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state
        if state.optimizer_state is not None:
            optimizer.load_state_dict(state.optimizer_state)

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a")

    def emit(entry: dict):
        history.append(entry)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(entry) + "\n")
            metrics_fh.flush()

    def capture() -> TrainState:
        state.rng_state = rng.bit_generator.state
        state.optimizer_state = optimizer.state_dict()
        return state

    def dump_and_raise(loss_val, tag):
        if out_dir is not None:
            save_train_state(capture(), os.path.join(out_dir, "diverged_state.pt"))
            save_checkpoint(model, os.path.join(out_dir, "diverged.ckpt"))
        raise TrainingDivergedError(f"non-finite loss {loss_val} at {tag}")

    try:
        model.train()
        optimizer.train_mode()
        for epoch in range(state.epoch, cfg.epochs):
            if state.permutation is None:
                state.permutation = rng.permutation(train_idx).tolist()
                state.batch_index = 0
            batches = [
                state.permutation[i : i + cfg.batch_size]
                for i in range(0, len(state.permutation), cfg.batch_size)
            ]
            for bi in range(state.batch_index, len(batches)):
                batch = [dataset[j] for j in batches[bi]]
                t0 = time.monotonic()
                loss_val = train_step(model, batch, cfg, optimizer, rng, state.micro_step)
                if loss_val is not None:
                    if not math.isfinite(loss_val):
                        dump_and_raise(loss_val, f"epoch {epoch} batch {bi}")
                    stepped = (state.micro_step + 1) % cfg.grad_accumulation_steps == 0
                    state.micro_step += 1
                    if stepped:
                        state.optim_step += 1
                    emit(
                        {
                            "type": "step",
                            "epoch": epoch,
                            "micro_step": state.micro_step,
                            "optim_step": state.optim_step,
                            "loss": loss_val,
                            "seconds": round(time.monotonic() - t0, 4),
                        }
                    )
                state.batch_index = bi + 1
                if (
                    stop_after_optim_steps is not None
                    and state.optim_step >= stop_after_optim_steps
                    and state.micro_step % cfg.grad_accumulation_steps == 0
                ):
                    state.epoch = epoch
                    return TrainResult(model=model, history=history, state=capture())
            # epoch finished
            state.permutation = None
            state.epoch = epoch + 1
            model.eval()
            optimizer.eval_mode()
            val_samples = [dataset[j] for j in val_idx]
            val_rng = np.random.default_rng(cfg.seed + 1000 + epoch)
            box_iou = evaluate_single_prompt(model, val_samples, "box", val_rng, cfg.val_instance_cap)
            point_iou = evaluate_single_prompt(model, val_samples, "point", val_rng, cfg.val_instance_cap)
            emit(
                {
                    "type": "epoch",
                    "epoch": epoch,
                    "val_iou_box": box_iou,
                    "val_iou_point": point_iou,
                }
            )
            if out_dir is not None:
                save_checkpoint(model, os.path.join(out_dir, "last.ckpt"))
                if box_iou > state.best_val_iou:
                    state.best_val_iou = box_iou
                    save_checkpoint(model, os.path.join(out_dir, "best.ckpt"))
            elif box_iou > state.best_val_iou:
                state.best_val_iou = box_iou
            model.train()
            optimizer.train_mode()
        # leave the model holding evaluation weights
        model.eval()
        optimizer.eval_mode()
        return TrainResult(model=model, history=history, state=capture())
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
