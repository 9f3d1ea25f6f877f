"""Simulated interactive prompting: an initial point or box, then up to n
corrective clicks sampled from the largest error region of the current
prediction.

Intermediate predictions run without gradient tracking; only the final
prediction participates in the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .masks import (
    BoxPrompt,
    EmptyMaskError,
    PointPrompt,
    box_from_mask,
    sample_correction_click,
    sample_point_in_mask,
)


@dataclass
class SimulationConfig:
    max_corrections: int = 5
    initial_point_probability: float = 0.5
    box_margin_range: tuple[int, int] = (0, 10)
    # "random": uniform pixel in the error component (training);
    # "center": deterministic distance-transform center (evaluation)
    click_placement: str = "random"
    # dense feedback of the previous mask logits into the decoder; the
    # interaction protocol here is prompts-only and this stays unimplemented
    use_mask_feedback: bool = False

    def __post_init__(self):
        if self.max_corrections < 0:
            raise ValueError("max_corrections must be >= 0")
        if not 0.0 <= self.initial_point_probability <= 1.0:
            raise ValueError("initial_point_probability outside [0, 1]")
        lo, hi = self.box_margin_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad box margin range {self.box_margin_range}")


@dataclass
class PromptSet:
    """One initial prompt plus the ordered corrective clicks that followed."""

    initial: PointPrompt | BoxPrompt
    corrections: list[PointPrompt] = field(default_factory=list)

    @property
    def points(self) -> list[PointPrompt]:
        pts = [self.initial] if isinstance(self.initial, PointPrompt) else []
        return pts + list(self.corrections)

    @property
    def boxes(self) -> list[BoxPrompt]:
        return [self.initial] if isinstance(self.initial, BoxPrompt) else []


def draw_n(cfg: SimulationConfig, rng: np.random.Generator) -> int:
    """Number of corrective clicks for one simulation, uniform on
    {0, ..., max_corrections}."""
    return int(rng.integers(cfg.max_corrections + 1))


def sample_initial_prompt(
    gt: np.ndarray, cfg: SimulationConfig, rng: np.random.Generator
) -> PointPrompt | BoxPrompt:
    """Random point in the ground truth, or its box with a random margin."""
    if not gt.any():
        raise EmptyMaskError("cannot prompt an empty ground-truth mask")
    if rng.random() < cfg.initial_point_probability:
        return sample_point_in_mask(gt, rng)
    lo, hi = cfg.box_margin_range
    return box_from_mask(gt, margin=int(rng.integers(lo, hi + 1)))


def binarize_logits(logits: torch.Tensor, threshold: float = 0.0) -> np.ndarray:
    """Logit threshold 0 corresponds to probability 0.5."""
    return (logits.detach().cpu().numpy() > threshold).astype(bool)


def simulate_interaction(
    model,
    image,
    gt: np.ndarray,
    n: int,
    cfg: SimulationConfig,
    rng: np.random.Generator,
    embedding=None,
    initial: PointPrompt | BoxPrompt | None = None,
):
    """Run the prompting loop against ``gt`` and return (PromptSet, logits).

    The prediction at step k is conditioned on exactly the initial prompt
    plus k corrections. The loop stops early once prediction and ground
    truth agree. ``embedding`` may be passed to reuse a cached image
    encoding; ``initial`` forces the initial prompt (the training quotas
    force point- vs box-initiated simulations explicitly).

    Only the returned logits carry gradients; the intermediate predictions
    used to place clicks are evaluated without tracking.
    """
    if cfg.use_mask_feedback:
        raise NotImplementedError("dense mask feedback is not implemented")
    if n < 0:
        raise ValueError("n must be >= 0")
    if not gt.any():
        raise EmptyMaskError("cannot simulate against an empty ground truth")
    if embedding is None:
        embedding = model.encode_image(image)
    if initial is None:
        initial = sample_initial_prompt(gt, cfg, rng)
    prompt_set = PromptSet(initial=initial)
    for _ in range(n):
        with torch.no_grad():
            logits = model.predict_logits(embedding, prompt_set.points, prompt_set.boxes)
        pred = binarize_logits(logits)
        click = sample_correction_click(pred, gt, rng=rng, placement=cfg.click_placement)
        if click is None:
            break
        prompt_set.corrections.append(click)
    final_logits = model.predict_logits(embedding, prompt_set.points, prompt_set.boxes)
    return prompt_set, final_logits
