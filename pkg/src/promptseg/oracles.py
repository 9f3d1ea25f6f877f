"""Deterministic stand-ins for the promptable model, used by tests and by
harness sanity runs. They implement the same encode/decode surface as the
real model but look answers up instead of computing them."""

from __future__ import annotations

import hashlib
import uuid

import numpy as np
import torch

from .masks import as_mask
from .model import ImageEmbedding, PromptEmbedding

_ON, _OFF = 40.0, -40.0


def _select_instance(instances, prompts: PromptEmbedding) -> np.ndarray | None:
    """Instance addressed by a prompt set: for a box, the instance the box
    most completely contains (a padded box always contains its own instance
    fully, while neighbors it merely clips score below 1); for a point, the
    instance under the click."""
    if prompts.boxes:
        b = prompts.boxes[0]
        best, best_key = None, (0.0, 0)
        for m in instances:
            overlap = int(
                np.count_nonzero(m[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1])
            )
            if overlap == 0:
                continue
            key = (overlap / int(np.count_nonzero(m)), overlap)
            if key > best_key:
                best, best_key = m, key
        return best
    p = prompts.points[0]
    for m in instances:
        if m[p.row, p.col]:
            return m
    return None


def _logits_for(chosen: np.ndarray | None, size: int) -> torch.Tensor:
    logits = torch.full((size, size), _OFF)
    if chosen is not None:
        logits[torch.from_numpy(chosen)] = _ON
    return logits


class MaskOracleModel:
    """Returns the ground-truth instance addressed by the prompt set.

    A box prompt selects the instance with maximal overlap with the box
    region; a point prompt selects the instance containing the click. When
    nothing matches, the prediction is empty. Corrections never change the
    answer, so interactive loops converge immediately.
    """

    def __init__(self, instances, input_size: int):
        self.instances = [as_mask(m) for m in instances]
        for m in self.instances:
            if m.shape != (input_size, input_size):
                raise ValueError(f"oracle instance shape {m.shape} != model size {input_size}")
        self.input_size = input_size
        self.uid = uuid.uuid4().hex
        self.encode_calls = 0

    def encode_image(self, image) -> ImageEmbedding:
        self.encode_calls += 1
        return ImageEmbedding(features=torch.zeros(1, 1, 1), model_uid=self.uid)

    def encode_prompts(self, points=(), boxes=()) -> PromptEmbedding:
        if not points and not boxes:
            raise ValueError("prompt set must contain at least one point or box")
        return PromptEmbedding(
            tokens=torch.zeros(len(points) + 2 * len(boxes), 1),
            points=tuple(points),
            boxes=tuple(boxes),
            model_uid=self.uid,
        )

    def decode_mask(self, embedding: ImageEmbedding, prompts: PromptEmbedding) -> torch.Tensor:
        if embedding.model_uid != self.uid or prompts.model_uid != self.uid:
            raise ValueError("embedding/prompts from a different model instance")
        chosen = _select_instance(self.instances, prompts)
        return _logits_for(chosen, self.input_size)

    def predict_logits(self, embedding, points=(), boxes=()) -> torch.Tensor:
        return self.decode_mask(embedding, self.encode_prompts(points, boxes))


class PerImageOracleModel:
    """Oracle over a whole dataset: recognizes each preprocessed image by
    content and answers with that image's own ground-truth instances.

    Instances are expected at the model's input resolution (scale-1
    preprocessing), so harness trajectories come out exactly 1.0.
    """

    def __init__(self, samples, input_size: int):
        from .pipeline import preprocess

        self.input_size = input_size
        self.uid = uuid.uuid4().hex
        self.encode_calls = 0
        self._instances: list[list[np.ndarray]] = []
        self._key_to_index: dict[str, int] = {}
        for sample in samples:
            index = len(self._instances)
            model_input, _ = preprocess(sample.image, input_size)
            for arr in (model_input, sample.image):  # preprocessed or raw
                key = hashlib.sha1(np.ascontiguousarray(arr).tobytes()).hexdigest()
                self._key_to_index[key] = index
            self._instances.append([as_mask(m) for m in sample.masks])

    def encode_image(self, image) -> ImageEmbedding:
        self.encode_calls += 1
        key = hashlib.sha1(np.ascontiguousarray(np.asarray(image)).tobytes()).hexdigest()
        if key not in self._key_to_index:
            raise KeyError("image not registered with this oracle")
        index = self._key_to_index[key]
        return ImageEmbedding(
            features=torch.full((1, 1, 1), float(index)), model_uid=self.uid
        )

    def encode_prompts(self, points=(), boxes=()) -> PromptEmbedding:
        if not points and not boxes:
            raise ValueError("prompt set must contain at least one point or box")
        return PromptEmbedding(
            tokens=torch.zeros(len(points) + 2 * len(boxes), 1),
            points=tuple(points),
            boxes=tuple(boxes),
            model_uid=self.uid,
        )

    def decode_mask(self, embedding: ImageEmbedding, prompts: PromptEmbedding) -> torch.Tensor:
        if embedding.model_uid != self.uid or prompts.model_uid != self.uid:
            raise ValueError("embedding/prompts from a different model instance")
        instances = self._instances[int(embedding.features.view(-1)[0].item())]
        chosen = _select_instance(instances, prompts)
        return _logits_for(chosen, self.input_size)

    def predict_logits(self, embedding, points=(), boxes=()) -> torch.Tensor:
        return self.decode_mask(embedding, self.encode_prompts(points, boxes))


class ConstantEmptyModel:
    """Always predicts an empty mask, whatever the prompts."""

    def __init__(self, input_size: int):
        self.input_size = input_size
        self.uid = uuid.uuid4().hex
        self.encode_calls = 0

    def encode_image(self, image) -> ImageEmbedding:
        self.encode_calls += 1
        return ImageEmbedding(features=torch.zeros(1, 1, 1), model_uid=self.uid)

    def encode_prompts(self, points=(), boxes=()) -> PromptEmbedding:
        return PromptEmbedding(
            tokens=torch.zeros(len(points) + 2 * len(boxes), 1),
            points=tuple(points),
            boxes=tuple(boxes),
            model_uid=self.uid,
        )

    def decode_mask(self, embedding, prompts) -> torch.Tensor:
        return torch.full((self.input_size, self.input_size), _OFF)

    def predict_logits(self, embedding, points=(), boxes=()) -> torch.Tensor:
        return self.decode_mask(embedding, self.encode_prompts(points, boxes))
