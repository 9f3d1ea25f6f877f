"""Promptable segmentation backbone: image encoder, prompt encoder, mask
decoder, low-rank adapter injection, and checkpoint I/O.

The desk-scale backbone here is a small vision transformer trainable on CPU
in minutes; it exercises the same interfaces a full-scale encoder would sit
behind. Fine-tuning freezes the encoder weights and trains only the low-rank
adapters on its attention projections, the prompt encoder, and the decoder.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import uuid
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masks import BoxPrompt, PointPrompt

CHECKPOINT_VERSION = 1

# prompt token types
POS_POINT, NEG_POINT, BOX_TL, BOX_BR = 0, 1, 2, 3


class ModelConfigError(ValueError):
    """Inconsistent model configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or does not match the expected config."""


@dataclass
class ModelConfig:
    variant: str = "toy"
    input_size: int = 128
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    decoder_depth: int = 2
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: tuple[str, ...] = ("q_proj", "v_proj")
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lora_targets, list):
            self.lora_targets = tuple(self.lora_targets)
        if self.input_size % self.patch_size != 0:
            raise ModelConfigError(
                f"input size {self.input_size} not divisible by patch {self.patch_size}"
            )
        if self.patch_size & (self.patch_size - 1):
            raise ModelConfigError("patch size must be a power of two")
        if self.embed_dim % self.num_heads != 0:
            raise ModelConfigError("embed dim must divide evenly into heads")
        if not 1 <= self.lora_rank <= self.embed_dim:
            raise ModelConfigError(
                f"lora rank {self.lora_rank} outside [1, {self.embed_dim}]"
            )

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ImageEmbedding:
    """Cached per-image state: the encoder's feature grid plus the
    decoder's prompt-independent high-resolution skip features. Reusable
    across any number of prompt sets."""

    features: torch.Tensor  # (grid_h, grid_w, C)
    model_uid: str
    pixel_skip: torch.Tensor | None = None  # (1, out_ch, S, S)

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValueError(f"embedding must be (grid_h, grid_w, C), got {self.features.shape}")


@dataclass
class PromptEmbedding:
    """Sparse prompt tokens plus the raw prompts they encode."""

    tokens: torch.Tensor  # (T, C)
    points: tuple[PointPrompt, ...]
    boxes: tuple[BoxPrompt, ...]
    model_uid: str


class CoordinateEncoder(nn.Module):
    """Random-Fourier positional encoding shared by image grid and prompts.

    Tying the two encodings lets cross-attention match click coordinates to
    grid cells directly instead of learning the correspondence.
    """

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        gaussian = torch.randn((2, dim // 2), generator=gen) * 4.0
        self.register_buffer("gaussian", gaussian)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        """coords: (..., 2) in [0, 1] (row, col) -> (..., dim)."""
        proj = 2.0 * math.pi * coords.to(self.gaussian.dtype) @ self.gaussian
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid(self, grid_h: int, grid_w: int) -> torch.Tensor:
        rows = (torch.arange(grid_h, dtype=self.gaussian.dtype) + 0.5) / grid_h
        cols = (torch.arange(grid_w, dtype=self.gaussian.dtype) + 0.5) / grid_w
        rr, cc = torch.meshgrid(rows, cols, indexing="ij")
        return self.forward(torch.stack([rr, cc], dim=-1))


class Attention(nn.Module):
    """Multi-head attention with explicit q/k/v/out projections.

    Projections are separate ``nn.Linear`` modules so adapters can target
    them by name.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        # inputs: (B, Nq, C) and (B, Nk, C)
        b, nq, c = q_in.shape
        nk = kv_in.shape[1]
        q = self.q_proj(q_in).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv_in).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv_in).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, nq, c)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, coord_enc: CoordinateEncoder):
        super().__init__()
        self.cfg = cfg
        self.coord_enc = coord_enc
        self.patch_embed = nn.Conv2d(
            3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.blocks = nn.ModuleList(
            [EncoderBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # image: (B, 3, S, S) in [0, 1] -> (B, grid, grid, C)
        x = self.patch_embed(image * 2.0 - 1.0)  # (B, C, g, g)
        b, c, gh, gw = x.shape
        x = x.permute(0, 2, 3, 1)  # (B, g, g, C)
        x = x + self.coord_enc.grid(gh, gw).to(x.dtype)
        x = x.reshape(b, gh * gw, c)
        for block in self.blocks:
            x = block(x)
        return self.norm(x).reshape(b, gh, gw, c)


class PromptEncoder(nn.Module):
    """Turns points and boxes into tokens: positional encoding of the
    coordinate plus a learned embedding for the prompt type."""

    def __init__(self, cfg: ModelConfig, coord_enc: CoordinateEncoder):
        super().__init__()
        self.cfg = cfg
        self.coord_enc = coord_enc
        self.type_embed = nn.Embedding(4, cfg.embed_dim)

    def forward(self, points, boxes) -> torch.Tensor:
        size = float(self.cfg.input_size)
        coords, kinds = [], []
        for p in points:
            if not (0 <= p.row < size and 0 <= p.col < size):
                raise ValueError(f"point {p} outside model input space [0, {int(size)})")
            coords.append(((p.row + 0.5) / size, (p.col + 0.5) / size))
            kinds.append(POS_POINT if p.positive else NEG_POINT)
        for b in boxes:
            if not (0 <= b.row_min and b.row_max < size and 0 <= b.col_min and b.col_max < size):
                raise ValueError(f"box {b} outside model input space [0, {int(size)})")
            coords.append(((b.row_min + 0.5) / size, (b.col_min + 0.5) / size))
            kinds.append(BOX_TL)
            coords.append(((b.row_max + 0.5) / size, (b.col_max + 0.5) / size))
            kinds.append(BOX_BR)
        if not coords:
            raise ValueError("prompt set must contain at least one point or box")
        device = self.type_embed.weight.device
        coord_t = torch.tensor(coords, dtype=self.type_embed.weight.dtype, device=device)
        kind_t = torch.tensor(kinds, dtype=torch.long, device=device)
        return self.coord_enc(coord_t) + self.type_embed(kind_t)


class DecoderBlock(nn.Module):
    """Two-way block: tokens self-attend, read from the image, pass through
    an MLP, and then the image features read back from the tokens so prompt
    information localizes in the spatial map."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.norm4 = nn.LayerNorm(dim)
        self.image_attn = Attention(dim, num_heads)

    def forward(self, tokens, image_feats, image_pe):
        h = self.norm1(tokens)
        tokens = tokens + self.self_attn(h, h)
        tokens = tokens + self.cross_attn(self.norm2(tokens), image_feats + image_pe)
        tokens = tokens + self.mlp(self.norm3(tokens))
        image_feats = image_feats + self.image_attn(
            self.norm4(image_feats + image_pe), tokens
        )
        return tokens, image_feats


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, coord_enc: CoordinateEncoder):
        super().__init__()
        self.cfg = cfg
        self.coord_enc = coord_enc
        dim = cfg.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(
            [DecoderBlock(dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)]
        )
        self.image_attn = Attention(dim, cfg.num_heads)  # image attends back to tokens
        self.image_norm = nn.LayerNorm(dim)
        out_ch = max(dim // 8, 8)
        ups = []
        ch = dim
        for _ in range(int(math.log2(cfg.patch_size))):
            nxt = max(ch // 2, out_ch)
            ups += [nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2), nn.GELU()]
            ch = nxt
        ups.append(nn.Conv2d(ch, out_ch, kernel_size=1))
        self.upsample = nn.Sequential(*ups)
        # full-resolution skip from the raw image; the grid path alone
        # cannot recover sub-patch boundary detail
        self.pixel_skip = nn.Sequential(
            nn.Conv2d(3, out_ch, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        )
        self.hyper = Mlp(dim, 1.0)
        self.hyper_out = nn.Linear(dim, out_ch)

    def forward(
        self,
        features: torch.Tensor,
        prompt_tokens: torch.Tensor,
        skip: torch.Tensor | None = None,
    ) -> torch.Tensor:
        # features: (grid, grid, C); prompt_tokens: (T, C) -> logits (S, S)
        gh, gw, c = features.shape
        pe = self.coord_enc.grid(gh, gw).to(features.dtype).reshape(1, gh * gw, c)
        img = features.reshape(1, gh * gw, c)
        tokens = torch.cat([self.mask_token, prompt_tokens], dim=0).unsqueeze(0)
        for block in self.blocks:
            tokens, img = block(tokens, img, pe)
        img = img + self.image_attn(self.image_norm(img + pe), tokens)
        spatial = img.reshape(1, gh, gw, c).permute(0, 3, 1, 2)
        pixel_feats = self.upsample(spatial)  # (1, out_ch, S, S)
        if skip is not None:
            pixel_feats = pixel_feats + skip
        mask_out = self.hyper_out(self.hyper(tokens[:, 0]))  # (1, out_ch)
        logits = torch.einsum("bchw,bc->bhw", pixel_feats, mask_out)
        return logits[0]


class LoraLinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update.

    Output is ``base(x) + (alpha/r) * B(A(x))`` with A Gaussian-initialized
    and B zero, so the wrapped layer computes exactly the base mapping until
    training moves B.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, seed: int = 0):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ModelConfigError(
                f"rank {rank} exceeds layer dims {base.in_features}x{base.out_features}"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        gen = torch.Generator().manual_seed(seed)
        a = torch.randn((rank, base.in_features), generator=gen) / math.sqrt(base.in_features)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = (x @ self.lora_a.transpose(0, 1)) @ self.lora_b.transpose(0, 1)
        return self.base(x) + (self.alpha / self.rank) * update


class ToyPromptableModel(nn.Module):
    """Desk-scale promptable segmentation model.

    ``encode_image`` is the expensive call; its embedding is cacheable and
    reusable across any number of prompt sets for the same image.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(self.config.seed)
        self.coord_enc = CoordinateEncoder(self.config.embed_dim, seed=self.config.seed)
        self.encoder = ImageEncoder(self.config, self.coord_enc)
        self.prompt_encoder = PromptEncoder(self.config, self.coord_enc)
        self.decoder = MaskDecoder(self.config, self.coord_enc)
        self.uid = uuid.uuid4().hex
        self.lora_injected = False
        self.encode_calls = 0  # instrumentation: embedding-reuse checks

    @property
    def input_size(self) -> int:
        return self.config.input_size

    def _to_tensor(self, image) -> torch.Tensor:
        if isinstance(image, np.ndarray):
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValueError(f"image must be (H, W, 3), got {image.shape}")
            image = torch.from_numpy(np.ascontiguousarray(image))
        dtype = self.encoder.patch_embed.weight.dtype
        return image.to(dtype).permute(2, 0, 1).unsqueeze(0)

    def encode_image(self, image) -> ImageEmbedding:
        s = self.config.input_size
        t = self._to_tensor(image)
        if t.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got {tuple(t.shape[-2:])}")
        self.encode_calls += 1
        feats = self.encoder(t)[0]
        skip = self.decoder.pixel_skip(t * 2.0 - 1.0)
        return ImageEmbedding(features=feats, model_uid=self.uid, pixel_skip=skip)

    def encode_prompts(self, points=(), boxes=()) -> PromptEmbedding:
        tokens = self.prompt_encoder(points, boxes)
        return PromptEmbedding(
            tokens=tokens, points=tuple(points), boxes=tuple(boxes), model_uid=self.uid
        )

    def decode_mask(self, embedding: ImageEmbedding, prompts: PromptEmbedding) -> torch.Tensor:
        if embedding.model_uid != self.uid or prompts.model_uid != self.uid:
            raise ValueError("embedding/prompts were produced by a different model instance")
        return self.decoder(embedding.features, prompts.tokens, embedding.pixel_skip)

    def predict_logits(self, embedding: ImageEmbedding, points=(), boxes=()) -> torch.Tensor:
        return self.decode_mask(embedding, self.encode_prompts(points, boxes))


def inject_lora(model: ToyPromptableModel, cfg: ModelConfig | None = None) -> ToyPromptableModel:
    """Freeze the image encoder and attach low-rank adapters to its target
    projections; prompt encoder and decoder stay fully trainable.

    Immediately after injection the forward pass is unchanged (B starts at
    zero).
    """
    cfg = cfg or model.config
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    replaced = 0
    for name, module in list(model.encoder.named_modules()):
        for child_name, child in list(module.named_children()):
            if child_name in cfg.lora_targets and isinstance(child, nn.Linear):
                seed = cfg.seed * 7919 + replaced
                setattr(module, child_name, LoraLinear(child, cfg.lora_rank, cfg.lora_alpha, seed))
                replaced += 1
    if replaced == 0:
        raise ModelConfigError(f"no encoder projections matched targets {cfg.lora_targets}")
    model.lora_injected = True
    return model


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def parameter_census(model: ToyPromptableModel) -> dict[str, int]:
    """Trainable parameter counts by subsystem."""
    counts = {"adapters": 0, "prompt_encoder": 0, "decoder": 0, "frozen": 0, "other": 0}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            counts["frozen"] += p.numel()
        elif "lora_" in name:
            counts["adapters"] += p.numel()
        elif name.startswith("prompt_encoder."):
            counts["prompt_encoder"] += p.numel()
        elif name.startswith("decoder."):
            counts["decoder"] += p.numel()
        else:
            counts["other"] += p.numel()
    return counts


def save_checkpoint(model: ToyPromptableModel, path) -> None:
    """Write a self-describing checkpoint: JSON header + named arrays.

    The header records the format version, the model config, whether
    adapters are injected, and a content checksum of the arrays payload.
    """
    buf = io.BytesIO()
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "lora_injected": model.lora_injected,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2))
        zf.writestr("params.npz", payload)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ToyPromptableModel:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on corruption, unknown versions, or when
    ``expected_config`` disagrees with the stored one.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            payload = zf.read("params.npz")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise CheckpointError(f"checksum mismatch in {path}; file is corrupt")
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = {
            k: (expected_config.to_dict()[k], config.to_dict()[k])
            for k in config.to_dict()
            if expected_config.to_dict()[k] != config.to_dict()[k]
        }
        raise CheckpointError(f"config mismatch (expected, stored): {diff}")
    model = ToyPromptableModel(config)
    if header.get("lora_injected"):
        inject_lora(model)
    with np.load(io.BytesIO(payload)) as npz:
        state = {k: torch.from_numpy(npz[k]) for k in npz.files}
    model.load_state_dict(state, strict=True)
    return model
