"""Basic visual features, encoder, instance decoder and detection heads.

Tensors are batch-first: images ``[B, H, W, C]``, token sets ``[B, N, D]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidConfigError, NumericError, ShapeError
from .layers import MLP, DecoderLayer, EncoderLayer


def sine_position_embedding(rows: int, cols: int, dim: int, temperature: float = 10000.0,
                            dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, ``[rows * cols, dim]`` in row-major order.

    Half the channels encode the row, half the column; coordinates are
    normalized to (0, 2*pi].
    """
    if dim % 4:
        raise InvalidConfigError(f"position embedding width must be divisible by 4, got {dim}")
    npf = dim // 2
    y = (torch.arange(rows, dtype=torch.float64) + 1) / rows * 2 * math.pi
    x = (torch.arange(cols, dtype=torch.float64) + 1) / cols * 2 * math.pi
    dim_t = torch.arange(npf, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / npf)
    pos_y = y[:, None] / dim_t
    pos_x = x[:, None] / dim_t
    pos_y = torch.stack([pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()], dim=2).flatten(1)
    pos_x = torch.stack([pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()], dim=2).flatten(1)
    grid = torch.cat(
        [pos_y[:, None, :].expand(rows, cols, npf), pos_x[None, :, :].expand(rows, cols, npf)], dim=2
    )
    return grid.reshape(rows * cols, dim).to(dtype)


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # [B, N^v, D^v], position embeddings included
    grid: Tuple[int, int]
    pos: torch.Tensor  # [N^v, D^v]


@dataclass
class EncoderMemory:
    tokens: torch.Tensor
    pos: torch.Tensor
    grid: Tuple[int, int]


@dataclass
class HOSpatialTokens:
    human: torch.Tensor  # [B, N^q, D^v]
    object: torch.Tensor

    @property
    def paired(self) -> torch.Tensor:
        """Row-concatenated ``[B, 2 N^q, D^v]`` token set."""
        return torch.cat([self.human, self.object], dim=1)

    def prompt(self) -> torch.Tensor:
        return (self.human + self.object) / 2


@dataclass
class InstancePredictions:
    human_boxes: torch.Tensor  # [B, N^q, 4] cxcywh in [0, 1]
    object_boxes: torch.Tensor
    object_logits: torch.Tensor  # [B, N^q, N^c + 1], last slot is no-object


class PatchEmbed(nn.Module):
    """Strided patchify followed by a learned linear map."""

    def __init__(self, in_channels: int, dim: int, stride: int):
        super().__init__()
        self.stride = stride
        self.in_channels = in_channels
        self.dim = dim
        self.proj = nn.Linear(stride * stride * in_channels, dim)

    def patches(self, images: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, int]]:
        b, h, w, c = images.shape
        s = self.stride
        if h % s or w % s:
            raise ShapeError(f"image size {h}x{w} is not divisible by stride {s}")
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        rows, cols = h // s, w // s
        x = images.reshape(b, rows, s, cols, s, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, rows * cols, s * s * c), (rows, cols)

    def forward(self, images: torch.Tensor) -> PatchSequence:
        flat, grid = self.patches(images)
        pos = sine_position_embedding(*grid, self.dim, dtype=flat.dtype).to(flat.device)
        return PatchSequence(self.proj(flat) + pos, grid, pos)


class Encoder(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, num_layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ffn_dim, dropout) for _ in range(num_layers))

    def forward(self, patches: PatchSequence) -> EncoderMemory:
        x = patches.tokens
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in encoder input")
        for layer in self.layers:
            x = layer(x, patches.pos)
        return EncoderMemory(x, patches.pos, patches.grid)


class QueryBank(nn.Module):
    def __init__(self, num_queries: int, dim: int):
        super().__init__()
        if num_queries <= 0:
            raise InvalidConfigError(f"number of queries must be positive, got {num_queries}")
        self.human = nn.Parameter(torch.randn(num_queries, dim))
        self.object = nn.Parameter(torch.randn(num_queries, dim))
        self.guided = nn.Parameter(torch.randn(num_queries, dim))

    @property
    def num_queries(self) -> int:
        return self.human.shape[0]


class InstanceDecoder(nn.Module):
    """Human and object streams decoded jointly so pairs can see each other.

    Query ``i`` of both streams carries the same position-guided row, added
    at every layer.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, num_layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, ffn_dim, dropout) for _ in range(num_layers))

    def forward(self, memory: EncoderMemory, queries: QueryBank) -> HOSpatialTokens:
        return self.forward_layers(memory, queries)[-1]

    def forward_layers(self, memory: EncoderMemory, queries: QueryBank) -> List[HOSpatialTokens]:
        """Output after every layer (just the zero-initialized input when there are none)."""
        b, _, d = memory.tokens.shape
        if queries.human.shape[1] != d:
            raise ShapeError(f"query width {queries.human.shape[1]} != memory width {d}")
        nq = queries.num_queries
        query_pos = torch.cat([queries.human + queries.guided, queries.object + queries.guided], dim=0)
        query_pos = query_pos.unsqueeze(0).expand(b, -1, -1)
        tgt = torch.zeros_like(query_pos)
        outs = [] if self.layers else [HOSpatialTokens(tgt[:, :nq], tgt[:, nq:])]
        for layer in self.layers:
            tgt = layer(tgt, memory.tokens, query_pos=query_pos, memory_pos=memory.pos)
            outs.append(HOSpatialTokens(tgt[:, :nq], tgt[:, nq:]))
        return outs


class InstanceHeads(nn.Module):
    def __init__(self, dim: int, num_objects: int):
        super().__init__()
        self.human_box = MLP(dim, dim, 4, 3)
        self.object_box = MLP(dim, dim, 4, 3)
        self.object_class = nn.Linear(dim, num_objects + 1)

    def forward(self, tokens: HOSpatialTokens) -> InstancePredictions:
        return InstancePredictions(
            self.human_box(tokens.human).sigmoid(),
            self.object_box(tokens.object).sigmoid(),
            self.object_class(tokens.object),
        )


def pad_to_stride(images: torch.Tensor, stride: int) -> torch.Tensor:
    """Zero-pad bottom/right so both sides divide ``stride``."""
    h, w = images.shape[1:3]
    ph, pw = (-h) % stride, (-w) % stride
    if ph == 0 and pw == 0:
        return images
    return F.pad(images, (0, 0, 0, pw, 0, ph))


def _batched(x: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


def embed_patches(image, backbone: PatchEmbed) -> PatchSequence:
    """Patch tokens plus sinusoidal positions; accepts ``[H, W, C]`` or a batch."""
    image = torch.as_tensor(image, dtype=backbone.proj.weight.dtype)
    image, _ = _batched(image, 4)
    return backbone(image)


def encode(patches: PatchSequence, encoder: Encoder) -> EncoderMemory:
    return encoder(patches)


def decode_instances(memory: EncoderMemory, queries: QueryBank, decoder: InstanceDecoder) -> HOSpatialTokens:
    return decoder(memory, queries)


def predict_instances(tokens: HOSpatialTokens, heads: InstanceHeads) -> InstancePredictions:
    return heads(tokens)
