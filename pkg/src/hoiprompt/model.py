"""The assembled detector: three feature tiers, fusion and output heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import torch
from torch import nn

from .detector import (
    Encoder,
    HOSpatialTokens,
    InstanceDecoder,
    InstanceHeads,
    PatchEmbed,
    QueryBank,
    pad_to_stride,
)
from .errors import InvalidConfigError
from .foundation import FoundationProjection, HOPromptDecoder, RelationTokens
from .interaction import InteractionDecoder, fuse, open_category_logits

VARIANT_DECODER_LAYERS = {"s": 3, "m": 3, "l": 6}


@dataclass
class ModelConfig:
    d_v: int = 256
    n_q: int = 64
    heads: int = 8
    ffn_dim: int = 1024
    stride: int = 8
    in_channels: int = 3
    encoder_layers: int = 2
    decoder_layers: Optional[int] = None  # defaults from variant
    variant: str = "s"
    num_objects: int = 3
    num_verbs: int = 4
    num_hois: int = 0  # needed when label_space is "hoi"
    label_space: str = "verb"  # closed-set logits over verbs, or over registered (verb, object) pairs
    foundation_dim: int = 768
    text_dim: int = 768
    dropout: float = 0.0
    share_open_mimic_head: bool = True
    aux_loss: bool = False

    def __post_init__(self):
        if self.variant not in VARIANT_DECODER_LAYERS:
            raise InvalidConfigError(f"variant must be one of {sorted(VARIANT_DECODER_LAYERS)}")
        if self.decoder_layers is None:
            self.decoder_layers = VARIANT_DECODER_LAYERS[self.variant]
        elif self.variant == "l" and self.decoder_layers != 6:
            raise InvalidConfigError("variant 'l' uses 6 decoder layers")
        if self.label_space not in ("verb", "hoi"):
            raise InvalidConfigError(f"label_space must be 'verb' or 'hoi', got {self.label_space!r}")
        if self.label_space == "hoi" and self.num_hois <= 0:
            raise InvalidConfigError("label_space 'hoi' needs num_hois > 0")
        if self.n_q <= 0:
            raise InvalidConfigError(f"n_q must be positive, got {self.n_q}")
        if self.d_v % self.heads or self.d_v % 4:
            raise InvalidConfigError(f"d_v={self.d_v} must be divisible by heads={self.heads} and by 4")

    @property
    def num_labels(self) -> int:
        return self.num_verbs if self.label_space == "verb" else self.num_hois

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetectorOutputs:
    human_boxes: torch.Tensor  # [B, N^q, 4]
    object_boxes: torch.Tensor
    object_logits: torch.Tensor  # [B, N^q, N^c + 1]
    verb_logits: torch.Tensor  # [B, N^q, N^a], or one column per hoi pair
    prompts: HOSpatialTokens
    v_i: RelationTokens
    v_f: RelationTokens
    fused: torch.Tensor  # [B, N^q, 2 D^v]
    open_embed: torch.Tensor  # [B, N^q, D^t]
    mimic_embed: torch.Tensor  # [B, N^q, D^f]
    canvas: tuple = field(default=(0, 0))  # padded (H, W) the boxes are normalized to
    aux: List["DetectorOutputs"] = field(default_factory=list)  # earlier decoder layers, when enabled


class HOIDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h, f, L = cfg.d_v, cfg.heads, cfg.ffn_dim, cfg.decoder_layers
        self.backbone = PatchEmbed(cfg.in_channels, d, cfg.stride)
        self.encoder = Encoder(d, h, f, cfg.encoder_layers, cfg.dropout)
        self.queries = QueryBank(cfg.n_q, d)
        self.instance_decoder = InstanceDecoder(d, h, f, L, cfg.dropout)
        self.instance_heads = InstanceHeads(d, cfg.num_objects)
        self.foundation_proj = FoundationProjection(cfg.foundation_dim, d)
        self.hopd = HOPromptDecoder(d, h, f, L, cfg.dropout)
        self.interaction_decoder = InteractionDecoder(d, h, f, L, cfg.dropout)
        self.verb_head = nn.Linear(2 * d, cfg.num_labels)
        # start verb probabilities near a 1% prior so focal loss is not swamped by negatives
        nn.init.constant_(self.verb_head.bias, -math.log((1 - 0.01) / 0.01))
        self.open_fc = nn.Linear(2 * d, cfg.text_dim)
        if cfg.share_open_mimic_head and cfg.text_dim == cfg.foundation_dim:
            self.mimic_proj = None
        else:
            self.mimic_proj = nn.Linear(2 * d, cfg.foundation_dim)

    def backbone_parameters(self):
        return self.backbone.parameters()

    def forward(self, images: torch.Tensor, foundation_tokens: torch.Tensor) -> DetectorOutputs:
        """``images`` [B, H, W, C]; ``foundation_tokens`` [B, N^f, D^f] (frozen constants)."""
        images = pad_to_stride(images, self.cfg.stride)
        canvas = tuple(images.shape[1:3])
        patches = self.backbone(images)
        memory = self.encoder(patches)
        projected = self.foundation_proj(foundation_tokens.detach())
        if not self.cfg.aux_loss:
            prompts = self.instance_decoder(memory, self.queries)
            v_f = self.hopd(prompts, projected)
            v_i = self.interaction_decoder(prompts, memory)
            return self._heads(prompts, v_i, v_f, canvas)
        # layer k of the relation decoders is fed by the final instance prompts, as in the main path
        all_prompts = self.instance_decoder.forward_layers(memory, self.queries)
        prompts = all_prompts[-1]
        all_vf = self.hopd.forward_layers(prompts, projected)
        all_vi = self.interaction_decoder.forward_layers(prompts, memory)
        outs = [self._heads(p, vi, vf, canvas) for p, vi, vf in zip(all_prompts, all_vi, all_vf)]
        main = outs[-1]
        main.aux = outs[:-1]
        return main

    def _heads(self, prompts, v_i, v_f, canvas) -> DetectorOutputs:
        inst = self.instance_heads(prompts)
        fused = fuse(v_i, v_f)
        open_embed = self.open_fc(fused)
        mimic_embed = open_embed if self.mimic_proj is None else self.mimic_proj(fused)
        return DetectorOutputs(
            inst.human_boxes,
            inst.object_boxes,
            inst.object_logits,
            self.verb_head(fused),
            prompts,
            v_i,
            v_f,
            fused,
            open_embed,
            mimic_embed,
            canvas=canvas,
        )

    def open_logits(self, outputs: DetectorOutputs, text_embeddings) -> torch.Tensor:
        return open_category_logits(outputs.v_i, outputs.v_f, text_embeddings, self.open_fc)
