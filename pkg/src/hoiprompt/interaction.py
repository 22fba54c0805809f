"""Interaction decoding, fusion with foundation relation tokens, and scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import CategoryRegistry
from .detector import EncoderMemory, HOSpatialTokens, InstancePredictions
from .errors import ShapeError
from .foundation import RelationTokens
from .layers import DecoderLayer


class InteractionDecoder(nn.Module):
    """Averaged HO prompts cross-attend the encoder memory at every layer."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, num_layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, ffn_dim, dropout) for _ in range(num_layers))

    def forward(self, prompts: HOSpatialTokens, memory: EncoderMemory) -> RelationTokens:
        return self.forward_layers(prompts, memory)[-1]

    def forward_layers(self, prompts: HOSpatialTokens, memory: EncoderMemory) -> List[RelationTokens]:
        if prompts.human.shape[-1] != memory.tokens.shape[-1]:
            raise ShapeError(
                f"prompt width {prompts.human.shape[-1]} != memory width {memory.tokens.shape[-1]}"
            )
        x = prompts.prompt()
        outs = [] if self.layers else [RelationTokens(x)]
        for layer in self.layers:
            x = layer(x, memory.tokens, memory_pos=memory.pos)
            outs.append(RelationTokens(x))
        return outs


def interaction_decode(prompts: HOSpatialTokens, memory: EncoderMemory, decoder: InteractionDecoder) -> RelationTokens:
    return decoder(prompts, memory)


def fuse(v_i: RelationTokens, v_f: RelationTokens) -> torch.Tensor:
    """Row-wise ``[V^i | V^f]``."""
    if v_i.tokens.shape[:-1] != v_f.tokens.shape[:-1]:
        raise ShapeError(f"relation token sets disagree: {tuple(v_i.tokens.shape)} vs {tuple(v_f.tokens.shape)}")
    return torch.cat([v_i.tokens, v_f.tokens], dim=-1)


def classify_closed(v_i: RelationTokens, v_f: RelationTokens, head: nn.Linear) -> torch.Tensor:
    """Raw verb logits ``[B, N^q, N^a]``; sigmoid is applied downstream."""
    return head(fuse(v_i, v_f))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine between every row of ``a [..., N, D]`` and ``b [T, D]``.

    A zero vector on either side gives 0.
    """
    num = a @ b.transpose(-1, -2)
    denom = a.norm(dim=-1, keepdim=True) * b.norm(dim=-1)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, num / safe, torch.zeros_like(num)).clamp(-1.0, 1.0)


def open_category_logits(v_i: RelationTokens, v_f: RelationTokens, text_embeddings, fc: nn.Linear) -> torch.Tensor:
    """Cosine between each text embedding and the projected fused pair feature."""
    text = torch.as_tensor(np.asarray(text_embeddings) if not torch.is_tensor(text_embeddings) else text_embeddings,
                           dtype=fc.weight.dtype)
    if text.dim() == 1:
        text = text.unsqueeze(0)
    if text.shape[-1] != fc.out_features:
        raise ShapeError(f"text width {text.shape[-1]} != fusion head width {fc.out_features}")
    return cosine_similarity(fc(fuse(v_i, v_f)), text)


@dataclass(frozen=True)
class HOIDetection:
    human_box: Tuple[float, float, float, float]  # corner pixels
    object_box: Tuple[float, float, float, float]
    object_class: int
    verb_class: Optional[int]
    hoi_class: int
    score: float


def _to_pixels(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height], -1)


def object_probabilities(object_logits: torch.Tensor) -> torch.Tensor:
    """Softmax over classes plus no-object, with the no-object slot dropped."""
    return object_logits.softmax(-1)[..., :-1]


def score_predictions(
    instances: InstancePredictions,
    logits: torch.Tensor,
    registry: CategoryRegistry,
    canvas_sizes: Sequence[Tuple[int, int]],
    mode: str = "closed",
    text_hoi_ids: Optional[Sequence[int]] = None,
    top_k: int = 100,
    threshold: float = 0.0,
    label_space: str = "verb",
) -> List[List[HOIDetection]]:
    """Rank (pair, category) candidates per image by object score x interaction score.

    ``canvas_sizes`` are the (height, width) in pixels that normalized boxes
    refer to.  Closed mode enumerates registered (verb, object) pairs only.
    ``label_space`` says whether closed logits are per verb or per pair.
    Open mode scores each text column by ``(cos + 1) / 2``; with
    ``text_hoi_ids`` each text is tied to a registered pair, otherwise the
    pair's most likely object is used and ``hoi_class`` is the text index.
    """
    with torch.no_grad():
        obj_prob = object_probabilities(instances.object_logits).double().cpu().numpy()
        raw = logits.double().cpu().numpy()
        hboxes = instances.human_boxes.double().cpu().numpy()
        oboxes = instances.object_boxes.double().cpu().numpy()
    if mode == "closed":
        verbs = np.array([v for v, _ in registry.hoi_pairs], dtype=np.int64)
        objs = np.array([o for _, o in registry.hoi_pairs], dtype=np.int64)
        inter = 1.0 / (1.0 + np.exp(-raw))
        # column index of each registered pair in the logits
        columns = verbs if label_space == "verb" else np.arange(len(objs))
        expected = registry.num_verbs if label_space == "verb" else registry.num_hois
        if raw.shape[-1] != expected:
            raise ShapeError(f"{raw.shape[-1]} closed-set logits, expected {expected} for label space {label_space!r}")
    elif mode == "open":
        inter = (np.clip(raw, -1.0, 1.0) + 1.0) / 2.0
        if text_hoi_ids is not None:
            if len(text_hoi_ids) != raw.shape[-1]:
                raise ShapeError(f"{len(text_hoi_ids)} hoi ids for {raw.shape[-1]} texts")
            verbs = np.array([registry.hoi_pairs[h][0] for h in text_hoi_ids], dtype=np.int64)
            objs = np.array([registry.hoi_pairs[h][1] for h in text_hoi_ids], dtype=np.int64)
    else:
        raise ValueError(f"unknown scoring mode {mode!r}")

    results = []
    for b in range(raw.shape[0]):
        height, width = canvas_sizes[b]
        hpx = _to_pixels(hboxes[b], width, height)
        opx = _to_pixels(oboxes[b], width, height)
        if mode == "closed":
            scores = obj_prob[b][:, objs] * inter[b][:, columns]
            classes = np.broadcast_to(np.arange(len(objs)), scores.shape)
            obj_cls = np.broadcast_to(objs, scores.shape)
            verb_cls = np.broadcast_to(verbs, scores.shape)
        elif text_hoi_ids is not None:
            scores = obj_prob[b][:, objs] * inter[b]
            classes = np.broadcast_to(np.asarray(text_hoi_ids), scores.shape)
            obj_cls = np.broadcast_to(objs, scores.shape)
            verb_cls = np.broadcast_to(verbs, scores.shape)
        else:
            best = obj_prob[b].argmax(-1)
            scores = obj_prob[b].max(-1)[:, None] * inter[b]
            classes = np.broadcast_to(np.arange(raw.shape[-1]), scores.shape)
            obj_cls = np.broadcast_to(best[:, None], scores.shape)
            verb_cls = None
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:top_k]
        dets = []
        for idx in order:
            if flat[idx] < threshold:
                break
            q, c = divmod(int(idx), scores.shape[1])
            dets.append(
                HOIDetection(
                    tuple(float(x) for x in hpx[q]),
                    tuple(float(x) for x in opx[q]),
                    int(obj_cls[q, c]),
                    None if verb_cls is None else int(verb_cls[q, c]),
                    int(classes[q, c]),
                    float(flat[idx]),
                )
            )
        results.append(dets)
    return results
