"""Bipartite assignment of queries to ground truth and the training loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import _kernels
from .boxes import cxcywh_to_xyxy, elementwise_giou, pairwise_giou
from .data import HOISample
from .errors import InfeasibleError, NumericError

DEFAULT_WEIGHTS = (2.5, 1.0, 1.0, 20.0)
LOSS_KEYS = ("total", "box_l1", "giou", "obj_class", "verb_class", "mimic")


@dataclass(frozen=True)
class LossWeights:
    box: float = 2.5
    giou: float = 1.0
    cls: float = 1.0
    mimic: float = 20.0
    no_object: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.box, self.giou, self.cls, self.mimic)


@dataclass
class Target:
    """Ground truth for one image; triplets sharing boxes and object merge into one pair."""

    human_boxes: torch.Tensor  # [G, 4] cxcywh, normalized to the model canvas
    object_boxes: torch.Tensor
    object_labels: torch.Tensor  # [G] long
    verb_labels: torch.Tensor  # [G, N^a] multi-hot

    def __len__(self) -> int:
        return self.object_labels.shape[0]


def make_target(sample: HOISample, num_verbs: int, canvas: Optional[Tuple[int, int]] = None,
                dtype=torch.float32, label_space: str = "verb") -> Target:
    """Build a :class:`Target`; ``canvas`` rescales boxes to a padded (H, W) canvas.

    With ``label_space="hoi"`` the multi-hot labels index hoi pairs and
    ``num_verbs`` is the number of pairs.
    """
    sx = sy = 1.0
    if canvas is not None:
        sy, sx = sample.height / canvas[0], sample.width / canvas[1]
    pairs: Dict[tuple, int] = {}
    hb, ob, labels, verbs = [], [], [], []
    for t in sample.triplets:
        key = (t.human_box, t.object_box, t.object_class)
        if key not in pairs:
            pairs[key] = len(labels)
            hb.append(t.human_box)
            ob.append(t.object_box)
            labels.append(t.object_class)
            verbs.append(np.zeros(num_verbs))
        verbs[pairs[key]][t.verb_class if label_space == "verb" else t.hoi_class] = 1.0
    scale = torch.tensor([sx, sy, sx, sy], dtype=dtype)
    return Target(
        torch.tensor(hb, dtype=dtype).reshape(-1, 4) * scale,
        torch.tensor(ob, dtype=dtype).reshape(-1, 4) * scale,
        torch.tensor(labels, dtype=torch.long),
        torch.tensor(np.array(verbs), dtype=dtype).reshape(-1, num_verbs),
    )


@dataclass
class CostMatrix:
    costs: np.ndarray  # [N^q, G]
    components: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class MatchAssignment:
    pairs: Tuple[Tuple[int, int], ...]  # (query, gt), sorted by query
    total_cost: float

    @property
    def query_indices(self) -> List[int]:
        return [q for q, _ in self.pairs]

    @property
    def gt_indices(self) -> List[int]:
        return [g for _, g in self.pairs]


def hungarian(costs) -> MatchAssignment:
    """Minimum-cost injective assignment covering every ground-truth column."""
    c = costs.costs if isinstance(costs, CostMatrix) else costs
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_q, n_gt = c.shape
    if n_gt > n_q:
        raise InfeasibleError(f"{n_gt} ground truths cannot be matched to {n_q} queries")
    if n_gt == 0:
        return MatchAssignment((), 0.0)
    if not np.isfinite(c).all():
        raise NumericError("cost matrix has non-finite entries")
    query_of_gt = _kernels.solve_assignment(np.ascontiguousarray(c.T))
    pairs = tuple(sorted((int(q), g) for g, q in enumerate(query_of_gt)))
    return MatchAssignment(pairs, float(sum(c[q, g] for q, g in pairs)))


def focal_verb_cost(verb_logits: torch.Tensor, verb_labels: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Focal matching cost ``[N^q, G]`` averaged over each gt's verb set."""
    p = verb_logits.sigmoid()
    eps = 1e-8
    pos = alpha * (1 - p) ** gamma * -(p + eps).log()
    neg = (1 - alpha) * p ** gamma * -(1 - p + eps).log()
    per_verb = pos - neg
    n_verbs = verb_labels.sum(-1).clamp(min=1)
    return (per_verb @ verb_labels.T) / n_verbs


def match_cost(human_boxes, object_boxes, object_logits, verb_logits, target: Target,
               weights: LossWeights = LossWeights()) -> CostMatrix:
    """Weighted matching cost of every query (rows) against every gt pair (columns)."""
    with torch.no_grad():
        n_q = human_boxes.shape[0]
        if len(target) == 0:
            empty = np.zeros((n_q, 0))
            return CostMatrix(empty, {k: empty for k in ("box_l1", "giou", "obj_class", "verb_class")})
        th = target.human_boxes.to(human_boxes.dtype)
        to = target.object_boxes.to(human_boxes.dtype)
        box_l1 = torch.cdist(human_boxes, th, p=1) + torch.cdist(object_boxes, to, p=1)
        giou = (1 - pairwise_giou(cxcywh_to_xyxy(human_boxes), cxcywh_to_xyxy(th))) + (
            1 - pairwise_giou(cxcywh_to_xyxy(object_boxes), cxcywh_to_xyxy(to))
        )
        obj = -object_logits.softmax(-1)[:, target.object_labels]
        verb = focal_verb_cost(verb_logits, target.verb_labels.to(verb_logits.dtype),
                               weights.focal_alpha, weights.focal_gamma)
        components = {
            "box_l1": (weights.box * box_l1).double().cpu().numpy(),
            "giou": (weights.giou * giou).double().cpu().numpy(),
            "obj_class": (weights.cls * obj).double().cpu().numpy(),
            "verb_class": (weights.cls * verb).double().cpu().numpy(),
        }
    costs = components["box_l1"] + components["giou"] + components["obj_class"] + components["verb_class"]
    return CostMatrix(costs, components)


def match_outputs(outputs, targets: Sequence[Target], weights: LossWeights = LossWeights()) -> List[MatchAssignment]:
    """Per-image Hungarian assignment for a batch of detector outputs."""
    result = []
    for b, target in enumerate(targets):
        cm = match_cost(outputs.human_boxes[b], outputs.object_boxes[b], outputs.object_logits[b],
                        outputs.verb_logits[b], target, weights)
        result.append(hungarian(cm))
    return result


@dataclass
class LossReport:
    """Loss terms as 0-d tensors; ``total`` is differentiable."""

    total: torch.Tensor
    box_l1: torch.Tensor
    giou: torch.Tensor
    obj_class: torch.Tensor
    verb_class: torch.Tensor
    mimic: torch.Tensor
    weights: Tuple[float, float, float, float] = DEFAULT_WEIGHTS

    def reconstruct(self) -> float:
        d = self.to_dict()
        lb, lu, lc, lm = self.weights
        return lb * d["box_l1"] + lu * d["giou"] + lc * (d["obj_class"] + d["verb_class"]) + lm * d["mimic"]

    def to_dict(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in LOSS_KEYS}
        out["weights"] = list(self.weights)
        return out


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Elementwise focal loss on sigmoid outputs."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def mimic_distance(pooled: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between pooled relation features and the image-level target."""
    return (pooled - target).abs().mean()


def loss_terms(outputs, targets: Sequence[Target], assignments: Sequence[MatchAssignment],
               foundation_globals: torch.Tensor, weights: LossWeights = LossWeights()) -> Dict[str, torch.Tensor]:
    """Unweighted loss components for a batch under fixed assignments."""
    dtype = outputs.human_boxes.dtype
    bsz, n_q, n_cls1 = outputs.object_logits.shape
    num_gt = max(sum(len(t) for t in targets), 1)

    pred_h, pred_o, gt_h, gt_o = [], [], [], []
    target_classes = torch.full((bsz, n_q), n_cls1 - 1, dtype=torch.long)
    verb_targets = torch.zeros_like(outputs.verb_logits)
    mimic_parts = []
    for b, (target, assign) in enumerate(zip(targets, assignments)):
        if not assign.pairs:
            continue
        q = torch.tensor(assign.query_indices, dtype=torch.long)
        g = torch.tensor(assign.gt_indices, dtype=torch.long)
        pred_h.append(outputs.human_boxes[b, q])
        pred_o.append(outputs.object_boxes[b, q])
        gt_h.append(target.human_boxes[g].to(dtype))
        gt_o.append(target.object_boxes[g].to(dtype))
        target_classes[b, q] = target.object_labels[g]
        verb_targets[b, q] = target.verb_labels[g].to(verb_targets.dtype)
        pooled = outputs.mimic_embed[b, q].mean(0)
        mimic_parts.append(mimic_distance(pooled, foundation_globals[b].to(pooled.dtype)))

    zero = outputs.human_boxes.sum() * 0
    if pred_h:
        ph, po = torch.cat(pred_h), torch.cat(pred_o)
        th, to = torch.cat(gt_h), torch.cat(gt_o)
        box_l1 = ((ph - th).abs().sum() + (po - to).abs().sum()) / num_gt
        giou = ((1 - elementwise_giou(cxcywh_to_xyxy(ph), cxcywh_to_xyxy(th))).sum()
                + (1 - elementwise_giou(cxcywh_to_xyxy(po), cxcywh_to_xyxy(to))).sum()) / num_gt
        mimic = torch.stack(mimic_parts).mean()
    else:
        box_l1 = giou = mimic = zero

    class_weight = torch.ones(n_cls1, dtype=dtype)
    class_weight[-1] = weights.no_object
    obj_class = F.cross_entropy(outputs.object_logits.reshape(-1, n_cls1), target_classes.reshape(-1),
                                weight=class_weight)
    verb_class = sigmoid_focal_loss(outputs.verb_logits, verb_targets, weights.focal_alpha,
                                    weights.focal_gamma).sum() / num_gt
    return {"box_l1": box_l1, "giou": giou, "obj_class": obj_class, "verb_class": verb_class, "mimic": mimic}


def combine(terms: Dict[str, torch.Tensor], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the four components, evaluated in double precision."""
    t = {k: v.double() for k, v in terms.items()}
    return (weights.box * t["box_l1"] + weights.giou * t["giou"]
            + weights.cls * (t["obj_class"] + t["verb_class"]) + weights.mimic * t["mimic"])


def compute_loss(outputs, targets: Sequence[Target], assignments: Sequence[MatchAssignment],
                 foundation_globals: torch.Tensor, weights: LossWeights = LossWeights()) -> LossReport:
    terms = loss_terms(outputs, targets, assignments, foundation_globals, weights)
    return LossReport(combine(terms, weights), weights=weights.as_tuple(), **terms)


def match_and_loss(outputs, targets: Sequence[Target], foundation_globals: torch.Tensor,
                   weights: LossWeights = LossWeights()) -> Tuple[LossReport, List[MatchAssignment]]:
    """Match and score the final layer plus any auxiliary layers.

    Auxiliary terms are matched independently and summed into the reported
    components, so ``total`` stays the weighted sum of the reported parts.
    """
    assignments = match_outputs(outputs, targets, weights)
    terms = loss_terms(outputs, targets, assignments, foundation_globals, weights)
    for aux in getattr(outputs, "aux", ()) or ():
        aux_terms = loss_terms(aux, targets, match_outputs(aux, targets, weights), foundation_globals, weights)
        terms = {k: terms[k] + aux_terms[k] for k in terms}
    return LossReport(combine(terms, weights), weights=weights.as_tuple(), **terms), assignments
