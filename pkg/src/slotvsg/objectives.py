"""Set-prediction objectives: Hungarian assignment, box/mask/relation losses, slot consistency.

All losses take per-frame tensors (no batch axis) and are differentiable in
float64 as well as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .core import Box


@dataclass(frozen=True)
class LossWeights:
    obj_cls: float = 1.0
    box: float = 5.0
    giou: float = 2.0
    mask: float = 5.0
    dice: float = 5.0
    rel_cls: float = 1.0
    sidx: float = 1.0
    oidx: float = 1.0
    consistency: float = 1.0
    no_object: float = 0.1  # CE weight of the no-object / no-relation class
    index_temperature: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name}={value} must be finite and >= 0")
        if self.index_temperature <= 0:
            raise ValueError("index_temperature must be > 0")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth)
    unmatched: list[int]  # predictions assigned to the no-object class
    cost: float = 0.0

    @property
    def pred(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    total: torch.Tensor
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- boxes


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def _giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    area_a = (a[..., 2] - a[..., 0]).clamp_min(0) * (a[..., 3] - a[..., 1]).clamp_min(0)
    area_b = (b[..., 2] - b[..., 0]).clamp_min(0) * (b[..., 3] - b[..., 1]).clamp_min(0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp_min(0).prod(-1)
    union = area_a + area_b - inter
    iou = _safe_div(inter, union)
    hull_wh = (torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])).clamp_min(0)
    hull = hull_wh.prod(-1)
    return iou - _safe_div(hull - union, hull), iou


def giou(a, b):
    """Generalized IoU of center/size boxes, elementwise over leading axes.

    Accepts :class:`Box` instances (returns a float) or ``... x 4`` tensors.
    Zero-area boxes contribute an IoU of 0; an empty hull contributes no penalty.
    """
    if isinstance(a, Box) and isinstance(b, Box):
        ta = torch.tensor(a.as_list(), dtype=torch.float64)
        tb = torch.tensor(b.as_list(), dtype=torch.float64)
        return float(giou(ta, tb))
    return _giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))[0]


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return giou(a[:, None, :], b[None, :, :])


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Plain IoU of center/size boxes, elementwise with broadcasting."""
    return _giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))[1]


# ---------------------------------------------------------------- masks


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` over the last two axes."""
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum((-2, -1))
    return 1 - (2 * inter + eps) / (pred.sum((-2, -1)) + gt.sum((-2, -1)) + eps)


def pairwise_dice(prob: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    p = prob.flatten(1)
    g = gt.flatten(1).to(p.dtype)
    inter = p @ g.T
    return 1 - (2 * inter + eps) / (p.sum(-1)[:, None] + g.sum(-1)[None, :] + eps)


def pairwise_mask_bce(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary CE between every predicted mask and every GT mask."""
    x = logits.flatten(1)
    g = gt.flatten(1).to(x.dtype)
    n = x.shape[1]
    # BCE(x, g) = softplus(x) - x g
    return (F.softplus(x).sum(-1)[:, None] - x @ g.T) / n


# ---------------------------------------------------------------- matching


def hungarian_match(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of predictions (rows) to ground truth (columns)."""
    c = np.asarray(torch.as_tensor(cost).detach().cpu(), dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a P x G matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    if c.shape[1] == 0 or c.shape[0] == 0:
        return Assignment([], list(range(c.shape[0])), 0.0)
    rows, cols = linear_sum_assignment(c)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(c.shape[0]) if i not in matched], float(c[rows, cols].sum()))


def object_matching_cost(
    logits: torch.Tensor,
    gt_labels: torch.Tensor,
    weights: LossWeights,
    boxes: Optional[torch.Tensor] = None,
    gt_boxes: Optional[torch.Tensor] = None,
    mask_logits: Optional[torch.Tensor] = None,
    gt_masks: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``P x G`` matching cost; box terms when boxes are given, mask terms when masks are."""
    with torch.no_grad():
        prob = logits.softmax(-1)
        cost = -weights.obj_cls * prob[:, gt_labels]
        if boxes is not None and gt_boxes is not None:
            cost = cost + weights.box * torch.cdist(boxes, gt_boxes.to(boxes.dtype), p=1)
            cost = cost + weights.giou * (1 - pairwise_giou(boxes, gt_boxes.to(boxes.dtype)))
        if mask_logits is not None and gt_masks is not None:
            cost = cost + weights.mask * pairwise_mask_bce(mask_logits, gt_masks)
            cost = cost + weights.dice * pairwise_dice(mask_logits.sigmoid(), gt_masks)
    return cost


# ---------------------------------------------------------------- losses


def _class_weights(num_classes_plus_one: int, no_object: float, like: torch.Tensor) -> torch.Tensor:
    w = torch.ones(num_classes_plus_one, dtype=like.dtype, device=like.device)
    w[-1] = no_object
    return w


def classification_loss(logits: torch.Tensor, assignment: Assignment, gt_labels: torch.Tensor, no_object: float) -> torch.Tensor:
    """CE over all slots; matched slots target their GT class, the rest the last (empty) class."""
    target = torch.full((logits.shape[0],), logits.shape[1] - 1, dtype=torch.long, device=logits.device)
    if assignment.pairs:
        target[torch.as_tensor(assignment.pred)] = gt_labels[torch.as_tensor(assignment.gt)].long()
    return F.cross_entropy(logits, target, weight=_class_weights(logits.shape[1], no_object, logits))


def loss_dsgg(logits, boxes, gt_labels, gt_boxes, assignment: Assignment, weights: LossWeights) -> LossReport:
    ce = classification_loss(logits, assignment, gt_labels, weights.no_object)
    if assignment.pairs:
        pb = boxes[torch.as_tensor(assignment.pred)]
        gb = gt_boxes[torch.as_tensor(assignment.gt)].to(pb.dtype)
        l1 = (pb - gb).abs().sum(-1).mean()
        g = (1 - giou(pb, gb)).mean()
    else:
        l1 = g = logits.new_zeros(())
    terms = {"obj_cls": ce, "box": l1, "giou": g}
    total = weights.obj_cls * ce + weights.box * l1 + weights.giou * g
    return LossReport(terms, total, {"matched": len(assignment.pairs)})


def loss_pvsg(logits, mask_logits, gt_labels, gt_masks, assignment: Assignment, weights: LossWeights) -> LossReport:
    ce = classification_loss(logits, assignment, gt_labels, weights.no_object)
    if assignment.pairs:
        pm = mask_logits[torch.as_tensor(assignment.pred)]
        gm = gt_masks[torch.as_tensor(assignment.gt)].to(pm.dtype)
        bce = F.binary_cross_entropy_with_logits(pm, gm)
        dice = dice_loss(pm.sigmoid(), gm).mean()
    else:
        bce = dice = logits.new_zeros(())
    terms = {"obj_cls": ce, "mask": bce, "dice": dice}
    total = weights.obj_cls * ce + weights.mask * bce + weights.dice * dice
    return LossReport(terms, total, {"matched": len(assignment.pairs)})


def relation_targets(
    gt_triplets: Sequence[tuple[int, int, int]], identity_to_slot: dict[int, int]
) -> tuple[list[tuple[int, int, int]], int]:
    """Translate ``(subject_id, relation, object_id)`` into ``(subject_slot, relation, object_slot)``.

    Triplets with an endpoint that no slot was assigned to are dropped; the count is returned.
    """
    out, dropped = [], 0
    for s, r, o in gt_triplets:
        if s in identity_to_slot and o in identity_to_slot:
            out.append((identity_to_slot[s], int(r), identity_to_slot[o]))
        else:
            dropped += 1
    return out, dropped


def loss_rel(
    rel_logits: torch.Tensor,
    sim_subject: torch.Tensor,
    sim_object: torch.Tensor,
    gt_triplets: Sequence[tuple[int, int, int]],
    identity_to_slot: dict[int, int],
    weights: LossWeights,
) -> LossReport:
    """Relation classification plus subject/object index classification.

    Relation slots are Hungarian-matched to the translated GT triplets with cost
    ``-P(relation) - P(subject index) - P(object index)``; index probabilities are
    softmaxes of the cosine rows divided by ``weights.index_temperature``.
    """
    targets, dropped = relation_targets(gt_triplets, identity_to_slot)
    tau = weights.index_temperature
    idx_s = sim_subject / tau
    idx_o = sim_object / tau
    K = rel_logits.shape[0]
    if targets:
        t = torch.as_tensor(targets, dtype=torch.long, device=rel_logits.device)
        with torch.no_grad():
            cost = (
                -rel_logits.softmax(-1)[:, t[:, 1]]
                - idx_s.softmax(-1)[:, t[:, 0]]
                - idx_o.softmax(-1)[:, t[:, 2]]
            )
        assignment = hungarian_match(cost)
    else:
        t = None
        assignment = Assignment([], list(range(K)))
    rel_target = torch.full((K,), rel_logits.shape[1] - 1, dtype=torch.long, device=rel_logits.device)
    if assignment.pairs:
        pi, gi = torch.as_tensor(assignment.pred), torch.as_tensor(assignment.gt)
        rel_target[pi] = t[gi, 1]
        sidx = F.cross_entropy(idx_s[pi], t[gi, 0])
        oidx = F.cross_entropy(idx_o[pi], t[gi, 2])
    else:
        sidx = oidx = rel_logits.new_zeros(())
    ce = F.cross_entropy(rel_logits, rel_target, weight=_class_weights(rel_logits.shape[1], weights.no_object, rel_logits))
    terms = {"rel_cls": ce, "sidx": sidx, "oidx": oidx}
    total = weights.rel_cls * ce + weights.sidx * sidx + weights.oidx * oidx
    return LossReport(terms, total, {"matched": len(assignment.pairs), "dropped_triplets": dropped, "assignment": assignment})


def consistency_from_similarity(sim: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Contrastive sum over matched pairs ``(i_t, j_prev)`` given ``sim[i, j] = s_t^i . s_prev^j``.

    Each term is ``-log softmax(sim[i_t])[j_prev]``: the positive against every other
    previous-frame slot.
    """
    if not pairs:
        return sim.new_zeros(())
    rows = torch.as_tensor([p[0] for p in pairs], device=sim.device)
    cols = torch.as_tensor([p[1] for p in pairs], device=sim.device)
    return F.cross_entropy(sim[rows], cols, reduction="sum")


def loss_consistency(slots_t: torch.Tensor, slots_prev: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> LossReport:
    """Temporal consistency on layer-normalized slots, no temperature."""
    d = slots_t.shape[-1]
    a = F.layer_norm(slots_t, (d,))
    b = F.layer_norm(slots_prev, (d,))
    value = consistency_from_similarity(a @ b.T, pairs)
    return LossReport({"consistency": value}, value, {"pairs": len(pairs), "no_pairs": not pairs})
