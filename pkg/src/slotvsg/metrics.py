"""Evaluation protocol: triplet recall (SGDET / PredCLS / tube), PQ and AP50.

Recall counts are maximum one-to-one matchings between the top-K predictions
and the ground-truth triplets: every prediction recalls at most one GT triplet
and vice versa. A frame (or video) without GT triplets is skipped. Reported
recalls are means of per-frame (per-video) recalls; mR@K averages per-predicate
recalls over predicates that have at least one GT instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .core import Box, MaskTube
from .triplet import ScoredTriplet

KS = (10, 20, 50, 100)


@dataclass(frozen=True)
class GTTriplet:
    subject: int  # GT identity
    predicate: int
    object: int
    subject_label: int
    object_label: int
    subject_box: Optional[np.ndarray] = None
    object_box: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MatchRule:
    mode: str = "sgdet"  # "sgdet" | "predcls"
    iou_threshold: float = 0.5
    with_constraint: bool = True

    def __post_init__(self):
        if self.mode not in ("sgdet", "predcls"):
            raise ValueError(f"unknown recall mode {self.mode!r}")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")


def box_iou_np(a, b) -> float:
    """IoU of two center/size boxes given as 4-sequences or :class:`Box`."""
    a = a.xyxy() if isinstance(a, Box) else _xyxy(a)
    b = b.xyxy() if isinstance(b, Box) else _xyxy(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _xyxy(b):
    cx, cy, w, h = (float(v) for v in b)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# ---------------------------------------------------------------- ranking


def apply_constraint(preds: Sequence, rng: Optional[np.random.Generator] = None) -> list:
    """Keep the top-scoring predicate per (subject, object) pair.

    Ties go to the lowest predicate index, or to a uniformly random one with ``rng``.
    """
    groups: dict[tuple[int, int], list] = {}
    for p in preds:
        groups.setdefault((p.subject, p.object), []).append(p)
    out = []
    for items in groups.values():
        top = max(p.score for p in items)
        tied = sorted((p for p in items if p.score == top), key=lambda p: p.predicate)
        out.append(tied[int(rng.integers(len(tied)))] if rng is not None and len(tied) > 1 else tied[0])
    return out


def rank(preds: Sequence, k: int, with_constraint: bool, rng: Optional[np.random.Generator] = None) -> list:
    if k < 1:
        raise ValueError("K must be >= 1")
    pool = apply_constraint(preds, rng) if with_constraint else list(preds)
    pool.sort(key=lambda p: (-p.score, p.subject, p.predicate, p.object))
    return pool[:k]


def max_matching(compatible: np.ndarray) -> int:
    """Size of a maximum matching in the bipartite graph given by a boolean matrix."""
    if compatible.size == 0 or not compatible.any():
        return 0
    m = maximum_bipartite_matching(csr_matrix(compatible.astype(np.int8)), perm_type="column")
    return int((m >= 0).sum())


@dataclass
class RecallResult:
    hits: int
    total: int
    per_predicate_hits: dict[int, int]
    per_predicate_total: dict[int, int]

    @property
    def recall(self) -> float:
        return self.hits / self.total if self.total else float("nan")


def _count(preds: Sequence, gts: Sequence, compatible: Callable) -> RecallResult:
    per_hits, per_total = {}, {}
    for g in gts:
        per_total[g.predicate] = per_total.get(g.predicate, 0) + 1
    for pred_class in per_total:
        gp = [g for g in gts if g.predicate == pred_class]
        pp = [p for p in preds if p.predicate == pred_class]
        mat = np.array([[compatible(p, g) for g in gp] for p in pp], dtype=bool).reshape(len(pp), len(gp))
        per_hits[pred_class] = max_matching(mat)
    return RecallResult(sum(per_hits.values()), len(gts), per_hits, per_total)


def triplet_compatible(p: ScoredTriplet, g: GTTriplet, rule: MatchRule) -> bool:
    if p.predicate != g.predicate or p.subject_label != g.subject_label or p.object_label != g.object_label:
        return False
    if rule.mode == "predcls":
        return p.subject == g.subject and p.object == g.object
    return (
        box_iou_np(p.subject_box, g.subject_box) >= rule.iou_threshold
        and box_iou_np(p.object_box, g.object_box) >= rule.iou_threshold
    )


def recall_at_k(
    preds: Sequence[ScoredTriplet],
    gts: Sequence[GTTriplet],
    k: int,
    rule: MatchRule = MatchRule(),
    rng: Optional[np.random.Generator] = None,
) -> Optional[RecallResult]:
    """Recall of one frame's GT triplets by its top-``k`` predictions; ``None`` for empty GT."""
    if not gts:
        return None
    top = rank(preds, k, rule.with_constraint, rng)
    return _count(top, gts, lambda p, g: triplet_compatible(p, g, rule))


# ---------------------------------------------------------------- PredCLS


class SlotCapacityError(ValueError):
    pass


def predcls_triplets(
    obj_logits,
    boxes,
    rel_logits,
    match,
    gt_labels: Sequence[int],
    gt_boxes: Sequence,
    gt_ids: Sequence[int],
    all_predicates: bool = True,
) -> list[ScoredTriplet]:
    """Oracle-object triplets for one frame.

    Object slots are Hungarian-matched to the GT objects by ``-IoU - P(GT class)``;
    matched slots take the GT identity, class and box. Relation slots whose
    endpoints both hit matched slots become triplets scored by predicate
    probability alone (all real predicates, or only the top one).
    """
    obj_logits = np.asarray(obj_logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    rel_logits = np.asarray(rel_logits, dtype=np.float64)
    N, G = obj_logits.shape[0], len(gt_ids)
    if G > N:
        raise SlotCapacityError(f"{G} ground-truth objects exceed {N} object slots; increase N")
    if G == 0:
        return []
    prob = np.exp(obj_logits - obj_logits.max(-1, keepdims=True))
    prob /= prob.sum(-1, keepdims=True)
    iou = np.array([[box_iou_np(boxes[i], gt_boxes[g]) for g in range(G)] for i in range(N)])
    cost = -iou - prob[:, np.asarray(gt_labels)]
    rows, cols = linear_sum_assignment(cost)
    slot_to_gt = dict(zip(rows.tolist(), cols.tolist()))
    rel_p = np.exp(rel_logits - rel_logits.max(-1, keepdims=True))
    rel_p /= rel_p.sum(-1, keepdims=True)
    none_rel = rel_p.shape[1] - 1
    out = []
    for j in range(rel_p.shape[0]):
        si, oi = int(match.subject[j]), int(match.object[j])
        if si not in slot_to_gt or oi not in slot_to_gt or rel_p[j].argmax() == none_rel:
            continue
        gs, go = slot_to_gt[si], slot_to_gt[oi]
        preds = range(none_rel) if all_predicates else [int(rel_p[j].argmax())]
        for c in preds:
            out.append(
                ScoredTriplet(
                    int(gt_ids[gs]), int(c), int(gt_ids[go]), float(rel_p[j, c]),
                    int(gt_labels[gs]), int(gt_labels[go]), rel_slot=j,
                    subject_box=np.asarray(gt_boxes[gs]), object_box=np.asarray(gt_boxes[go]),
                )
            )
    best: dict = {}
    for tr in out:
        if tr.key not in best or tr.score > best[tr.key].score:
            best[tr.key] = tr
    return list(best.values())


def predcls_recall(
    obj_logits, boxes, rel_logits, match, gts: Sequence[GTTriplet], gt_objects, k: int,
    with_constraint: bool = True, rng: Optional[np.random.Generator] = None,
) -> Optional[RecallResult]:
    """``gt_objects`` is a sequence of ``(identity, label, box)``."""
    if not gts:
        return None
    ids = [o[0] for o in gt_objects]
    labels = [o[1] for o in gt_objects]
    gboxes = [np.asarray(o[2], dtype=np.float64) for o in gt_objects]
    preds = predcls_triplets(obj_logits, boxes, rel_logits, match, labels, gboxes, ids)
    return recall_at_k(preds, gts, k, MatchRule("predcls", 0.5, with_constraint), rng)


# ---------------------------------------------------------------- tubes


def viou(a, b) -> float:
    """Voxel IoU of two tubes (:class:`MaskTube` or ``T x H x W`` boolean volumes)."""
    if isinstance(a, MaskTube) and isinstance(b, MaskTube):
        fa = {m.frame: m.mask for m in a.masks}
        fb = {m.frame: m.mask for m in b.masks}
        inter = sum(int((fa[t] & fb[t]).sum()) for t in fa.keys() & fb.keys())
        union = sum(int(m.sum()) for m in fa.values()) + sum(int(m.sum()) for m in fb.values()) - inter
    else:
        a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
        inter = int((a & b).sum())
        union = int((a | b).sum())
    return inter / union if union else 0.0


@dataclass
class TubeCandidate:
    subject: int
    predicate: int
    object: int
    score: float
    subject_label: int
    object_label: int
    subject_tube: np.ndarray  # T x H x W bool
    object_tube: np.ndarray


@dataclass
class TubeGT:
    subject: int
    predicate: int
    object: int
    subject_label: int
    object_label: int
    subject_tube: np.ndarray
    object_tube: np.ndarray


def tube_compatible(p: TubeCandidate, g: TubeGT, threshold: float) -> bool:
    return (
        p.predicate == g.predicate
        and p.subject_label == g.subject_label
        and p.object_label == g.object_label
        and viou(p.subject_tube, g.subject_tube) >= threshold
        and viou(p.object_tube, g.object_tube) >= threshold
    )


def pvsg_recall(
    preds: Sequence[TubeCandidate], gts: Sequence[TubeGT], k: int, threshold: float = 0.5, with_constraint: bool = False
) -> Optional[RecallResult]:
    """Recall of a video's GT tube triplets by its top-``k`` tube triplets."""
    if not gts:
        return None
    top = rank(preds, k, with_constraint)
    return _count(top, gts, lambda p, g: tube_compatible(p, g, threshold))


# ---------------------------------------------------------------- aggregation


@dataclass
class RecallAccumulator:
    """Means of per-unit recall and of per-unit, per-predicate recall."""

    recall_sum: float = 0.0
    units: int = 0
    pred_sum: dict[int, float] = field(default_factory=dict)
    pred_units: dict[int, int] = field(default_factory=dict)

    def add(self, res: Optional[RecallResult]) -> None:
        if res is None:
            return
        self.recall_sum += res.recall
        self.units += 1
        for c, tot in res.per_predicate_total.items():
            self.pred_sum[c] = self.pred_sum.get(c, 0.0) + res.per_predicate_hits[c] / tot
            self.pred_units[c] = self.pred_units.get(c, 0) + 1

    def merge(self, other: "RecallAccumulator") -> None:
        self.recall_sum += other.recall_sum
        self.units += other.units
        for c in other.pred_sum:
            self.pred_sum[c] = self.pred_sum.get(c, 0.0) + other.pred_sum[c]
            self.pred_units[c] = self.pred_units.get(c, 0) + other.pred_units[c]

    @property
    def recall(self) -> float:
        return self.recall_sum / self.units if self.units else 0.0

    def per_predicate(self) -> dict[int, float]:
        return {c: self.pred_sum[c] / self.pred_units[c] for c in sorted(self.pred_sum)}

    @property
    def mean_recall(self) -> float:
        per = self.per_predicate()
        return float(np.mean(list(per.values()))) if per else 0.0


# ---------------------------------------------------------------- PQ / AP


def panoptic_quality(frames: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Panoptic quality over frames of ``(pred_segments, gt_segments)``.

    Segments are ``(label, boolean mask)``. Same-label segments with IoU > 0.5
    match; PQ is computed per category and averaged over categories seen.
    """
    stats: dict[int, list] = {}  # label -> [iou_sum, tp, fp, fn]
    for pred, gt in frames:
        if pred:
            cover = np.sum([np.asarray(m, dtype=np.int32) for _, m in pred], axis=0)
            if cover.max() > 1:
                raise ValueError("predicted segments overlap; panoptic predictions must be disjoint")
        matched_p, matched_g = set(), set()
        for gi, (gl, gm) in enumerate(gt):
            gm = np.asarray(gm, dtype=bool)
            for pi, (pl, pm) in enumerate(pred):
                if pl != gl or pi in matched_p:
                    continue
                pm = np.asarray(pm, dtype=bool)
                union = (pm | gm).sum()
                iou = (pm & gm).sum() / union if union else 0.0
                if iou > 0.5:
                    s = stats.setdefault(gl, [0.0, 0, 0, 0])
                    s[0] += iou
                    s[1] += 1
                    matched_p.add(pi)
                    matched_g.add(gi)
                    break
        for pi, (pl, _) in enumerate(pred):
            if pi not in matched_p:
                stats.setdefault(pl, [0.0, 0, 0, 0])[2] += 1
        for gi, (gl, _) in enumerate(gt):
            if gi not in matched_g:
                stats.setdefault(gl, [0.0, 0, 0, 0])[3] += 1
    pqs = [s[0] / (s[1] + 0.5 * s[2] + 0.5 * s[3]) for s in stats.values() if s[1] + s[2] + s[3] > 0]
    return float(np.mean(pqs)) if pqs else 0.0


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP from detections already matched to GT."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap50(detections: Sequence[Sequence[tuple]], ground_truth: Sequence[Sequence[tuple]], iou_threshold: float = 0.5) -> float:
    """Mean over GT classes of AP at IoU >= ``iou_threshold``.

    ``detections[f]`` holds ``(label, score, box)``; ``ground_truth[f]`` holds ``(label, box)``.
    Detections are matched greedily by descending score to the unmatched GT box of
    highest IoU in the same frame.
    """
    classes = sorted({g[0] for frame in ground_truth for g in frame})
    aps = []
    for c in classes:
        dets = [(f, d[1], d[2]) for f, frame in enumerate(detections) for d in frame if d[0] == c]
        dets.sort(key=lambda d: -d[1])
        gts = {f: [g[1] for g in frame if g[0] == c] for f, frame in enumerate(ground_truth)}
        used = {f: [False] * len(v) for f, v in gts.items()}
        num_gt = sum(len(v) for v in gts.values())
        flags = []
        for f, _, box in dets:
            best, best_iou = -1, iou_threshold
            for gi, gbox in enumerate(gts.get(f, [])):
                if used[f][gi]:
                    continue
                iou = box_iou_np(box, gbox)
                if iou >= best_iou:
                    best, best_iou = gi, iou
            if best >= 0:
                used[f][best] = True
            flags.append(best >= 0)
        aps.append(average_precision([d[1] for d in dets], flags, num_gt))
    return float(np.mean(aps)) if aps else 0.0


# ---------------------------------------------------------------- report


@dataclass
class MetricReport:
    tables: dict[str, dict[str, float]] = field(default_factory=dict)  # config name -> {"R@20": ...}
    per_predicate: dict[str, dict[str, float]] = field(default_factory=dict)
    pq: Optional[float] = None
    ap50: Optional[float] = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {"recall": self.tables, "per_predicate_recall": self.per_predicate, "diagnostics": self.diagnostics}
        if self.pq is not None:
            out["PQ"] = self.pq
        if self.ap50 is not None:
            out["AP50"] = self.ap50
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        cols = sorted({c for row in self.tables.values() for c in row}, key=_col_key)
        if cols:
            width = max(len(n) for n in self.tables) + 2
            lines.append("".ljust(width) + "".join(c.rjust(9) for c in cols))
            for name, row in self.tables.items():
                lines.append(name.ljust(width) + "".join(
                    (f"{100 * row[c]:9.2f}" if c in row else "        -") for c in cols))
        if self.ap50 is not None:
            lines.append(f"AP50 {100 * self.ap50:.2f}")
        if self.pq is not None:
            lines.append(f"PQ   {100 * self.pq:.2f}")
        for key, value in sorted(self.diagnostics.items()):
            lines.append(f"{key}: {value:.6g}")
        return "\n".join(lines) + "\n"


def _col_key(c: str):
    prefix, k = c.split("@")
    return (prefix != "R", int(k))
