"""Dynamic triplet prediction: relation slots point at their subject/object slots.

Each relation slot emits a subject and an object reference embedding. The
referenced object slot is the one with the highest cosine similarity, so no
``N x N`` pair matrix is ever built; matching costs ``O(K * N * D)``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .heads import FFN


class ReferenceHead(nn.Module):
    def __init__(self, slot_dim: int):
        super().__init__()
        self.subject = FFN(slot_dim, slot_dim)
        self.object = FFN(slot_dim, slot_dim)

    def forward(self, rslots: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.subject(rslots), self.object(rslots)


def cosine_matrix(refs: torch.Tensor, slots: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differentiable ``... x K x N`` cosine similarities (used by the losses)."""
    r = refs / refs.norm(dim=-1, keepdim=True).clamp_min(eps)
    s = slots / slots.norm(dim=-1, keepdim=True).clamp_min(eps)
    return r @ s.transpose(-1, -2)


class IndexMatch(NamedTuple):
    subject: np.ndarray  # K
    object: np.ndarray  # K
    sim_subject: np.ndarray  # K x N
    sim_object: np.ndarray  # K x N
    zero_norm: int  # number of zero-norm reference and slot vectors


def _cosine_or_neg_inf(refs: np.ndarray, slots: np.ndarray) -> np.ndarray:
    rn = np.linalg.norm(refs, axis=-1)
    sn = np.linalg.norm(slots, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = (refs @ slots.T) / (rn[:, None] * sn[None, :])
    bad = (rn[:, None] == 0) | (sn[None, :] == 0)
    sim[bad] = -np.inf
    return sim


def match_indices(p_subject, p_object, slots) -> IndexMatch:
    """Argmax-cosine slot index for every reference; ties go to the lowest index.

    A zero-norm vector gets cosine ``-inf``; if a whole row is ``-inf`` the index is 0.
    """
    ps, po, s = (np.asarray(torch.as_tensor(x).detach().cpu(), dtype=np.float64) for x in (p_subject, p_object, slots))
    sim_s = _cosine_or_neg_inf(ps, s)
    sim_o = _cosine_or_neg_inf(po, s)
    zero = sum(int((np.linalg.norm(x, axis=-1) == 0).sum()) for x in (ps, po, s))
    return IndexMatch(sim_s.argmax(axis=1), sim_o.argmax(axis=1), sim_s, sim_o, zero)


# ---------------------------------------------------------------- assembly


@dataclass
class ScoredTriplet:
    subject: int  # object slot index
    predicate: int  # relation class index
    object: int  # object slot index
    score: float
    subject_label: int
    object_label: int
    frame: int = 0
    rel_slot: int = -1
    subject_box: Optional[np.ndarray] = None
    object_box: Optional[np.ndarray] = None
    subject_mask: Optional[np.ndarray] = None
    object_mask: Optional[np.ndarray] = None

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)


@dataclass
class AssemblyStats:
    candidates: int = 0
    kept: int = 0
    duplicates: int = 0

    @property
    def duplication_rate(self) -> float:
        return self.duplicates / self.kept if self.kept else 0.0


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def assemble_triplets(
    obj_logits,
    boxes,
    rel_logits,
    match: IndexMatch,
    masks=None,
    score_threshold: float = 0.0,
    all_predicates: bool = False,
    frame: int = 0,
    stats: Optional[AssemblyStats] = None,
) -> list[ScoredTriplet]:
    """Turn one frame's K relation slots into scored, de-duplicated triplets.

    A relation slot is dropped when its top relation class is no-relation or the
    top class of its subject or object slot is no-object. ``all_predicates``
    expands each surviving slot into one candidate per real predicate (used for
    the "No Constraint" protocol); otherwise it yields its top predicate only.
    Exact duplicates ``(subject, predicate, object)`` keep the highest score.
    """
    obj_p = _softmax(np.asarray(obj_logits, dtype=np.float64))
    rel_p = _softmax(np.asarray(rel_logits, dtype=np.float64))
    N, K = obj_p.shape[0], rel_p.shape[0]
    none_obj, none_rel = obj_p.shape[1] - 1, rel_p.shape[1] - 1
    subj_idx, obj_idx = np.asarray(match.subject), np.asarray(match.object)
    if subj_idx.shape != (K,) or obj_idx.shape != (K,):
        raise IndexError(f"index match covers {subj_idx.shape[0]} relation slots, expected {K}")
    if K and (subj_idx.max() >= N or obj_idx.max() >= N or subj_idx.min() < 0 or obj_idx.min() < 0):
        raise IndexError(f"triplet index outside [0, {N})")
    obj_label = obj_p.argmax(axis=1)
    obj_score = obj_p[np.arange(N), obj_label]
    boxes = None if boxes is None else np.asarray(boxes)
    masks = None if masks is None else np.asarray(masks)

    candidates = []
    for j in range(K):
        si, oi = int(subj_idx[j]), int(obj_idx[j])
        if rel_p[j].argmax() == none_rel or obj_label[si] == none_obj or obj_label[oi] == none_obj:
            continue
        preds = range(none_rel) if all_predicates else [int(rel_p[j].argmax())]
        for c in preds:
            score = float(rel_p[j, c] * obj_score[si] * obj_score[oi])
            if score < score_threshold:
                continue
            candidates.append(
                ScoredTriplet(
                    si, int(c), oi, score, int(obj_label[si]), int(obj_label[oi]), frame, j,
                    None if boxes is None else boxes[si],
                    None if boxes is None else boxes[oi],
                    None if masks is None else masks[si],
                    None if masks is None else masks[oi],
                )
            )
    best: dict[tuple[int, int, int], ScoredTriplet] = {}
    for tr in candidates:
        if tr.key not in best or tr.score > best[tr.key].score:
            best[tr.key] = tr
    out = sorted(best.values(), key=lambda tr: (-tr.score, tr.key))
    if stats is not None:
        stats.candidates += K
        stats.kept += len(candidates)
        stats.duplicates += len(candidates) - len(out)
    return out


# ---------------------------------------------------------------- tubes


@dataclass
class TubeTriplet:
    subject: int
    predicate: int
    object: int
    spans: list[tuple[int, int]]  # inclusive frame runs
    score: float
    subject_label: int = -1
    object_label: int = -1
    frames: list[int] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)


def frame_runs(frames: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers, inclusive bounds."""
    runs: list[tuple[int, int]] = []
    for f in sorted(set(frames)):
        if runs and f == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], f)
        else:
            runs.append((f, f))
    return runs


def _mode(values: Sequence[int]) -> int:
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def aggregate_tubes(per_frame: Sequence[Sequence[ScoredTriplet]]) -> list[TubeTriplet]:
    """Merge per-frame triplets sharing ``(subject slot, predicate, object slot)``.

    Slot index is the tube identity. The tube score is the mean per-frame score
    and labels are the most frequent per-frame labels.
    """
    groups: dict[tuple[int, int, int], list[ScoredTriplet]] = {}
    for t, triplets in enumerate(per_frame):
        for tr in triplets:
            groups.setdefault(tr.key, []).append(tr if tr.frame == t else replace(tr, frame=t))
    tubes = []
    for key, items in groups.items():
        frames = sorted({tr.frame for tr in items})
        tubes.append(
            TubeTriplet(
                *key,
                spans=frame_runs(frames),
                score=float(np.mean([tr.score for tr in items])),
                subject_label=_mode([tr.subject_label for tr in items]),
                object_label=_mode([tr.object_label for tr in items]),
                frames=frames,
            )
        )
    return sorted(tubes, key=lambda tb: (-tb.score, tb.key))


def tube_volume(slot: int, frames: Sequence[int], slot_masks: Sequence[np.ndarray]) -> np.ndarray:
    """``T x H x W`` volume of slot ``slot`` restricted to ``frames``.

    ``slot_masks[t]`` is the ``N x H x W`` boolean panoptic assignment of frame ``t``.
    """
    T = len(slot_masks)
    H, W = slot_masks[0].shape[-2:]
    vol = np.zeros((T, H, W), dtype=bool)
    for t in frames:
        vol[t] = slot_masks[t][slot]
    return vol
