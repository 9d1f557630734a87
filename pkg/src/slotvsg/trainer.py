"""Training loop, checkpoints and full-split evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import metrics as M
from .config import ConfigError, TrainConfig
from .core import VideoAnnotation, boxes_from_masks
from .dataset import Video, load_split, read_manifest
from .encoder import load_features
from .model import Outputs, SceneGraphModel
from .objectives import (
    LossWeights,
    hungarian_match,
    loss_consistency,
    loss_dsgg,
    loss_pvsg,
    loss_rel,
    object_matching_cost,
    classification_loss,
)
from .triplet import AssemblyStats, aggregate_tubes, assemble_triplets, match_indices

log = logging.getLogger(__name__)

TERMS = ("obj_cls", "box", "giou", "mask", "dice", "rel_cls", "sidx", "oidx", "consistency")


class NonFiniteLossError(RuntimeError):
    pass


class CapacityError(ConfigError):
    pass


# ---------------------------------------------------------------- targets


@dataclass
class FrameTargets:
    labels: torch.Tensor  # G
    ids: list[int]
    boxes: Optional[torch.Tensor]  # G x 4
    masks: Optional[torch.Tensor]  # G x H x W
    triplets: list[tuple[int, int, int]]  # (subject id, relation index, object id)


def frame_targets(ann: VideoAnnotation, derive_boxes: bool = False, dtype=torch.float32) -> list[FrameTargets]:
    """Tensors for every frame. ``derive_boxes`` recomputes boxes from masks."""
    obj_index = {c: i for i, c in enumerate(ann.object_vocab)}
    rel_index = {r: i for i, r in enumerate(ann.relation_vocab)}
    out = []
    for fr in ann.frames:
        insts = fr.instances
        labels = torch.tensor([obj_index[i.category] for i in insts], dtype=torch.long)
        has_masks = bool(insts) and all(i.mask is not None for i in insts)
        masks = torch.as_tensor(np.stack([i.mask for i in insts]), dtype=dtype) if has_masks else None
        if derive_boxes and has_masks:
            boxes = torch.tensor([b.as_list() for b in boxes_from_masks([i.mask for i in insts])], dtype=dtype)
        elif insts and all(i.box is not None for i in insts):
            boxes = torch.tensor([i.box.as_list() for i in insts], dtype=dtype)
        else:
            boxes = None
        triplets = [(s, rel_index[r], o) for s, r, o in fr.triplets]
        out.append(FrameTargets(labels, [i.identity for i in insts], boxes, masks, triplets))
    return out


def check_capacity(videos: Sequence[Video], num_objects: int, num_relations: int) -> None:
    for v in videos:
        for fr in v.annotation.frames:
            if len(fr.instances) > num_objects:
                raise CapacityError(
                    f"{v.video_id} frame {fr.t}: {len(fr.instances)} objects exceed model.num_objects={num_objects}"
                )
            if len(fr.triplets) > num_relations:
                raise CapacityError(
                    f"{v.video_id} frame {fr.t}: {len(fr.triplets)} relations exceed model.num_relations={num_relations}"
                )


# ---------------------------------------------------------------- loss


@dataclass
class StepLoss:
    total: torch.Tensor
    terms: dict[str, float]
    assignments: list = field(default_factory=list)


def clip_loss(
    out: Outputs, targets: Sequence[FrameTargets], task: str, weights: LossWeights, use_consistency: bool
) -> StepLoss:
    """Loss of one clip: mean over frames of task + relation loss, plus weighted
    mean over adjacent frame pairs of the consistency loss."""
    T = out.logits.shape[0]
    for name in ("logits", "boxes", "mask_logits", "rel_logits", "sim_subject", "sim_object"):
        value = getattr(out, name)
        if value is not None and not torch.isfinite(value).all():
            raise NonFiniteLossError(f"model output '{name}' is non-finite")
    sums = {k: out.logits.new_zeros(()) for k in TERMS}
    id_maps, assignments = [], []
    for t in range(T):
        tg = targets[t]
        use_box = task in ("dsgg", "joint")
        use_mask = task in ("pvsg", "joint")
        if use_box and tg.boxes is None and len(tg.ids):
            raise ValueError("box targets missing")
        if use_mask and tg.masks is None and len(tg.ids):
            raise ValueError("mask targets missing")
        cost = object_matching_cost(
            out.logits[t], tg.labels, weights,
            boxes=out.boxes[t] if use_box else None, gt_boxes=tg.boxes if use_box else None,
            mask_logits=out.mask_logits[t] if use_mask else None, gt_masks=tg.masks if use_mask else None,
        )
        asg = hungarian_match(cost)
        assignments.append(asg)
        if use_box:
            rep = loss_dsgg(out.logits[t], out.boxes[t], tg.labels, tg.boxes, asg, weights)
            for k in ("box", "giou"):
                sums[k] = sums[k] + rep.terms[k]
            sums["obj_cls"] = sums["obj_cls"] + rep.terms["obj_cls"]
        if use_mask:
            rep = loss_pvsg(out.logits[t], out.mask_logits[t], tg.labels, tg.masks, asg, weights)
            for k in ("mask", "dice"):
                sums[k] = sums[k] + rep.terms[k]
            if not use_box:
                sums["obj_cls"] = sums["obj_cls"] + rep.terms["obj_cls"]
        id_to_slot = {tg.ids[g]: p for p, g in asg.pairs}
        id_maps.append(id_to_slot)
        rel = loss_rel(out.rel_logits[t], out.sim_subject[t], out.sim_object[t], tg.triplets, id_to_slot, weights)
        for k in ("rel_cls", "sidx", "oidx"):
            sums[k] = sums[k] + rel.terms[k]
    means = {k: v / T for k, v in sums.items()}
    if use_consistency and T > 1:
        cons = out.logits.new_zeros(())
        for t in range(1, T):
            pairs = [(id_maps[t][i], id_maps[t - 1][i]) for i in id_maps[t] if i in id_maps[t - 1]]
            cons = cons + loss_consistency(out.slots[t], out.slots[t - 1], pairs).total
        means["consistency"] = cons / (T - 1)
    coef = {
        "obj_cls": weights.obj_cls, "box": weights.box, "giou": weights.giou, "mask": weights.mask,
        "dice": weights.dice, "rel_cls": weights.rel_cls, "sidx": weights.sidx, "oidx": weights.oidx,
        "consistency": weights.consistency,
    }
    for k, v in means.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(f"loss term '{k}' is non-finite ({float(v)})")
    total = sum(coef[k] * means[k] for k in TERMS)
    return StepLoss(total, {k: float(v.detach()) for k, v in means.items()}, assignments)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: SceneGraphModel
    config: TrainConfig
    step: int
    optimizer_state: Optional[dict]
    meta: dict

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "model": self.model.state_dict(),
                "config": self.config.to_dict(),
                "step": self.step,
                "optimizer": self.optimizer_state,
                "meta": self.meta,
            },
            path,
        )


def build_model(cfg: TrainConfig, meta: dict) -> SceneGraphModel:
    dtype = torch.float64 if cfg.trainer.dtype == "float64" else torch.float32
    model = SceneGraphModel(
        cfg.model,
        len(meta["object_vocab"]),
        len(meta["relation_vocab"]),
        tuple(meta["frame_size"]),
        use_encoder=not cfg.data.features,
    )
    return model.to(dtype)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(blob["config"])
    model = build_model(cfg, blob["meta"])
    model.load_state_dict(blob["model"])
    return Checkpoint(model, cfg, blob["step"], blob["optimizer"], blob["meta"])


def dataset_meta(videos: Sequence[Video]) -> dict:
    ann = videos[0].annotation
    return {
        "object_vocab": list(ann.object_vocab),
        "relation_vocab": list(ann.relation_vocab),
        "frame_size": list(ann.frame_size),
    }


# ---------------------------------------------------------------- training


def video_features(cfg: TrainConfig, video: Video, dtype) -> Optional[torch.Tensor]:
    if not cfg.data.features:
        return None
    return torch.as_tensor(load_features(Path(cfg.data.features) / f"{video.video_id}.npy"), dtype=dtype)


def images_tensor(frames: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(frames, dtype=dtype) / 255.0


def train(
    cfg: TrainConfig,
    videos: Optional[Sequence[Video]] = None,
    out_dir: str | Path | None = None,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> tuple[Checkpoint, list[dict]]:
    """Optimize a fresh model on ``videos`` (default: the configured train split).

    Returns the final checkpoint and one log record per step. With ``out_dir``
    the log is written as ``train_log.jsonl`` and checkpoints as ``ckpt_*.pt``
    plus ``final.pt``.
    """
    cfg.validate()
    if videos is None:
        videos = load_split(cfg.data.root, cfg.data.train_split)
    if not videos:
        raise ValueError("no training videos")
    check_capacity(videos, cfg.model.num_objects, cfg.model.num_relations)
    tc = cfg.trainer
    dtype = torch.float64 if tc.dtype == "float64" else torch.float32
    torch.manual_seed(tc.seed)
    meta = dataset_meta(videos)
    model = build_model(cfg, meta)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    weights = cfg.loss.weights()
    derive = tc.task in ("pvsg", "joint")
    targets = [frame_targets(v.annotation, derive_boxes=derive, dtype=dtype) for v in videos]
    images = [images_tensor(v.frames, dtype) for v in videos]
    feats = [video_features(cfg, v, dtype) for v in videos]
    rng = np.random.default_rng(tc.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")
    records = []
    try:
        for step in range(1, tc.steps + 1):
            task = tc.task
            if task == "joint" and tc.joint_schedule == "alternate":
                task = "dsgg" if step % 2 else "pvsg"
            opt.zero_grad(set_to_none=True)
            total = 0.0
            terms = {k: 0.0 for k in TERMS}
            for _ in range(tc.batch_size):
                vi = int(rng.integers(len(videos)))
                T = images[vi].shape[0]
                length = int(rng.integers(min(tc.clip_min, T), min(tc.clip_max, T) + 1))
                start = int(rng.integers(0, T - length + 1))
                sl = slice(start, start + length)
                out = model(images[vi][sl], with_masks=task != "dsgg",
                            features=None if feats[vi] is None else feats[vi][sl])
                loss = clip_loss(out, targets[vi][sl], task, weights, cfg.loss.use_consistency)
                (loss.total / tc.batch_size).backward()
                total += float(loss.total.detach()) / tc.batch_size
                for k in TERMS:
                    terms[k] += loss.terms[k] / tc.batch_size
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip))
            opt.step()
            rec = {"step": step, "task": task, "total": total, **terms, "grad_norm": grad_norm}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            if log_fn is not None:
                log_fn(rec)
            if out_dir is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                Checkpoint(model, cfg, step, opt.state_dict(), meta).save(out_dir / f"ckpt_{step:06d}.pt")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = Checkpoint(model, cfg, tc.steps, opt.state_dict(), meta)
    if out_dir is not None:
        ckpt.save(out_dir / "final.pt")
    return ckpt, records


# ---------------------------------------------------------------- inference


def panoptic_assignment(mask_logits: np.ndarray, obj_logits: np.ndarray) -> np.ndarray:
    """``N x H x W`` disjoint boolean masks.

    Each pixel goes to the slot maximizing mask probability times class
    confidence among slots whose top class is a real object, provided that
    slot's mask probability there exceeds 0.5.
    """
    prob = 1 / (1 + np.exp(-mask_logits))
    cls = np.exp(obj_logits - obj_logits.max(-1, keepdims=True))
    cls /= cls.sum(-1, keepdims=True)
    label = cls.argmax(-1)
    keep = label != cls.shape[1] - 1
    N = prob.shape[0]
    out = np.zeros_like(prob, dtype=bool)
    if not keep.any():
        return out
    score = prob * cls.max(-1)[:, None, None]
    score[~keep] = -1
    winner = score.argmax(0)
    won_prob = np.take_along_axis(prob, winner[None], 0)[0]
    valid = (won_prob > 0.5) & keep[winner]
    for i in range(N):
        out[i] = valid & (winner == i)
    return out


@dataclass
class VideoPrediction:
    video_id: str
    triplets: list  # per frame: list[ScoredTriplet], top predicate per slot
    candidates: list  # per frame: all-predicate candidates
    obj_logits: np.ndarray
    boxes: np.ndarray
    rel_logits: np.ndarray
    matches: list
    panoptic: Optional[np.ndarray]  # T x N x H x W
    mask_probs: Optional[np.ndarray]  # T x N x H x W sigmoid of the mask logits
    tubes: list
    attn: np.ndarray  # T x N x L (object slots, slot-normalized)
    rel_attn: np.ndarray
    stats: AssemblyStats
    seconds: float


@torch.no_grad()
def predict_video(model: SceneGraphModel, video: Video, with_masks: bool, score_threshold: float = 0.0,
                  features: Optional[torch.Tensor] = None) -> VideoPrediction:
    model.eval()
    dtype = next(model.parameters()).dtype
    start = time.perf_counter()
    out = model(images_tensor(video.frames, dtype), with_masks=with_masks, features=features)
    logits = out.logits.double().numpy()
    boxes = out.boxes.double().numpy()
    rel = out.rel_logits.double().numpy()
    panoptic = mask_probs = None
    if with_masks:
        ml = out.mask_logits.double().numpy()
        mask_probs = 1 / (1 + np.exp(-ml))
        panoptic = np.stack([panoptic_assignment(ml[t], logits[t]) for t in range(len(ml))])
    stats = AssemblyStats()
    triplets, candidates, matches = [], [], []
    for t in range(logits.shape[0]):
        m = match_indices(out.p_subject[t], out.p_object[t], out.slots[t])
        matches.append(m)
        pm = None if panoptic is None else panoptic[t]
        triplets.append(assemble_triplets(logits[t], boxes[t], rel[t], m, pm, score_threshold, False, t, stats))
        candidates.append(assemble_triplets(logits[t], boxes[t], rel[t], m, None, score_threshold, True, t))
    tubes = aggregate_tubes(triplets)
    seconds = time.perf_counter() - start
    return VideoPrediction(
        video.video_id, triplets, candidates, logits, boxes, rel, matches, panoptic, mask_probs, tubes,
        out.obj_maps.attn.double().numpy(), out.rel_maps.attn.double().numpy(), stats, seconds,
    )


def gt_triplets(ann: VideoAnnotation, t: int) -> list[M.GTTriplet]:
    obj_index = {c: i for i, c in enumerate(ann.object_vocab)}
    rel_index = {r: i for i, r in enumerate(ann.relation_vocab)}
    fr = ann.frames[t]
    out = []
    for s, r, o in fr.triplets:
        si, oi = fr.instance(s), fr.instance(o)
        out.append(
            M.GTTriplet(
                s, rel_index[r], o, obj_index[si.category], obj_index[oi.category],
                None if si.box is None else np.array(si.box.as_list()),
                None if oi.box is None else np.array(oi.box.as_list()),
            )
        )
    return out


def gt_tube_triplets(ann: VideoAnnotation) -> list[M.TubeGT]:
    obj_index = {c: i for i, c in enumerate(ann.object_vocab)}
    rel_index = {r: i for i, r in enumerate(ann.relation_vocab)}
    T, (H, W) = ann.num_frames, ann.frame_size
    frames_of: dict[tuple, list[int]] = {}
    for t, fr in enumerate(ann.frames):
        for tr in fr.triplets:
            frames_of.setdefault(tr, []).append(t)
    cats = ann.categories()
    out = []
    for (s, r, o), frames in frames_of.items():
        vs = np.zeros((T, H, W), dtype=bool)
        vo = np.zeros((T, H, W), dtype=bool)
        for t in frames:
            vs[t] = ann.frames[t].instance(s).mask
            vo[t] = ann.frames[t].instance(o).mask
        out.append(M.TubeGT(s, rel_index[r], o, obj_index[cats[s]], obj_index[cats[o]], vs, vo))
    return out


def tube_candidates(pred: VideoPrediction) -> list[M.TubeCandidate]:
    T = len(pred.triplets)
    out = []
    for tb in pred.tubes:
        H, W = pred.panoptic.shape[-2:]
        vs = np.zeros((T, H, W), dtype=bool)
        vo = np.zeros((T, H, W), dtype=bool)
        for t in tb.frames:
            vs[t] = pred.panoptic[t, tb.subject]
            vo[t] = pred.panoptic[t, tb.object]
        out.append(M.TubeCandidate(tb.subject, tb.predicate, tb.object, tb.score, tb.subject_label, tb.object_label, vs, vo))
    return out


def evaluate(
    ckpt: Checkpoint,
    videos: Optional[Sequence[Video]] = None,
    task: Optional[str] = None,
    ks: Sequence[int] = M.KS,
) -> M.MetricReport:
    """Deterministic evaluation on ``videos`` (default: the configured eval split)."""
    cfg = ckpt.config
    task = task or cfg.trainer.task
    if task not in ("dsgg", "pvsg", "joint"):
        raise ValueError(f"unknown task {task!r}")
    if videos is None:
        videos = load_split(cfg.data.root, cfg.data.eval_split)
    meta = dataset_meta(videos)
    for key in ("object_vocab", "relation_vocab", "frame_size"):
        if list(meta[key]) != list(ckpt.meta[key]):
            raise ValueError(f"checkpoint {key} {ckpt.meta[key]} does not match the dataset's {meta[key]}")
    boxes_on = task in ("dsgg", "joint")
    masks_on = task in ("pvsg", "joint")
    if masks_on:
        for v in videos:
            if not v.annotation.has_masks():
                raise ValueError(f"{v.video_id}: task {task} needs masks")
    acc = {name: {k: M.RecallAccumulator() for k in ks} for name in _table_names(boxes_on, masks_on)}
    det, det_gt, pq_frames = [], [], []
    stats = AssemblyStats()
    seconds, frames_seen, exact_dups = 0.0, 0, 0
    dtype = next(ckpt.model.parameters()).dtype
    for v in videos:
        pred = predict_video(ckpt.model, v, masks_on, cfg.trainer.score_threshold, video_features(cfg, v, dtype))
        seconds += pred.seconds
        frames_seen += len(v.frames)
        stats.candidates += pred.stats.candidates
        stats.kept += pred.stats.kept
        stats.duplicates += pred.stats.duplicates
        ann = v.annotation
        obj_index = {c: i for i, c in enumerate(ann.object_vocab)}
        for t in range(ann.num_frames):
            keys = [tr.key for tr in pred.triplets[t]]
            exact_dups += len(keys) - len(set(keys))
            if not boxes_on:
                continue
            gts = gt_triplets(ann, t)
            fr = ann.frames[t]
            objs = [(i.identity, obj_index[i.category], np.array(i.box.as_list())) for i in fr.instances]
            for k in ks:
                for wc in (True, False):
                    tag = "with" if wc else "no"
                    acc[f"SGDET/{tag}"][k].add(M.recall_at_k(pred.candidates[t], gts, k, M.MatchRule("sgdet", 0.5, wc)))
                    acc[f"PredCLS/{tag}"][k].add(
                        M.predcls_recall(pred.obj_logits[t], pred.boxes[t], pred.rel_logits[t], pred.matches[t], gts, objs, k, wc)
                    )
            probs = _softmax(pred.obj_logits[t])
            labels = probs.argmax(-1)
            det.append([
                (int(labels[i]), float(probs[i, labels[i]]), pred.boxes[t, i])
                for i in range(len(labels)) if labels[i] != probs.shape[1] - 1
            ])
            det_gt.append([(o[1], o[2]) for o in objs])
        if masks_on:
            probs = _softmax(pred.obj_logits)
            for t, fr in enumerate(ann.frames):
                segs = [(int(probs[t, i].argmax()), pred.panoptic[t, i]) for i in range(pred.panoptic.shape[1]) if pred.panoptic[t, i].any()]
                pq_frames.append((segs, [(obj_index[i.category], i.mask) for i in fr.instances]))
            cands = tube_candidates(pred)
            gtubes = gt_tube_triplets(ann)
            for k in ks:
                for thr in (0.5, 0.1):
                    acc[f"PVSG/vIoU{thr}"][k].add(M.pvsg_recall(cands, gtubes, k, thr, with_constraint=False))
    report = M.MetricReport()
    for name, by_k in acc.items():
        row = {}
        for k, a in by_k.items():
            row[f"R@{k}"] = a.recall
            row[f"mR@{k}"] = a.mean_recall
        report.tables[name] = row
        rel_vocab = videos[0].annotation.relation_vocab
        k_ref = 20 if 20 in by_k else max(by_k)
        report.per_predicate[name] = {rel_vocab[c]: r for c, r in by_k[k_ref].per_predicate().items()}
    if boxes_on:
        report.ap50 = M.ap50(det, det_gt)
    if masks_on:
        report.pq = M.panoptic_quality(pq_frames)
    report.diagnostics = {
        "duplication_rate_before_merge": stats.duplication_rate,
        "exact_duplicates_after_merge": float(exact_dups),
        "seconds_per_frame": seconds / max(frames_seen, 1),
        "videos": float(len(videos)),
    }
    return report


def _table_names(boxes_on: bool, masks_on: bool) -> list[str]:
    names = []
    if boxes_on:
        names += ["SGDET/with", "SGDET/no", "PredCLS/with", "PredCLS/no"]
    if masks_on:
        names += ["PVSG/vIoU0.5", "PVSG/vIoU0.1"]
    return names


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------- export


def export_scene_graph(pred: VideoPrediction, meta: dict) -> dict:
    """JSON-ready per-frame scene graphs and video-level tube triplets."""
    ov, rv = meta["object_vocab"], meta["relation_vocab"]
    frames = []
    for t, trs in enumerate(pred.triplets):
        probs = _softmax(pred.obj_logits[t])
        labels = probs.argmax(-1)
        objects = [
            {
                "slot": i,
                "category": ov[labels[i]],
                "score": round(float(probs[i, labels[i]]), 6),
                "box": [round(float(x), 6) for x in pred.boxes[t, i]],
            }
            for i in range(len(labels)) if labels[i] != probs.shape[1] - 1
        ]
        relations = [
            {"subject": tr.subject, "predicate": rv[tr.predicate], "object": tr.object, "score": round(tr.score, 6)}
            for tr in trs
        ]
        frames.append({"t": t, "objects": objects, "relations": relations})
    tubes = [
        {
            "subject": tb.subject, "predicate": rv[tb.predicate], "object": tb.object,
            "spans": [list(s) for s in tb.spans], "score": round(tb.score, 6),
        }
        for tb in pred.tubes
    ]
    return {"video_id": pred.video_id, "frames": frames, "tubes": tubes}
