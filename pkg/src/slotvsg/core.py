"""Domain types for box-level and pixel-level video scene graphs.

Annotations are immutable. A video is a sequence of frames, each holding
instances (persistent identity, category, box, optional mask) and directed
``(subject_id, relation, object_id)`` triplets. The JSON layout is::

    {
      "video_id": "...",
      "frame_size": [H, W],
      "object_vocab": [...],
      "relation_vocab": [...],
      "objects": {"<id>": {"category": "...", "stuff": false}},
      "frames": [
        {"t": 0,
         "instances": [{"id": 1, "box": [cx, cy, w, h], "mask_rle": [...]}],
         "triplets": [[1, "left-of", 2]]}
      ]
    }

Masks are run-length encoded in row-major order as alternating run lengths,
starting with the run of zeros.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

BOX_EPS = 1e-6


class AnnotationError(ValueError):
    """Base class for annotation ingestion failures."""


class AnnotationParseError(AnnotationError):
    pass


class AnnotationSchemaError(AnnotationError):
    pass


class AnnotationInvariantError(AnnotationError):
    pass


@dataclass(frozen=True)
class Box:
    """Normalized center/size box, all coordinates relative to the frame."""

    cx: float
    cy: float
    w: float
    h: float

    def xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    def problems(self) -> list[str]:
        out = []
        if not all(np.isfinite([self.cx, self.cy, self.w, self.h])):
            return ["non-finite coordinate"]
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            out.append(f"center ({self.cx:.4f}, {self.cy:.4f}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            out.append(f"size ({self.w:.4f}, {self.h:.4f}) outside (0,1]")
        x1, y1, x2, y2 = self.xyxy()
        if min(x1, y1) < -BOX_EPS or max(x2, y2) > 1 + BOX_EPS:
            out.append("corners leave the frame")
        return out


def _frozen_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.array(mask, dtype=bool, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class InstanceMask:
    mask: np.ndarray
    frame: int
    identity: int

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen_mask(self.mask))

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return (
            self.frame == other.frame
            and self.identity == other.identity
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None


@dataclass(frozen=True)
class MaskTube:
    """One identity's masks over the frames where it is present."""

    identity: int
    masks: tuple[InstanceMask, ...]

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        frames = [m.frame for m in self.masks]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tube {self.identity}: frame indices not strictly increasing")
        for m in self.masks:
            if m.identity != self.identity:
                raise ValueError(
                    f"tube {self.identity}: member mask carries identity {m.identity}"
                )

    @property
    def frames(self) -> list[int]:
        return [m.frame for m in self.masks]

    def volume(self, num_frames: int, frame_size: tuple[int, int]) -> np.ndarray:
        """Dense ``T x H x W`` boolean volume; absent frames are empty."""
        vol = np.zeros((num_frames, *frame_size), dtype=bool)
        for m in self.masks:
            vol[m.frame] = m.mask
        return vol


@dataclass(frozen=True)
class Instance:
    identity: int
    category: str
    box: Optional[Box] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is not None:
            object.__setattr__(self, "mask", _frozen_mask(self.mask))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        if (self.mask is None) != (other.mask is None):
            return False
        masks_equal = self.mask is None or np.array_equal(self.mask, other.mask)
        return (
            self.identity == other.identity
            and self.category == other.category
            and self.box == other.box
            and masks_equal
        )

    __hash__ = None


Triplet = tuple[int, str, int]


@dataclass(frozen=True)
class FrameAnnotation:
    t: int
    instances: tuple[Instance, ...] = ()
    triplets: tuple[Triplet, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "triplets", tuple(tuple(tr) for tr in self.triplets))

    def instance(self, identity: int) -> Optional[Instance]:
        for inst in self.instances:
            if inst.identity == identity:
                return inst
        return None

    @property
    def identities(self) -> list[int]:
        return [inst.identity for inst in self.instances]


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    frames: tuple[FrameAnnotation, ...]
    object_vocab: tuple[str, ...]
    relation_vocab: tuple[str, ...]
    frame_size: tuple[int, int]
    stuff: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "object_vocab", tuple(self.object_vocab))
        object.__setattr__(self, "relation_vocab", tuple(self.relation_vocab))
        object.__setattr__(self, "frame_size", tuple(int(s) for s in self.frame_size))
        object.__setattr__(self, "stuff", frozenset(self.stuff))

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def categories(self) -> dict[int, str]:
        """Identity -> category, taken from the first frame the identity appears in."""
        out: dict[int, str] = {}
        for fr in self.frames:
            for inst in fr.instances:
                out.setdefault(inst.identity, inst.category)
        return out

    def tube(self, identity: int) -> MaskTube:
        masks = [
            InstanceMask(inst.mask, fr.t, identity)
            for fr in self.frames
            for inst in fr.instances
            if inst.identity == identity and inst.mask is not None
        ]
        return MaskTube(identity, tuple(masks))

    def has_masks(self) -> bool:
        return all(inst.mask is not None for fr in self.frames for inst in fr.instances)


class Task(str, enum.Enum):
    DSGG = "dsgg"
    PVSG = "pvsg"
    JOINT = "joint"


class EvalMode(str, enum.Enum):
    SGDET = "sgdet"
    PREDCLS = "predcls"


@dataclass(frozen=True)
class TaskMode:
    task: Task = Task.DSGG
    submode: EvalMode = EvalMode.SGDET
    with_constraint: bool = True

    def check(self, ann: VideoAnnotation) -> None:
        if self.task in (Task.PVSG, Task.JOINT) and not ann.has_masks():
            raise AnnotationSchemaError(
                f"video {ann.video_id}: {self.task.value} requires instance masks"
            )
        if self.submode is EvalMode.PREDCLS:
            missing = [
                (fr.t, inst.identity)
                for fr in ann.frames
                for inst in fr.instances
                if inst.box is None
            ]
            if missing:
                t, ident = missing[0]
                raise AnnotationSchemaError(
                    f"video {ann.video_id}: PredCLS needs ground-truth boxes "
                    f"(frame {t}, object {ident} has none)"
                )


# ---------------------------------------------------------------- masks / boxes


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {total}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(shape)


def box_from_mask(mask: np.ndarray, identity: Optional[int] = None) -> Box:
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError(f"object {identity}: empty mask has no bounding box")
    h, w = mask.shape
    return Box.from_xyxy(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def boxes_from_masks(
    masks: Iterable[InstanceMask | np.ndarray], frame_size: Optional[tuple[int, int]] = None
) -> list[Box]:
    """Tightest normalized box around the 1-pixels of each mask."""
    out = []
    for m in masks:
        arr, ident = (m.mask, m.identity) if isinstance(m, InstanceMask) else (m, None)
        arr = np.asarray(arr, dtype=bool)
        if frame_size is not None and arr.shape != tuple(frame_size):
            raise ValueError(f"object {ident}: mask shape {arr.shape} != frame size {frame_size}")
        out.append(box_from_mask(arr, ident))
    return out


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    kind: str
    frame: Optional[int]
    identity: Optional[int]
    message: str

    def __str__(self):
        where = []
        if self.frame is not None:
            where.append(f"frame {self.frame}")
        if self.identity is not None:
            where.append(f"object {self.identity}")
        return f"{self.kind} ({', '.join(where) or 'video'}): {self.message}"


def validate_annotation(ann: VideoAnnotation) -> list[Violation]:
    """Every invariant breach in ``ann``; an empty list means valid."""
    out: list[Violation] = []
    H, W = ann.frame_size
    if ann.num_frames < 1:
        out.append(Violation("empty video", None, None, "video has no frames"))
    vocab = set(ann.object_vocab)
    rel_vocab = set(ann.relation_vocab)
    seen_category: dict[int, tuple[str, int]] = {}
    prev_t = None
    for fr in ann.frames:
        if prev_t is not None and fr.t <= prev_t:
            out.append(Violation("frame order", fr.t, None, f"frame index {fr.t} follows {prev_t}"))
        prev_t = fr.t
        ids = fr.identities
        for ident in {i for i in ids if ids.count(i) > 1}:
            out.append(Violation("duplicate identity", fr.t, ident, "identity listed twice"))
        coverage = np.zeros((H, W), dtype=np.int32)
        owner = np.full((H, W), -1, dtype=np.int64)
        for inst in fr.instances:
            if inst.category not in vocab:
                out.append(
                    Violation("unknown category", fr.t, inst.identity, f"'{inst.category}' not in vocabulary")
                )
            first = seen_category.setdefault(inst.identity, (inst.category, fr.t))
            if first[0] != inst.category:
                out.append(
                    Violation(
                        "identity drift",
                        fr.t,
                        inst.identity,
                        f"category '{inst.category}' but '{first[0]}' in frame {first[1]}",
                    )
                )
            if inst.box is not None:
                for msg in inst.box.problems():
                    out.append(Violation("invalid box", fr.t, inst.identity, msg))
            if inst.mask is not None:
                if inst.mask.shape != (H, W):
                    out.append(
                        Violation("mask shape", fr.t, inst.identity, f"{inst.mask.shape} != {(H, W)}")
                    )
                    continue
                if not inst.mask.any():
                    out.append(Violation("empty mask", fr.t, inst.identity, "mask has no pixels"))
                    continue
                clash = np.unique(owner[inst.mask & (coverage > 0)])
                for other in clash:
                    out.append(
                        Violation(
                            "mask overlap",
                            fr.t,
                            inst.identity,
                            f"overlaps object {int(other)}",
                        )
                    )
                coverage += inst.mask
                owner[inst.mask & (owner < 0)] = inst.identity
                if inst.box is not None and not inst.box.problems():
                    ref = box_from_mask(inst.mask)
                    tol = (1.0 / W, 1.0 / H, 1.0 / W, 1.0 / H)
                    if any(abs(a - b) > t + 1e-9 for a, b, t in zip(inst.box.xyxy(), ref.xyxy(), tol)):
                        out.append(
                            Violation("box/mask mismatch", fr.t, inst.identity, "box differs from mask extent by > 1 px")
                        )
        present = set(ids)
        for subj, rel, obj in fr.triplets:
            if rel not in rel_vocab:
                out.append(Violation("unknown relation", fr.t, subj, f"'{rel}' not in relation vocabulary"))
            for end in (subj, obj):
                if end not in present:
                    out.append(
                        Violation("dangling triplet", fr.t, end, f"triplet ({subj}, {rel}, {obj}) references absent object {end}")
                    )
            if subj == obj:
                out.append(Violation("self relation", fr.t, subj, f"({subj}, {rel}, {obj}) has subject == object"))
    return out


# ---------------------------------------------------------------- JSON I/O


def annotation_to_dict(ann: VideoAnnotation) -> dict:
    cats = ann.categories()
    objects = {
        str(ident): {"category": cat, "stuff": cat in ann.stuff}
        for ident, cat in sorted(cats.items())
    }
    frames = []
    for fr in ann.frames:
        instances = []
        for inst in fr.instances:
            rec: dict = {"id": inst.identity}
            if inst.box is not None:
                rec["box"] = inst.box.as_list()
            if inst.mask is not None:
                rec["mask_rle"] = rle_encode(inst.mask)
            if inst.category != cats[inst.identity]:
                rec["category"] = inst.category
            instances.append(rec)
        frames.append(
            {"t": fr.t, "instances": instances, "triplets": [list(tr) for tr in fr.triplets]}
        )
    return {
        "video_id": ann.video_id,
        "frame_size": list(ann.frame_size),
        "object_vocab": list(ann.object_vocab),
        "relation_vocab": list(ann.relation_vocab),
        "objects": objects,
        "frames": frames,
    }


def dumps_annotation(ann: VideoAnnotation) -> str:
    """Canonical text form: sorted keys, fixed separators, trailing newline."""
    return json.dumps(annotation_to_dict(ann), sort_keys=True, separators=(",", ":")) + "\n"


def save_video_annotation(ann: VideoAnnotation, path: str | Path) -> None:
    Path(path).write_text(dumps_annotation(ann), encoding="utf-8")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise AnnotationSchemaError(f"{where}: missing field '{key}'")
    return doc[key]


def annotation_from_dict(doc: dict) -> VideoAnnotation:
    if not isinstance(doc, dict):
        raise AnnotationSchemaError("annotation root must be an object")
    video_id = str(_require(doc, "video_id", "video"))
    frame_size = _require(doc, "frame_size", "video")
    if not (isinstance(frame_size, list) and len(frame_size) == 2 and all(isinstance(s, int) and s > 0 for s in frame_size)):
        raise AnnotationSchemaError("video: frame_size must be [H, W] positive integers")
    H, W = frame_size
    object_vocab = list(_require(doc, "object_vocab", "video"))
    relation_vocab = list(_require(doc, "relation_vocab", "video"))
    objects = _require(doc, "objects", "video")
    categories: dict[int, str] = {}
    stuff = set()
    for key, rec in objects.items():
        ident = int(key)
        cat = _require(rec, "category", f"object {ident}")
        if cat not in object_vocab:
            raise AnnotationSchemaError(f"object {ident}: unknown category '{cat}'")
        categories[ident] = cat
        if rec.get("stuff", False):
            stuff.add(cat)
    frames = []
    for k, frec in enumerate(_require(doc, "frames", "video")):
        t = int(_require(frec, "t", f"frame #{k}"))
        instances = []
        for irec in _require(frec, "instances", f"frame {t}"):
            ident = int(_require(irec, "id", f"frame {t}"))
            if ident not in categories:
                raise AnnotationSchemaError(f"frame {t}, object {ident}: identity missing from 'objects'")
            cat = irec.get("category", categories[ident])
            if cat not in object_vocab:
                raise AnnotationSchemaError(f"frame {t}, object {ident}: unknown category '{cat}'")
            box = None
            if "box" in irec:
                vals = irec["box"]
                if not (isinstance(vals, list) and len(vals) == 4):
                    raise AnnotationSchemaError(f"frame {t}, object {ident}: box must be [cx, cy, w, h]")
                box = Box(*(float(v) for v in vals))
            mask = None
            if "mask_rle" in irec:
                try:
                    mask = rle_decode(irec["mask_rle"], (H, W))
                except (ValueError, TypeError) as exc:
                    raise AnnotationSchemaError(f"frame {t}, object {ident}: bad mask_rle ({exc})") from exc
            if box is None and mask is None:
                raise AnnotationSchemaError(f"frame {t}, object {ident}: needs a box or a mask")
            instances.append(Instance(ident, cat, box, mask))
        triplets = []
        for trec in _require(frec, "triplets", f"frame {t}"):
            if not (isinstance(trec, list) and len(trec) == 3):
                raise AnnotationSchemaError(f"frame {t}: triplet must be [subj_id, relation, obj_id]")
            subj, rel, obj = trec
            if rel not in relation_vocab:
                raise AnnotationSchemaError(f"frame {t}: unknown relation '{rel}'")
            triplets.append((int(subj), str(rel), int(obj)))
        frames.append(FrameAnnotation(t, tuple(instances), tuple(triplets)))
    return VideoAnnotation(
        video_id, tuple(frames), tuple(object_vocab), tuple(relation_vocab), (H, W), frozenset(stuff)
    )


def load_video_annotation(path: str | Path) -> VideoAnnotation:
    """Parse and validate one annotation file; raises on the first class of error found."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: {exc}") from exc
    ann = annotation_from_dict(doc)
    problems = validate_annotation(ann)
    if problems:
        raise AnnotationInvariantError(f"{path}: " + "; ".join(str(p) for p in problems))
    return ann
