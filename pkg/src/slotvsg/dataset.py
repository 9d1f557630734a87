"""On-disk dataset layout shared by the generator, trainer and CLI.

::

    <root>/manifest.json
    <root>/<video_id>/annotation.json
    <root>/<video_id>/frames/00000.png
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .core import VideoAnnotation, dumps_annotation, load_video_annotation

MANIFEST = "manifest.json"


@dataclass
class Video:
    frames: np.ndarray  # T x H x W x 3 uint8
    annotation: VideoAnnotation

    @property
    def video_id(self) -> str:
        return self.annotation.video_id


def write_video(root: Path, frames: np.ndarray, ann: VideoAnnotation) -> Path:
    vdir = Path(root) / ann.video_id
    (vdir / "frames").mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(frames):
        Image.fromarray(np.ascontiguousarray(img)).save(vdir / "frames" / f"{t:05d}.png")
    (vdir / "annotation.json").write_text(dumps_annotation(ann), encoding="utf-8")
    return vdir


def write_dataset(root: str | Path, splits: dict[str, Iterable[tuple[np.ndarray, VideoAnnotation]]], **meta) -> dict:
    """Write every video of every split and the manifest; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, **meta}
    vocab = None
    for name, videos in splits.items():
        ids = []
        for frames, ann in videos:
            write_video(root, frames, ann)
            ids.append(ann.video_id)
            vocab = vocab or {
                "object_vocab": list(ann.object_vocab),
                "relation_vocab": list(ann.relation_vocab),
                "frame_size": list(ann.frame_size),
                "stuff": sorted(ann.stuff),
            }
        manifest["splits"][name] = ids
    manifest.update(vocab or {})
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{root}: no {MANIFEST}; not a dataset directory")
    return json.loads(path.read_text(encoding="utf-8"))


def read_frames(vdir: Path) -> np.ndarray:
    files = sorted((vdir / "frames").glob("*.png"))
    if not files:
        raise FileNotFoundError(f"{vdir}: no frames")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])


def load_video(root: str | Path, video_id: str) -> Video:
    vdir = Path(root) / video_id
    ann = load_video_annotation(vdir / "annotation.json")
    frames = read_frames(vdir)
    if len(frames) != ann.num_frames:
        raise ValueError(f"{video_id}: {len(frames)} frame images but {ann.num_frames} annotated frames")
    return Video(frames, ann)


def load_split(root: str | Path, split: str) -> list[Video]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"{root}: split '{split}' not in manifest ({sorted(manifest['splits'])})")
    return [load_video(root, vid) for vid in manifest["splits"][split]]
