"""Static figures of a trained model on one video: attention, masks, graphs, tubes."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import Video  # noqa: E402
from .synthgen import PALETTE  # noqa: E402
from .trainer import Checkpoint, VideoPrediction, predict_video, video_features  # noqa: E402

KINDS = ("attention", "masks", "graph", "tube")


def attention_heatmaps(attn: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-slot maps ``N x h x w`` from slot-normalized attention ``N x L``.

    Values at each position sum to 1 across slots; no spatial re-normalization.
    """
    return attn.reshape(attn.shape[0], *grid)


def graph_edges(pred: VideoPrediction, t: int, object_vocab: Sequence[str], relation_vocab: Sequence[str]):
    """Nodes ``{slot: label}`` and labeled edges ``(subject, object, predicate)`` of frame ``t``."""
    nodes, edges = {}, []
    for tr in pred.triplets[t]:
        nodes[tr.subject] = object_vocab[tr.subject_label]
        nodes[tr.object] = object_vocab[tr.object_label]
        edges.append((tr.subject, tr.object, relation_vocab[tr.predicate]))
    return nodes, edges


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def _attention_figures(video: Video, pred: VideoPrediction, frames, out: Path, grid) -> list[Path]:
    written = []
    for t in frames:
        maps = attention_heatmaps(pred.attn[t], grid)
        for i, m in enumerate(maps):
            fig, ax = plt.subplots(figsize=(2, 2))
            ax.imshow(video.frames[t])
            ax.imshow(m, cmap="magma", alpha=0.6, vmin=0.0, vmax=1.0,
                      extent=(0, video.frames.shape[2], video.frames.shape[1], 0), interpolation="nearest")
            ax.set_axis_off()
            written.append(_save(fig, out / f"attention_f{t:03d}_s{i:03d}.png"))
    return written


def _mask_figures(video: Video, pred: VideoPrediction, probs: np.ndarray, frames, out: Path) -> list[Path]:
    written = []
    for t in frames:
        n = probs.shape[1]
        cols = min(n, 8)
        rows = -(-n // cols)
        fig, axes = plt.subplots(rows, cols, figsize=(1.5 * cols, 1.5 * rows), squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.set_axis_off()
            if i < n:
                ax.imshow(video.frames[t])
                ax.imshow(probs[t, i], cmap="viridis", alpha=0.6, vmin=0.0, vmax=1.0)
                ax.set_title(str(i), fontsize=6)
        written.append(_save(fig, out / f"masks_f{t:03d}.png"))
    return written


def _graph_figures(pred: VideoPrediction, frames, out: Path, object_vocab, relation_vocab) -> list[Path]:
    written = []
    for t in frames:
        nodes, edges = graph_edges(pred, t, object_vocab, relation_vocab)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.set_axis_off()
        ids = sorted(nodes)
        pos = {
            n: (np.cos(2 * np.pi * k / max(len(ids), 1)), np.sin(2 * np.pi * k / max(len(ids), 1)))
            for k, n in enumerate(ids)
        }
        for s, o, label in edges:
            (x0, y0), (x1, y1) = pos[s], pos[o]
            ax.annotate("", xy=(x1, y1), xytext=(x0, y0), arrowprops={"arrowstyle": "->"})
            ax.text((x0 + x1) / 2, (y0 + y1) / 2, label, fontsize=7, ha="center")
        for n in ids:
            x, y = pos[n]
            ax.text(x, y, f"{nodes[n]}#{n}", ha="center", va="center", fontsize=8,
                    bbox={"boxstyle": "round", "fc": "white"})
        ax.set_xlim(-1.5, 1.5)
        ax.set_ylim(-1.5, 1.5)
        written.append(_save(fig, out / f"graph_f{t:03d}.png"))
    return written


def _tube_figure(video: Video, pred: VideoPrediction, out: Path) -> list[Path]:
    T = video.frames.shape[0]
    fig, axes = plt.subplots(1, T, figsize=(1.5 * T, 1.6), squeeze=False)
    colors = np.array(PALETTE, dtype=np.float64) / 255
    for t, ax in enumerate(axes[0]):
        canvas = np.zeros((*pred.panoptic.shape[-2:], 3))
        for i in range(pred.panoptic.shape[1]):
            canvas[pred.panoptic[t, i]] = colors[i % len(colors)]
        ax.imshow(canvas)
        ax.set_axis_off()
        ax.set_title(f"t={t}", fontsize=6)
    return [_save(fig, out / "tube.png")]


def emit_figures(
    ckpt: Checkpoint,
    video: Video,
    out_dir: str | Path,
    kinds: Iterable[str] = KINDS,
    frames: Optional[Sequence[int]] = None,
) -> list[Path]:
    """Write the requested figure kinds for ``video`` and return their paths."""
    kinds = list(kinds)
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise ValueError(f"unknown figure kind(s) {unknown}; choose from {', '.join(KINDS)}")
    meta = ckpt.meta
    if tuple(video.annotation.frame_size) != tuple(meta["frame_size"]):
        raise ValueError(f"video frame size {video.annotation.frame_size} != checkpoint {meta['frame_size']}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = list(range(video.frames.shape[0])) if frames is None else list(frames)
    need_masks = "masks" in kinds or "tube" in kinds
    dtype = next(ckpt.model.parameters()).dtype
    pred = predict_video(ckpt.model, video, need_masks, ckpt.config.trainer.score_threshold,
                         video_features(ckpt.config, video, dtype))
    stride = ckpt.config.model.stride
    H, W = meta["frame_size"]
    written: list[Path] = []
    if "attention" in kinds:
        written += _attention_figures(video, pred, frames, out, (H // stride, W // stride))
    if "masks" in kinds:
        written += _mask_figures(video, pred, pred.mask_probs, frames, out)
    if "graph" in kinds:
        written += _graph_figures(pred, frames, out, meta["object_vocab"], meta["relation_vocab"])
    if "tube" in kinds:
        written += _tube_figure(video, pred, out)
    return written
