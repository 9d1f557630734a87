"""Frame encoder: patch embedding + learned 2D position + pointwise residual blocks.

Every block acts per token, so a token only ever sees its own patch; the
feature map keeps the patch grid layout ``B x H_enc x W_enc x D_enc``.
Externally computed features can be used instead through
:func:`save_features` / :func:`load_features`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return x + self.fc2(torch.relu(self.fc1(self.norm(x))))


class PatchEncoder(nn.Module):
    def __init__(self, image_size=(64, 64), stride: int = 8, dim: int = 64, depth: int = 2, in_channels: int = 3):
        super().__init__()
        H, W = image_size
        if H % stride or W % stride:
            raise ValueError(f"image size {image_size} not divisible by stride {stride}")
        self.image_size = (H, W)
        self.stride = stride
        self.grid = (H // stride, W // stride)
        if min(self.grid) < 2:
            raise ValueError(f"feature grid {self.grid} must be at least 2x2")
        self.dim = dim
        self.patch = nn.Linear(stride * stride * in_channels, dim)
        self.pos = nn.Parameter(torch.randn(*self.grid, dim) * 0.1)
        self.blocks = nn.ModuleList(ResidualBlock(dim) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B, H, W, C = images.shape
        s = self.stride
        x = images.reshape(B, H // s, s, W // s, s, C)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H // s, W // s, s * s * C)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``B x H x W x 3`` images in [0, 1] -> ``B x H_enc x W_enc x D_enc``."""
        if images.dim() == 3:
            return self.forward(images[None])[0]
        B, H, W, _ = images.shape
        if (H, W) != self.image_size:
            if H % self.stride or W % self.stride:
                raise ValueError(f"image {H}x{W} not divisible by stride {self.stride}")
            raise ValueError(f"image {H}x{W} does not match encoder size {self.image_size}")
        x = self.patch(self.patchify(images)) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def encode_frame(image, encoder: PatchEncoder) -> torch.Tensor:
    """Encode a single ``H x W x 3`` frame (uint8 or float in [0, 1])."""
    x = torch.as_tensor(np.asarray(image))
    if x.dtype == torch.uint8:
        x = x.to(next(encoder.parameters()).dtype) / 255.0
    return encoder(x)


def save_features(path: str | Path, features: np.ndarray) -> None:
    """Store a ``T x H_enc x W_enc x D_enc`` array as little-endian float32 ``.npy``.

    A JSON sidecar ``<path>.json`` records the shape for tools that do not read npy headers.
    """
    arr = np.asarray(features)
    if arr.ndim != 4:
        raise ValueError(f"features must be T x H x W x D, got shape {arr.shape}")
    arr = arr.astype("<f4", copy=False)
    path = Path(path)
    if path.suffix != ".npy":
        path = path.with_name(path.name + ".npy")
    np.save(path, arr, allow_pickle=False)
    Path(str(path) + ".json").write_text(
        json.dumps({"shape": list(arr.shape), "dtype": "float32", "byteorder": "little"}) + "\n"
    )


def load_features(path: str | Path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 4:
        raise ValueError(f"{path}: expected T x H x W x D features, got shape {arr.shape}")
    if arr.dtype != np.dtype("<f4"):
        raise ValueError(f"{path}: expected little-endian float32, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite feature values")
    return arr
