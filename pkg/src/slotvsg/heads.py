"""Slot-wise prediction heads and the transpose-convolution mask decoder."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
from torch import nn


class FFN(nn.Sequential):
    """Hidden ReLU layer followed by a task layer."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        hidden = hidden or in_dim
        super().__init__(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class ObjectPredictions(NamedTuple):
    logits: torch.Tensor  # ... x N x (C_obj + 1), last column = no-object
    boxes: torch.Tensor  # ... x N x 4, normalized (cx, cy, w, h) in (0, 1)


class ObjectHead(nn.Module):
    def __init__(self, slot_dim: int, num_classes: int):
        super().__init__()
        self.cls = FFN(slot_dim, num_classes + 1)
        self.box = FFN(slot_dim, 4)

    def forward(self, slots: torch.Tensor) -> ObjectPredictions:
        return ObjectPredictions(self.cls(slots), self.box(slots).sigmoid())


class RelationHead(FFN):
    """Relation slots -> ``K x (C_rel + 1)`` logits, last column = no-relation."""

    def __init__(self, slot_dim: int, num_relations: int):
        super().__init__(slot_dim, num_relations + 1)


class MaskDecoder(nn.Module):
    """Four transpose convolutions upsampling by the product of ``strides``."""

    def __init__(self, in_dim: int, out_dim: int = 16, strides: Sequence[int] = (2, 2, 2, 1), hidden: int = 32):
        super().__init__()
        if len(strides) != 4:
            raise ValueError("the decoder has exactly four transpose convolutions")
        self.strides = tuple(strides)
        self.scale = 1
        for s in strides:
            self.scale *= s
        dims = [in_dim, hidden, hidden, hidden, out_dim]
        layers = []
        for i, s in enumerate(strides):
            if s == 1:
                conv = nn.ConvTranspose2d(dims[i], dims[i + 1], kernel_size=3, stride=1, padding=1)
            else:
                conv = nn.ConvTranspose2d(dims[i], dims[i + 1], kernel_size=s, stride=s)
            layers.append(conv)
            if i < 3:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, fmap: torch.Tensor, out_size: tuple[int, int] | None = None) -> torch.Tensor:
        """``B x H_enc x W_enc x D`` -> ``B x H_in x W_in x D_dec``."""
        B, h, w, _ = fmap.shape
        if out_size is not None and tuple(out_size) != (h * self.scale, w * self.scale):
            raise ValueError(
                f"decoder upsamples {h}x{w} by {self.scale} to {h * self.scale}x{w * self.scale}, "
                f"frame is {out_size[0]}x{out_size[1]}"
            )
        return self.net(fmap.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class MaskHead(nn.Module):
    """Inner product of projected slots with every pixel feature, then a pixel-wise FFN."""

    def __init__(self, slot_dim: int, dec_dim: int, hidden: int | None = None):
        super().__init__()
        self.proj = nn.Linear(slot_dim, dec_dim, bias=False)
        self.ffn = FFN(1, 1, hidden or slot_dim)

    def inner(self, slots: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """``B x N x D_slot``, ``B x H x W x D_dec`` -> ``B x N x H x W`` raw inner products."""
        return torch.einsum("bnd,bhwd->bnhw", self.proj(slots), pixels)

    def forward(self, slots: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """Mask logits ``B x N x H x W``; probabilities are ``logits.sigmoid()``."""
        return self.ffn(self.inner(slots, pixels).unsqueeze(-1)).squeeze(-1)
