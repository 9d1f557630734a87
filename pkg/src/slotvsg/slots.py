"""Slot attention with slot-wise softmax competition and a GRU update.

One iteration, for slots ``s`` (M x D_slot) and features ``f`` (L x D_enc)::

    q = Wq LN(s),  k = Wk LN(f),  v = Wv LN(f)
    a = q k^T / sqrt(D_enc)
    attn = softmax over slots (dim 0) of a         # each column sums to 1
    w = attn / attn.sum(over positions)            # each row sums to 1
    s = GRU(input = w v, state = s)
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import torch
from torch import nn


class AttentionMaps(NamedTuple):
    logits: torch.Tensor  # B x M x L
    attn: torch.Tensor  # softmax over slots
    weights: torch.Tensor  # attn re-normalized over positions


class SlotAttention(nn.Module):
    def __init__(self, num_slots: int, slot_dim: int, feat_dim: int, iters: int = 3, init_std: float = 0.1):
        super().__init__()
        if iters < 1:
            raise ValueError("iters must be >= 1")
        self.num_slots = num_slots
        self.slot_dim = slot_dim
        self.feat_dim = feat_dim
        self.iters = iters
        self.tokens = nn.Parameter(torch.randn(num_slots, slot_dim) * init_std)
        self.norm_slots = nn.LayerNorm(slot_dim)
        self.norm_feats = nn.LayerNorm(feat_dim)
        self.to_q = nn.Linear(slot_dim, feat_dim, bias=False)
        self.to_k = nn.Linear(feat_dim, feat_dim, bias=False)
        self.to_v = nn.Linear(feat_dim, feat_dim, bias=False)
        self.gru = nn.GRUCell(feat_dim, slot_dim)

    def init_slots(self, batch: int, mode: str = "learned", previous: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Learned tokens, or the previous frame's final slots in ``carry_previous`` mode.

        ``carry_previous`` without a predecessor (first frame) falls back to the tokens.
        """
        if mode == "learned" or (mode == "carry_previous" and previous is None):
            return self.tokens.expand(batch, -1, -1)
        if mode != "carry_previous":
            raise ValueError(f"unknown slot init mode {mode!r}")
        if previous.shape[-2:] != self.tokens.shape:
            raise ValueError(f"previous slots {tuple(previous.shape)} do not match {tuple(self.tokens.shape)}")
        return previous

    def attend(self, slots: torch.Tensor, k: torch.Tensor) -> AttentionMaps:
        q = self.to_q(self.norm_slots(slots))
        logits = torch.einsum("bmd,bld->bml", q, k) / math.sqrt(self.feat_dim)
        return normalize_attention(logits)

    def forward(self, features: torch.Tensor, init: Optional[torch.Tensor] = None, return_all: bool = False):
        """``features``: B x L x D_enc (or B x H x W x D_enc). Returns (slots, final AttentionMaps).

        With ``return_all`` the second element is the list of maps of every iteration.
        """
        if features.dim() == 4:
            features = features.flatten(1, 2)
        B, L, D = features.shape
        if L == 0:
            raise ValueError("feature map has zero spatial extent")
        if D != self.feat_dim:
            raise ValueError(f"feature dim {D} != {self.feat_dim}")
        if not torch.isfinite(features).all():
            raise FloatingPointError("non-finite values in feature map")
        slots = self.tokens.expand(B, -1, -1) if init is None else init
        if slots.shape[-1] != self.slot_dim:
            raise ValueError(f"slot dim {slots.shape[-1]} != {self.slot_dim}")
        f = self.norm_feats(features)
        k, v = self.to_k(f), self.to_v(f)
        history = []
        for _ in range(self.iters):
            maps = self.attend(slots, k)
            updates = torch.einsum("bml,bld->bmd", maps.weights, v)
            M = slots.shape[1]
            slots = self.gru(updates.reshape(B * M, -1), slots.reshape(B * M, -1)).reshape(B, M, -1)
            history.append(maps)
        return slots, (history if return_all else history[-1])


def normalize_attention(logits: torch.Tensor) -> AttentionMaps:
    """Softmax over the slot axis (-2), then re-normalize each slot over positions (-1)."""
    attn = logits.softmax(dim=-2)
    weights = attn / attn.sum(dim=-1, keepdim=True).clamp_min(torch.finfo(attn.dtype).tiny)
    return AttentionMaps(logits, attn, weights)


class Decomposer(nn.Module):
    """Object and relation slot attention over a shared feature map, separate parameters."""

    def __init__(self, num_objects: int, num_relations: int, slot_dim: int, feat_dim: int, iters: int = 3):
        super().__init__()
        self.objects = SlotAttention(num_objects, slot_dim, feat_dim, iters)
        self.relations = SlotAttention(num_relations, slot_dim, feat_dim, iters)

    def forward(self, features, init_mode: str = "learned", previous=None):
        """Returns ``(object_slots, relation_slots, object_maps, relation_maps)``.

        ``previous`` is an optional ``(object_slots, relation_slots)`` pair for carry mode.
        """
        B = features.shape[0]
        prev_o, prev_r = previous if previous is not None else (None, None)
        s, s_maps = self.objects(features, self.objects.init_slots(B, init_mode, prev_o))
        z, z_maps = self.relations(features, self.relations.init_slots(B, init_mode, prev_r))
        return s, z, s_maps, z_maps

    def decompose_video(self, features, init_mode: str = "learned"):
        """Frame-by-frame decomposition of ``T x H x W x D`` features.

        Learned init processes all frames as one batch; carry mode threads slots through time.
        """
        if init_mode == "learned":
            return self(features, "learned")
        outs, prev = [], None
        for t in range(features.shape[0]):
            out = self(features[t : t + 1], init_mode, prev)
            prev = (out[0], out[1])
            outs.append(out)
        s = torch.cat([o[0] for o in outs])
        z = torch.cat([o[1] for o in outs])
        s_maps = AttentionMaps(*(torch.cat([o[2][i] for o in outs]) for i in range(3)))
        z_maps = AttentionMaps(*(torch.cat([o[3][i] for o in outs]) for i in range(3)))
        return s, z, s_maps, z_maps
