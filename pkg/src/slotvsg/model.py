"""End-to-end scene-graph model: encoder -> slots -> heads -> reference embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .config import ModelConfig
from .encoder import PatchEncoder
from .heads import MaskDecoder, MaskHead, ObjectHead, RelationHead
from .slots import AttentionMaps, Decomposer
from .triplet import ReferenceHead, cosine_matrix


@dataclass
class Outputs:
    features: torch.Tensor  # T x h x w x D_enc
    slots: torch.Tensor  # T x N x D_slot
    rslots: torch.Tensor  # T x K x D_slot
    obj_maps: AttentionMaps
    rel_maps: AttentionMaps
    logits: torch.Tensor  # T x N x (C_obj + 1)
    boxes: torch.Tensor  # T x N x 4
    rel_logits: torch.Tensor  # T x K x (C_rel + 1)
    p_subject: torch.Tensor  # T x K x D_slot
    p_object: torch.Tensor
    sim_subject: torch.Tensor  # T x K x N cosine
    sim_object: torch.Tensor
    mask_logits: Optional[torch.Tensor] = None  # T x N x H x W


def decoder_strides(stride: int) -> tuple[int, int, int, int]:
    """Four per-layer factors (each 1 or 2, then a remainder) whose product is ``stride``."""
    out, rem = [], stride
    for _ in range(3):
        if rem % 2 == 0 and rem > 1:
            out.append(2)
            rem //= 2
        else:
            out.append(1)
    out.append(rem)
    return tuple(out)


class SceneGraphModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_object_classes: int, num_relation_classes: int,
                 image_size=(64, 64), use_encoder: bool = True):
        super().__init__()
        self.cfg = cfg
        self.image_size = tuple(image_size)
        self.num_object_classes = num_object_classes
        self.num_relation_classes = num_relation_classes
        self.encoder = PatchEncoder(image_size, cfg.stride, cfg.enc_dim, cfg.encoder_depth) if use_encoder else None
        self.decomposer = Decomposer(cfg.num_objects, cfg.num_relations, cfg.slot_dim, cfg.enc_dim, cfg.iters)
        self.object_head = ObjectHead(cfg.slot_dim, num_object_classes)
        self.relation_head = RelationHead(cfg.slot_dim, num_relation_classes)
        self.references = ReferenceHead(cfg.slot_dim)
        self.decoder = MaskDecoder(cfg.enc_dim, cfg.dec_dim, decoder_strides(cfg.stride))
        self.mask_head = MaskHead(cfg.slot_dim, cfg.dec_dim)

    def forward(self, images: torch.Tensor, with_masks: bool = True, features: Optional[torch.Tensor] = None) -> Outputs:
        """``images``: T x H x W x 3 in [0, 1]. ``features`` bypasses the encoder."""
        if features is None:
            if self.encoder is None:
                raise ValueError("model built without an encoder needs precomputed features")
            features = self.encoder(images)
        s, z, s_maps, z_maps = self.decomposer.decompose_video(features, self.cfg.init_mode)
        obj = self.object_head(s)
        rel_logits = self.relation_head(z)
        ps, po = self.references(z)
        masks = None
        if with_masks:
            pixels = self.decoder(features, self.image_size)
            masks = self.mask_head(s, pixels)
        return Outputs(
            features, s, z, s_maps, z_maps, obj.logits, obj.boxes, rel_logits, ps, po,
            cosine_matrix(ps, s), cosine_matrix(po, s), masks,
        )
