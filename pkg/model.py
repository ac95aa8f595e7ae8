"""
The full multi-view mesh translator: backbone, fusion, alignment head and mesh decoder.

Input views are reordered by camera id on entry, so the master prediction does
not depend on the order the images arrive in. The fusion variant decides how
the views are merged:

    mmt        encoder over all views' tokens, K*N decoder queries
    conv1x1    1x1 convolution over the stacked feature maps, tiled to K*N rows
    strategyA  like mmt, but the mesh decoder only reads the master view's K rows
    strategyB  encoder over the master view's tokens only; K*N queries
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from alignment_head import AlignmentHead, InterPose, broadcast_views, predict_master
from backbone import Backbone
from config import TrainConfig
from errors import ShapeMismatch, expect_shape
from fusion_transformer import ConvFusion, FusionTransformer
from mesh import MeshTemplate, template_for
from mesh_decoder import DecodedBody, MeshDecoder

logger = logging.getLogger(__name__)

MASTER_VIEW_ID = 0


@dataclass
class Prediction:
    """Master-frame body plus the intermediate pose; views in camera-id order."""

    body: DecodedBody
    inter: InterPose
    view_ids: torch.Tensor
    rotations: torch.Tensor
    master_slot: int

    @property
    def master_camera(self) -> torch.Tensor:
        return self.inter.intrinsics[:, self.master_slot]


def canonical_view_order(view_ids: torch.Tensor) -> torch.Tensor:
    """Per-sample permutation putting the views in ascending camera-id order."""
    return torch.argsort(view_ids, dim=1)


def take_views(x: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    index = order.reshape(order.shape + (1,) * (x.dim() - 2)).expand(order.shape + x.shape[2:])
    return torch.gather(x, 1, index)


class MeshTranslator(nn.Module):
    def __init__(self, config: TrainConfig, template: Optional[MeshTemplate] = None):
        super().__init__()
        self.config = config
        self.template = template or template_for(config.m_full, config.m_sub1, config.m_sub2)
        if self.template.num_joints != config.num_joints:
            raise ShapeMismatch(f"Template has {self.template.num_joints} joints, "
                                f"config expects {config.num_joints}")
        n, k, d = config.n_views, config.num_joints, config.d
        self.n_views = n
        self.variant = config.fusion_variant

        self.backbone = Backbone(config.image_channels, config.feature_channels, config.image_size)
        if self.variant == "conv1x1":
            self.fusion = ConvFusion(n, k, config.feature_channels, d)
        else:
            self.fusion = FusionTransformer(k, config.feature_channels, d, config.h, config.dropout,
                                            config.n_encoder_layers, config.n_decoder_layers,
                                            config.token_embedding)
        self.alignment = AlignmentHead(d, k, config.image_size)
        rows_in = k if self.variant == "strategyA" else k * n
        self.decoder = MeshDecoder(self.template, rows_in, d, config.mask_fraction_max,
                                   config.decoder_heads, config.dropout,
                                   config.learnable_upsampling)

    def _fuse(self, grid: torch.Tensor, view_ids: torch.Tensor, master_slot: int) -> torch.Tensor:
        if self.variant == "conv1x1":
            return self.fusion(grid)
        if self.variant == "strategyB":
            master = slice(master_slot, master_slot + 1)
            return self.fusion(grid[:, master], view_ids[:, master], query_view_ids=view_ids).z
        return self.fusion(grid, view_ids).z

    def forward(self, images: torch.Tensor, view_ids: torch.Tensor,
                rotations: torch.Tensor) -> Prediction:
        """images (B, N, H, W, c), view_ids (B, N) camera ids, rotations (B, N, 3, 3)."""
        expect_shape("images", images.shape, (None, self.n_views, None, None, None))
        expect_shape("view_ids", view_ids.shape, (images.shape[0], self.n_views))
        expect_shape("rotations", rotations.shape, (images.shape[0], self.n_views, 3, 3))

        order = canonical_view_order(view_ids)
        images = take_views(images, order)
        view_ids = torch.gather(view_ids, 1, order)
        rotations = take_views(rotations, order)
        # The master has the smallest camera id, so sorting puts it first.
        if not bool((view_ids[:, 0] == MASTER_VIEW_ID).all()):
            raise ShapeMismatch(f"Every sample needs the master view (id {MASTER_VIEW_ID})")
        master_slot = 0

        grid = self.backbone(images)
        z = self._fuse(grid, view_ids, master_slot)
        p3d, intrinsics = predict_master(z, self.alignment, master_slot)
        inter = broadcast_views(p3d, intrinsics, rotations)

        k = self.config.num_joints
        decoder_rows = z[:, master_slot * k:(master_slot + 1) * k] if self.variant == "strategyA" else z
        joint_template = p3d if self.config.template_replacement else None
        body = self.decoder(decoder_rows, joint_template)
        return Prediction(body=body, inter=inter, view_ids=view_ids, rotations=rotations,
                          master_slot=master_slot)

    def parameter_groups(self) -> Dict[str, nn.Module]:
        return {"backbone": self.backbone, "fusion": self.fusion, "alignment": self.alignment,
                "decoder": self.decoder}


def parameter_offsets(module: nn.Module) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """Name -> (offset, shape) of each parameter in the flat vector."""
    offsets = {}
    offset = 0
    for name, p in module.named_parameters():
        offsets[name] = (offset, tuple(p.shape))
        offset += p.numel()
    return offsets


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return parameters_to_vector(module.parameters()).detach().clone()


def load_flat_parameters(module: nn.Module, flat: torch.Tensor) -> None:
    expected = sum(p.numel() for p in module.parameters())
    if flat.numel() != expected:
        raise ShapeMismatch(f"Flat parameter vector has {flat.numel()} entries, expected {expected}")
    with torch.no_grad():
        vector_to_parameters(flat.to(next(module.parameters()).dtype), module.parameters())
