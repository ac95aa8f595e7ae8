"""
Progressive mesh decoder.

Z~ is length-matched to K + M_sub2 rows, concatenated with the T-pose joint
and coarse-vertex coordinates, optionally masked, and run through three
attention blocks of shrinking width. The last linear map gives 3D coordinates
for the joints and coarse vertices; two fixed (or learnable) matrices upsample
the coarse vertices to the sub1 and full meshes.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

from errors import ShapeMismatch, expect_shape
from fusion_transformer import AttentionBlock
from mesh import MeshTemplate

logger = logging.getLogger(__name__)


@dataclass
class DecodedBody:
    """Master-frame prediction at every resolution, each (B, rows, 3)."""

    joints: torch.Tensor
    v_sub2: torch.Tensor
    v_sub1: torch.Tensor
    v_full: torch.Tensor


def block_heads(width: int, max_heads: int) -> int:
    """Largest divisor of `width` not exceeding `max_heads`."""
    return max(h for h in range(1, max_heads + 1) if width % h == 0)


def progressive_widths(d: int) -> Tuple[int, int, int]:
    width = d + 3
    return width, width // 2, width // 4


class MeshDecoder(nn.Module):
    def __init__(self, template: MeshTemplate, rows_in: int, d: int = 64,
                 mask_fraction_max: float = 0.3, decoder_heads: int = 4, dropout: float = 0.1,
                 learnable_upsampling: bool = False,
                 widths: Optional[Sequence[int]] = None):
        super().__init__()
        self.num_joints = template.num_joints
        self.m_sub2 = template.m_sub2
        self.rows_in = rows_in
        self.d = d
        self.mask_fraction_max = mask_fraction_max
        rows_out = self.num_joints + self.m_sub2

        self.length_match = nn.Parameter(torch.randn(rows_out, rows_in) / rows_in ** 0.5)
        self.mask_token = nn.Parameter(torch.zeros(d))
        template_coords = torch.cat([template.tensor("j_tpose"),
                                     template.tensor("v_tpose")[torch.as_tensor(template.sub2_idx)]])
        self.register_buffer("template_coords", template_coords)

        widths = tuple(widths or progressive_widths(d))
        if widths[0] != d + 3:
            raise ShapeMismatch(f"First block width must be d + 3 = {d + 3}, got {widths[0]}")
        self.blocks = nn.ModuleList(
            [AttentionBlock(w, block_heads(w, decoder_heads), dropout, residual=True) for w in widths]
        )
        self.down = nn.ModuleList([nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:])])
        self.to_coords = nn.Linear(widths[-1], 3)

        up2 = template.tensor("up2")
        up1 = template.tensor("up1")
        if learnable_upsampling:
            self.up2 = nn.Parameter(up2)
            self.up1 = nn.Parameter(up1)
        else:
            self.register_buffer("up2", up2)
            self.register_buffer("up1", up1)

    def build_body_queries(self, z: torch.Tensor,
                           joint_template: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, rows_in, d) -> (B, K + M_sub2, d + 3).

        `joint_template` (B, K, 3) replaces the T-pose joints in the coordinate part.
        """
        expect_shape("z", z.shape, (None, self.rows_in, self.d))
        features = self.length_match @ z
        coords = self.template_coords.expand(z.shape[0], -1, -1)
        if joint_template is not None:
            expect_shape("joint_template", joint_template.shape, (z.shape[0], self.num_joints, 3))
            coords = torch.cat([joint_template.to(coords.dtype), coords[:, self.num_joints:]], dim=1)
        return torch.cat([features, coords], dim=-1)

    def mask_queries(self, queries: torch.Tensor, fraction: Optional[float] = None) -> torch.Tensor:
        """Replace the feature part of a random subset of rows with the mask vector.

        Identity outside training. Each batch item masks floor(f * rows) rows with
        f ~ U[0, mask_fraction_max], unless `fraction` fixes f.
        """
        if not self.training:
            return queries
        b, rows, _ = queries.shape
        if fraction is None:
            if self.mask_fraction_max == 0:
                return queries
            f = torch.rand(b, device=queries.device) * self.mask_fraction_max
        else:
            f = torch.full((b,), float(fraction), device=queries.device)
        counts = torch.floor(f * rows).long()
        rank = torch.rand(b, rows, device=queries.device).argsort(dim=1).argsort(dim=1)
        masked = (rank < counts[:, None])[..., None]
        features = torch.where(masked, self.mask_token.to(queries.dtype), queries[..., :self.d])
        return torch.cat([features, queries[..., self.d:]], dim=-1)

    def progressive_encode(self, queries: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Queries -> (joints (B, K, 3), coarse vertices (B, M_sub2, 3))."""
        expect_shape("queries", queries.shape,
                     (None, self.num_joints + self.m_sub2, self.blocks[0].attention.d))
        x = queries
        for i, block in enumerate(self.blocks):
            x, _ = block(x)
            if i < len(self.down):
                x = self.down[i](x)
        coords = self.to_coords(x)
        return coords[:, :self.num_joints], coords[:, self.num_joints:]

    def upsample(self, v_sub2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        v_sub1 = self.up2 @ v_sub2
        return v_sub1, self.up1 @ v_sub1

    def forward(self, z: torch.Tensor,
                joint_template: Optional[torch.Tensor] = None) -> DecodedBody:
        queries = self.mask_queries(self.build_body_queries(z, joint_template))
        joints, v_sub2 = self.progressive_encode(queries)
        v_sub1, v_full = self.upsample(v_sub2)
        return DecodedBody(joints=joints, v_sub2=v_sub2, v_sub1=v_sub1, v_full=v_full)


def decode_body(z: torch.Tensor, params: MeshDecoder,
                joint_template: Optional[torch.Tensor] = None) -> DecodedBody:
    return params(z, joint_template)
