"""
Multi-view fusion transformer.

The encoder self-attends over the 49N image tokens of all views. The decoder
cross-attends K*N content-free queries (joint slot + view) against the encoder
output, producing one K-row token group per view. Alternative fusions used by
the ablations (1x1 convolution merge, output-level rotation of the master
prediction) live here too.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from errors import ShapeMismatch, expect_shape
from geometry import CameraRig, rotate_points
from mesh import PosedBody

logger = logging.getLogger(__name__)

GRID_CELLS = 49
MAX_VIEWS = 4


@dataclass
class TokenMeta:
    """Origin of each token: its view id and either a grid cell or a joint slot."""

    view: torch.Tensor
    slot: torch.Tensor


class Embeddings(nn.Module):
    """Learned grid (49), view and joint-slot embeddings, all of width d."""

    def __init__(self, d: int, num_joints: int, n_views: int = MAX_VIEWS,
                 mode: str = "grid+view"):
        super().__init__()
        self.mode = mode
        self.grid = nn.Parameter(torch.randn(GRID_CELLS, d) * 0.02)
        self.view = nn.Parameter(torch.randn(n_views, d) * 0.02)
        self.joint = nn.Parameter(torch.randn(num_joints, d) * 0.02)

    @property
    def use_grid(self) -> bool:
        return "grid" in self.mode

    @property
    def use_view(self) -> bool:
        return "view" in self.mode


def token_meta(view_ids: torch.Tensor, slots_per_view: int) -> TokenMeta:
    """Token 49*i + j (or K*i + k) carries view_ids[i] and slot j."""
    n = view_ids.shape[-1]
    view = view_ids.repeat_interleave(slots_per_view, dim=-1)
    slot = torch.arange(slots_per_view, device=view_ids.device).repeat(n)
    return TokenMeta(view=view, slot=slot.expand_as(view))


def tokenize(grid: torch.Tensor, view_ids: torch.Tensor, projection: nn.Linear,
             embeddings: Embeddings) -> torch.Tensor:
    """(B, N, 7, 7, C) features -> (B, 49N, d) tokens with origin embeddings added."""
    if grid.dim() != 5 or grid.shape[2] * grid.shape[3] != GRID_CELLS:
        raise ShapeMismatch(f"Expected a (B, N, 7, 7, C) grid, got {tuple(grid.shape)}")
    b, n = grid.shape[:2]
    expect_shape("view_ids", view_ids.shape, (b, n))
    tokens = projection(grid.reshape(b, n * GRID_CELLS, grid.shape[-1]))
    meta = token_meta(view_ids, GRID_CELLS)
    if embeddings.use_grid:
        tokens = tokens + embeddings.grid[meta.slot]
    if embeddings.use_view:
        tokens = tokens + embeddings.view[meta.view]
    return tokens


def decoder_queries(view_ids: torch.Tensor, embeddings: Embeddings) -> torch.Tensor:
    """Row g*K + k is joint_emb[k] + view_emb[view_ids[g]]."""
    meta = token_meta(view_ids, embeddings.joint.shape[0])
    return embeddings.joint[meta.slot] + embeddings.view[meta.view]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over h subspaces of width d/h, mixed by W^Z."""

    def __init__(self, d: int, h: int):
        super().__init__()
        if d % h != 0:
            raise ShapeMismatch(f"d={d} is not divisible by h={h}")
        self.d = d
        self.h = h
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_z = nn.Linear(d, d, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.h, self.d // self.h).transpose(1, 2)

    def forward(self, q_tokens: torch.Tensor,
                kv_tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        expect_shape("q_tokens", q_tokens.shape, (None, None, self.d))
        expect_shape("kv_tokens", kv_tokens.shape, (q_tokens.shape[0], None, self.d))
        q = self._split(self.w_q(q_tokens))
        k = self._split(self.w_k(kv_tokens))
        v = self._split(self.w_v(kv_tokens))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d // self.h), dim=-1)
        heads = (weights @ v).transpose(1, 2).reshape(q_tokens.shape[0], -1, self.d)
        return self.w_z(heads), weights


def multi_head_attention(q_tokens: torch.Tensor, kv_tokens: torch.Tensor,
                         params: MultiHeadAttention) -> torch.Tensor:
    return params(q_tokens, kv_tokens)[0]


class Sublayer(nn.Module):
    """LayerNorm(z + Dropout(z W^L))."""

    def __init__(self, d: int, dropout: float = 0.1):
        super().__init__()
        self.w_l = nn.Linear(d, d, bias=False)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.norm(z + self.dropout(self.w_l(z)))


class AttentionBlock(nn.Module):
    """Multi-head attention followed by the sublayer.

    With `residual`, the queries are added to the attention output before the
    sublayer so per-token content (such as template coordinates) is carried through.
    """

    def __init__(self, d: int, h: int, dropout: float = 0.1, residual: bool = False):
        super().__init__()
        self.attention = MultiHeadAttention(d, h)
        self.sublayer = Sublayer(d, dropout)
        self.residual = residual

    def forward(self, q_tokens: torch.Tensor,
                kv_tokens: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        kv_tokens = q_tokens if kv_tokens is None else kv_tokens
        z, weights = self.attention(q_tokens, kv_tokens)
        if self.residual:
            z = z + q_tokens
        return self.sublayer(z), weights


@dataclass
class FusionOutput:
    z: torch.Tensor
    attention: List[torch.Tensor]


class FusionTransformer(nn.Module):
    """Encoder over image tokens, decoder over joint-by-view queries."""

    def __init__(self, num_joints: int = 14, feature_channels: int = 128, d: int = 64, h: int = 8,
                 dropout: float = 0.1, n_encoder_layers: int = 1, n_decoder_layers: int = 1,
                 token_embedding: str = "grid+view", n_view_slots: int = MAX_VIEWS):
        super().__init__()
        self.num_joints = num_joints
        self.d = d
        self.projection = nn.Linear(feature_channels, d, bias=False)
        self.embeddings = Embeddings(d, num_joints, n_view_slots, token_embedding)
        self.encoder = nn.ModuleList(
            [AttentionBlock(d, h, dropout) for _ in range(n_encoder_layers)]
        )
        self.decoder = nn.ModuleList(
            [AttentionBlock(d, h, dropout) for _ in range(n_decoder_layers)]
        )

    def forward(self, grid: torch.Tensor, view_ids: torch.Tensor,
                query_view_ids: Optional[torch.Tensor] = None) -> FusionOutput:
        """Fuse (B, N, 7, 7, C) grids into Z~ of shape (B, K*Nq, d).

        `query_view_ids` defaults to `view_ids`; passing a different set lets the
        encoder see fewer views than the decoder produces groups for.
        """
        attention = []
        memory = tokenize(grid, view_ids, self.projection, self.embeddings)
        for layer in self.encoder:
            memory, weights = layer(memory)
            attention.append(weights)
        ids = view_ids if query_view_ids is None else query_view_ids
        z = decoder_queries(ids, self.embeddings)
        for layer in self.decoder:
            z, weights = layer(z, memory)
            attention.append(weights)
        return FusionOutput(z=z, attention=attention)


def fuse(grid: torch.Tensor, view_ids: torch.Tensor, params: FusionTransformer) -> torch.Tensor:
    return params(grid, view_ids).z


class ConvFusion(nn.Module):
    """Merge N feature maps with a bias-free 1x1 convolution over the stacked channels.

    The 49 merged tokens are tiled to K*N rows when K*N >= 49 and average-pooled into
    K*N contiguous bins otherwise, so every grid cell reaches the decoder.
    """

    def __init__(self, n_views: int, num_joints: int, feature_channels: int = 128, d: int = 64):
        super().__init__()
        self.n_views = n_views
        self.num_joints = num_joints
        self.feature_channels = feature_channels
        self.conv = nn.Conv2d(n_views * feature_channels, d, kernel_size=1, bias=False)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        expect_shape("grid", grid.shape, (None, self.n_views, 7, 7, self.feature_channels))
        b = grid.shape[0]
        stacked = grid.permute(0, 1, 4, 2, 3).reshape(b, self.n_views * self.feature_channels, 7, 7)
        tokens = self.conv(stacked).flatten(2).transpose(1, 2)
        n_rows = self.num_joints * self.n_views
        if n_rows < GRID_CELLS:
            return F.adaptive_avg_pool1d(tokens.transpose(1, 2), n_rows).transpose(1, 2)
        rows = torch.arange(n_rows, device=grid.device) % GRID_CELLS
        return tokens[:, rows]


def fuse_conv1x1(grid: torch.Tensor, params: ConvFusion) -> torch.Tensor:
    return params(grid)


def output_level_fusion_targets(master_pred: PosedBody,
                                rig: Union[CameraRig, torch.Tensor, np.ndarray]) -> PosedBody:
    """Rotate a master-frame body into every view: (..., M, 3) -> (..., N, M, 3)."""
    rotations = rig.rotations() if isinstance(rig, CameraRig) else rig
    if isinstance(master_pred.vertices, torch.Tensor) and not isinstance(rotations, torch.Tensor):
        rotations = torch.as_tensor(np.array(rotations), dtype=master_pred.vertices.dtype,
                                    device=master_pred.vertices.device)
    vertices = master_pred.vertices[..., None, :, :]
    joints = master_pred.joints[..., None, :, :]
    return PosedBody(vertices=rotate_points(rotations, vertices),
                     joints=rotate_points(rotations, joints))
