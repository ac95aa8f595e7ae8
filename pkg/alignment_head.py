"""
Cross-view alignment head.

From the fused sequence Z~ it predicts the master view's 3D joints and one
weak-perspective intrinsic triple per view, then broadcasts the master pose
into every view with the known rig rotations.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch
from torch import nn

from errors import ShapeMismatch, expect_shape
from geometry import CameraRig, project, rotate_points

logger = logging.getLogger(__name__)


@dataclass
class InterPose:
    """Intermediate pose: master 3D joints and their per-view 3D/2D images.

    Shapes: p3d_master (B, K, 3); intrinsics (B, N, 3) as (s, tx, ty);
    p3d (B, N, K, 3); p2d (B, N, K, 2).
    """

    p3d_master: torch.Tensor
    intrinsics: torch.Tensor
    p3d: torch.Tensor
    p2d: torch.Tensor


class AlignmentHead(nn.Module):
    """Hidden layer of width d, then a per-row 3D regressor and a per-view intrinsics map."""

    def __init__(self, d: int = 64, num_joints: int = 14, image_size: int = 112,
                 scale_prior: float = 50.0):
        super().__init__()
        self.num_joints = num_joints
        self.image_size = image_size
        self.scale_prior = scale_prior
        self.hidden = nn.Sequential(nn.Linear(d, d), nn.SiLU())
        self.pose = nn.Linear(d, 3)
        self.camera = nn.Linear(d, 3)

    def forward(self, z: torch.Tensor, master: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
        return predict_master(z, self, master)


def predict_master(z: torch.Tensor, params: AlignmentHead,
                   master: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B, K*N, d) -> p3d_master (B, K, 3) and intrinsics (B, N, 3).

    `master` is the index of the master view's token group in `z`.
    """
    k = params.num_joints
    expect_shape("z", z.shape, (None, None, params.pose.in_features))
    if z.shape[1] % k != 0:
        raise ShapeMismatch(f"Sequence length {z.shape[1]} is not a multiple of K={k}")
    b, n = z.shape[0], z.shape[1] // k
    hidden = params.hidden(z).reshape(b, n, k, -1)
    p3d = params.pose(hidden[:, master])
    raw = params.camera(hidden.mean(dim=2))
    scale = params.scale_prior * torch.exp(raw[..., :1])
    center = params.image_size / 2.0
    translation = center + (params.image_size / 2.0) * raw[..., 1:]
    return p3d, torch.cat([scale, translation], dim=-1)


def broadcast_views(p3d_master: torch.Tensor, intrinsics: torch.Tensor,
                    rig: Union[CameraRig, torch.Tensor, np.ndarray]) -> InterPose:
    """Fill per-view 3D joints R_i p and their projections with the view's intrinsics.

    `rig` may be a CameraRig or per-view rotations of shape (N, 3, 3) or (B, N, 3, 3).
    """
    rotations = rig.rotations() if isinstance(rig, CameraRig) else rig
    rotations = torch.as_tensor(np.array(rotations) if isinstance(rotations, np.ndarray) else rotations,
                                dtype=p3d_master.dtype, device=p3d_master.device)
    points = p3d_master[..., None, :, :]
    p3d = rotate_points(rotations, points)
    p2d = project(intrinsics, rotations, points)
    return InterPose(p3d_master=p3d_master, intrinsics=intrinsics, p3d=p3d, p2d=p2d)
