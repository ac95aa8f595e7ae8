"""
Camera geometry for the multi-view rig.

Cameras are rotation-only about a shared origin with weak-perspective
intrinsics (s, tx, ty): p2d = s * (R p3d)_xy + t. Rig rotations are stored
relative to the master camera, so the master rotation is the identity and
view-i coordinates are R_i applied to master-frame coordinates.

rotate_points and project accept numpy arrays or torch tensors (any leading
batch dimensions) and return the same kind, so the data generator and the
network share one implementation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Sequence, Union

import numpy as np
import torch

from errors import ConfigError, DegenerateCloud, ShapeMismatch

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Rotation:
    """Proper 3x3 rotation matrix."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeMismatch(f"Rotation must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ConfigError("Rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ORTHONORMAL_TOL:
            raise ConfigError("Rotation matrix must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def about_axis(cls, axis: Sequence[float], angle: float) -> "Rotation":
        return cls(axis_angle_to_matrix(np.asarray(axis, dtype=np.float64) * angle))

    def inverse(self) -> "Rotation":
        return Rotation(self.m.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.m @ other.m)


@dataclass(frozen=True)
class WeakPerspectiveIntrinsics:
    """Scale (pixels per length unit) and 2D translation (pixels)."""

    s: float
    t: tuple

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"Intrinsic scale must be positive, got {self.s}")
        t = tuple(float(v) for v in self.t)
        if len(t) != 2:
            raise ShapeMismatch(f"Intrinsic translation must have 2 entries, got {len(t)}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.t[0], self.t[1]], dtype=np.float64)


@dataclass(frozen=True)
class CameraView:
    view_id: int
    rotation: Rotation
    intrinsics: WeakPerspectiveIntrinsics


@dataclass(frozen=True)
class CameraRig:
    """N cameras sharing one origin; `master` indexes the view predictions are made in."""

    views: tuple
    master: int = 0

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise ConfigError("A rig needs at least one view")
        ids = [v.view_id for v in views]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Duplicate view ids in rig: {ids}")
        if not 0 <= self.master < len(views):
            raise ConfigError(f"master={self.master} outside [0, {len(views)})")
        object.__setattr__(self, "views", views)

    @property
    def n_views(self) -> int:
        return len(self.views)

    def rotations(self) -> np.ndarray:
        return np.stack([v.rotation.m for v in self.views])

    def intrinsics(self) -> np.ndarray:
        return np.stack([v.intrinsics.as_array() for v in self.views])

    def subset(self, n_views: int) -> "CameraRig":
        """First `n_views` cameras; the master must be among them."""
        if not 1 <= n_views <= self.n_views:
            raise ConfigError(f"n_views={n_views} outside [1, {self.n_views}]")
        if self.master >= n_views:
            raise ConfigError("Subset would drop the master view")
        return CameraRig(self.views[:n_views], self.master)

    @classmethod
    def ring(cls, azimuths_deg: Sequence[float], elevation_deg: float, scale: float,
             image_size: int, master: int = 0) -> "CameraRig":
        """Cameras on a horizontal ring looking at the origin, all tilted by `elevation_deg`."""
        world_to_cam = [
            axis_angle_to_matrix(np.array([math.radians(elevation_deg), 0.0, 0.0]))
            @ axis_angle_to_matrix(np.array([0.0, math.radians(a), 0.0]))
            for a in azimuths_deg
        ]
        master_inv = world_to_cam[master].T
        center = image_size / 2.0
        views = tuple(
            CameraView(
                view_id=i,
                rotation=Rotation(c @ master_inv),
                intrinsics=WeakPerspectiveIntrinsics(scale, (center, center)),
            )
            for i, c in enumerate(world_to_cam)
        )
        return cls(views, master)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "master": self.master,
            "views": [
                {
                    "view_id": v.view_id,
                    "rotation": v.rotation.m.tolist(),
                    "intrinsics": [v.intrinsics.s, *v.intrinsics.t],
                }
                for v in self.views
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraRig":
        views: List[CameraView] = []
        for v in data["views"]:
            s, tx, ty = v["intrinsics"]
            views.append(CameraView(int(v["view_id"]), Rotation(np.array(v["rotation"])),
                                    WeakPerspectiveIntrinsics(s, (tx, ty))))
        return cls(tuple(views), int(data["master"]))


def axis_angle_to_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for one axis-angle 3-vector (numpy)."""
    theta = float(np.linalg.norm(axis_angle))
    if theta < 1e-12:
        return np.eye(3)
    k = axis_angle / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def _matrix_like(rotation: Union[Rotation, ArrayLike], like: ArrayLike) -> ArrayLike:
    m = np.array(rotation.m) if isinstance(rotation, Rotation) else rotation
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(m, dtype=like.dtype, device=like.device)
    return np.asarray(m, dtype=like.dtype)


def _camera_like(intrinsics: Union[WeakPerspectiveIntrinsics, ArrayLike], like: ArrayLike):
    cam = intrinsics.as_array() if isinstance(intrinsics, WeakPerspectiveIntrinsics) else intrinsics
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(cam, dtype=like.dtype, device=like.device)
    return np.asarray(cam, dtype=like.dtype)


def rotate_points(rotation: Union[Rotation, ArrayLike], points: ArrayLike) -> ArrayLike:
    """Apply R to each row of a (..., K, 3) point set."""
    if points.shape[-1] != 3:
        raise ShapeMismatch(f"points must end in 3 coordinates, got {tuple(points.shape)}")
    m = _matrix_like(rotation, points)
    return points @ m.swapaxes(-1, -2) if isinstance(m, np.ndarray) else points @ m.transpose(-1, -2)


def project(intrinsics: Union[WeakPerspectiveIntrinsics, ArrayLike],
            rotation: Union[Rotation, ArrayLike], points3d: ArrayLike) -> ArrayLike:
    """Weak-perspective projection s * (R p)_xy + t of (..., K, 3) points.

    `intrinsics` is a WeakPerspectiveIntrinsics or a (..., 3) array of
    (s, tx, ty) whose leading dimensions broadcast against the points'.
    """
    cam = _camera_like(intrinsics, points3d)
    xy = rotate_points(rotation, points3d)[..., :2]
    return cam[..., None, 0:1] * xy + cam[..., None, 1:3]


class ProcrustesResult(NamedTuple):
    scale: float
    rotation: Rotation
    translation: np.ndarray
    aligned: np.ndarray


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> ProcrustesResult:
    """Similarity transform (s, R, t) minimizing ||s R pred + t - gt||_F.

    Closed-form SVD solution with the reflection forced out (det R = +1).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatch(f"Expected matching (K, 3) clouds, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise ShapeMismatch(f"Procrustes alignment needs at least 3 points, got {pred.shape[0]}")

    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    y0 = pred - mu_pred
    x0 = gt - mu_gt
    var_gt = float(np.sum(x0 ** 2))
    if var_gt <= 1e-24:
        raise DegenerateCloud("Target cloud has zero variance; alignment is undefined")
    var_pred = float(np.sum(y0 ** 2))

    u, s, vt = np.linalg.svd(y0.T @ x0)
    v = vt.T
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(v @ u.T)) or 1.0
    r = (v * d) @ u.T
    scale = float(np.sum(s * d) / var_pred) if var_pred > 0 else 0.0
    translation = mu_gt - scale * (r @ mu_pred)
    aligned = scale * (pred @ r.T) + translation
    return ProcrustesResult(scale, Rotation(r), translation, aligned)
