"""
Training losses (torch) and evaluation metrics (numpy).

Loss tensors carry an optional leading batch dimension; per-sample values are
averaged over the batch. 2D inputs are expected in normalized pixel units
(see normalize_pixels).
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np
import torch

from config import TrainConfig
from errors import ConfigError, NonFinite, ShapeMismatch
from geometry import procrustes_align
from mesh import MeshTemplate, edge_lengths, face_normals

logger = logging.getLogger(__name__)

LOSS_TERMS = ("joint", "vertex", "align", "smooth")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    mu: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"Loss weight {f.name} must be non-negative")

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LossWeights":
        return cls(
            alpha=config.alpha,
            beta=config.beta,
            gamma=0.0 if config.alignment == "off" else config.gamma,
            mu=config.effective_mu,
            lambda1=config.lambda1,
            lambda2=config.lambda2,
            lambda3=config.lambda3,
            lambda4=config.lambda4,
            eta1=config.eta1,
            eta2=config.eta2,
            eta3=config.eta3,
        )

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(**{f.name: getattr(self, f.name) * c for f in fields(self)})


@dataclass
class LossReport:
    """Weighted total (differentiable) plus detached per-term values."""

    total: torch.Tensor
    joint: float
    vertex: float
    align: float
    smooth: float
    breakdown: Dict[str, float]

    def as_dict(self) -> Dict[str, float]:
        out = {"loss": float(self.total.detach()), "joint": self.joint, "vertex": self.vertex,
               "align": self.align, "smooth": self.smooth}
        out.update(self.breakdown)
        return out


def normalize_pixels(p2d: torch.Tensor, image_size: int) -> torch.Tensor:
    """Pixel coordinates [0, image_size] -> [-1, 1]."""
    return p2d / (image_size / 2.0) - 1.0


def _check_pair(name: str, pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{name}: prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")


def _l1_rows(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-row L1 distance averaged over rows (and batch)."""
    return (pred - gt).abs().sum(dim=-1).mean()


def joint_terms(direct3d: torch.Tensor, regressed3d: torch.Tensor, direct2d: torch.Tensor,
                regressed2d: torch.Tensor, gt3d: torch.Tensor,
                gt2d: torch.Tensor) -> Dict[str, torch.Tensor]:
    for name, pred, gt in (("direct3d", direct3d, gt3d), ("regressed3d", regressed3d, gt3d),
                           ("direct2d", direct2d, gt2d), ("regressed2d", regressed2d, gt2d)):
        _check_pair(name, pred, gt)
    return {
        "joint_2d": _l1_rows(direct2d, gt2d),
        "joint_3d": _l1_rows(direct3d, gt3d),
        "joint_reg2d": _l1_rows(regressed2d, gt2d),
        "joint_reg3d": _l1_rows(regressed3d, gt3d),
    }


def loss_joint(direct3d: torch.Tensor, regressed3d: torch.Tensor, direct2d: torch.Tensor,
               regressed2d: torch.Tensor, gt3d: torch.Tensor, gt2d: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Mean over joints of the lambda-weighted L1 distances (direct and regressed, 2D and 3D)."""
    t = joint_terms(direct3d, regressed3d, direct2d, regressed2d, gt3d, gt2d)
    return (weights.lambda1 * t["joint_2d"] + weights.lambda2 * t["joint_3d"]
            + weights.lambda3 * t["joint_reg2d"] + weights.lambda4 * t["joint_reg3d"])


def loss_vertex(v_full: torch.Tensor, v_sub1: torch.Tensor, v_sub2: torch.Tensor,
                gt_full: torch.Tensor, template: MeshTemplate, weights: LossWeights) -> torch.Tensor:
    """Eta-weighted mean L1 at the full, sub1 and sub2 resolutions.

    Ground truth at the coarse resolutions is gt_full restricted to the subset indices.
    """
    _check_pair("v_full", v_full, gt_full)
    gt_sub1 = gt_full[..., torch.as_tensor(template.sub1_idx, device=gt_full.device), :]
    gt_sub2 = gt_full[..., torch.as_tensor(template.sub2_idx, device=gt_full.device), :]
    _check_pair("v_sub1", v_sub1, gt_sub1)
    _check_pair("v_sub2", v_sub2, gt_sub2)
    return (weights.eta1 * _l1_rows(v_full, gt_full) + weights.eta2 * _l1_rows(v_sub1, gt_sub1)
            + weights.eta3 * _l1_rows(v_sub2, gt_sub2))


def loss_align(p3d: torch.Tensor, p2d: torch.Tensor, gt3d: torch.Tensor, gt2d: torch.Tensor,
               use_2d: bool = True) -> torch.Tensor:
    """Sum of per-view L1 distances over (B,) N x K joints, divided by N*K.

    `use_2d=False` keeps only the 3D term.
    """
    _check_pair("p3d", p3d, gt3d)
    _check_pair("p2d", p2d, gt2d)
    n, k = p3d.shape[-3], p3d.shape[-2]
    per_sample = (p3d - gt3d).abs().sum(dim=(-3, -2, -1))
    if use_2d:
        per_sample = per_sample + (p2d - gt2d).abs().sum(dim=(-3, -2, -1))
    return per_sample.mean() / (n * k)


def smooth_terms(vertices: torch.Tensor, gt_vertices: torch.Tensor,
                 template: MeshTemplate) -> Dict[str, torch.Tensor]:
    _check_pair("vertices", vertices, gt_vertices)
    faces = torch.as_tensor(template.faces, device=vertices.device)
    normals = face_normals(gt_vertices.detach(), template.faces)
    normal_term = vertices.new_zeros(())
    for a, b in ((0, 1), (1, 2), (2, 0)):
        edge = vertices[..., faces[:, a], :] - vertices[..., faces[:, b], :]
        normal_term = normal_term + ((edge * normals).sum(dim=-1) ** 2).sum(dim=-1).mean()
    length_term = ((edge_lengths(vertices, template.edges)
                    - edge_lengths(gt_vertices, template.edges)) ** 2).sum(dim=-1).mean()
    delta = vertices - gt_vertices
    neighbor_mean = torch.as_tensor(np.array(template.neighbor_mean), dtype=delta.dtype,
                                    device=delta.device)
    laplacian = ((delta - neighbor_mean @ delta) ** 2).sum(dim=(-2, -1)).mean()
    return {"smooth_normal": normal_term, "smooth_edge": length_term, "smooth_laplacian": laplacian}


def loss_smooth(vertices: torch.Tensor, gt_vertices: torch.Tensor,
                template: MeshTemplate) -> torch.Tensor:
    """Normal consistency against ground-truth face normals, edge-length agreement, and
    a Laplacian penalty on the offset field. Sums over faces, edges and vertices."""
    return sum(smooth_terms(vertices, gt_vertices, template).values())


def total_loss(parts: Dict[str, torch.Tensor], weights: LossWeights,
               breakdown: Optional[Dict[str, torch.Tensor]] = None) -> LossReport:
    values = {}
    for name in LOSS_TERMS:
        part = torch.as_tensor(parts.get(name, 0.0))
        if not bool(torch.isfinite(part).all()):
            raise NonFinite(f"Loss term {name} is not finite: {float(part)}")
        values[name] = part
    total = (weights.alpha * values["joint"] + weights.beta * values["vertex"]
             + weights.gamma * values["align"] + weights.mu * values["smooth"])
    return LossReport(
        total=total,
        joint=float(values["joint"].detach()),
        vertex=float(values["vertex"].detach()),
        align=float(values["align"].detach()),
        smooth=float(values["smooth"].detach()),
        breakdown={k: float(v.detach()) for k, v in (breakdown or {}).items()},
    )


def _points(pred: np.ndarray, gt: np.ndarray) -> tuple:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"Expected matching (..., 3) point sets, got {pred.shape} and {gt.shape}")
    return pred, gt


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint Euclidean distance."""
    pred, gt = _points(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """MPJPE after the optimal similarity alignment of pred onto gt."""
    pred, gt = _points(pred, gt)
    return mpjpe(procrustes_align(pred, gt).aligned, gt)


def mpve(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-vertex Euclidean distance."""
    return mpjpe(pred, gt)
