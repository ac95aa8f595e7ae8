"""
Finite-difference gradient checks.

Every loss term is differentiated at random float64 points (kept away from the
kinks of the L1 terms) and compared against central differences; the full
model is checked through a smooth objective on a sample of its parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import pandas as pd
import torch

from config import TrainConfig
from losses_metrics import LossWeights, loss_align, loss_joint, loss_smooth, loss_vertex
from mesh import MeshTemplate, template_for
from model import MeshTranslator

logger = logging.getLogger(__name__)

STEP = 1e-4
LOSS_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
ABS_FLOOR = 1e-6
MIN_OFFSET = 0.01


@dataclass
class GradcheckTerm:
    name: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class GradcheckReport:
    terms: List[GradcheckTerm] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.terms)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"term": t.name, "max_rel_error": t.max_rel_error,
                              "tolerance": t.tolerance, "checked": t.checked, "passed": t.passed}
                             for t in self.terms])

    def to_text(self) -> str:
        lines = [f"{t.name:<12} max_rel_error={t.max_rel_error:.3e} "
                 f"(< {t.tolerance:g}) {'ok' if t.passed else 'FAIL'}" for t in self.terms]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def check_tensor_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                          n_coords: int, generator: torch.Generator,
                          step: float = STEP) -> float:
    """Max relative error between autograd and central differences of scalar fn(x)
    over `n_coords` randomly chosen coordinates of x."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().reshape(-1)
    flat = x.detach().reshape(-1).clone()
    coords = torch.randperm(flat.numel(), generator=generator)[:n_coords]
    worst = 0.0
    with torch.no_grad():
        for i in coords.tolist():
            plus = flat.clone()
            plus[i] += step
            minus = flat.clone()
            minus[i] -= step
            numeric = (float(fn(plus.reshape(x.shape))) - float(fn(minus.reshape(x.shape)))) / (2 * step)
            worst = max(worst, relative_error(float(analytic[i]), numeric))
    return worst


def _offsets(shape, generator: torch.Generator) -> torch.Tensor:
    """Random offsets with magnitude in [MIN_OFFSET, 0.1] so no L1 term sits at a kink."""
    magnitude = MIN_OFFSET + 0.09 * torch.rand(shape, generator=generator, dtype=torch.float64)
    sign = torch.where(torch.rand(shape, generator=generator) < 0.5, -1.0, 1.0).double()
    return magnitude * sign


def _loss_terms(template: MeshTemplate, n_views: int, n_points: int, n_coords: int,
                generator: torch.Generator) -> List[GradcheckTerm]:
    weights = LossWeights(mu=1.0)
    k = template.num_joints
    v_rest = template.tensor("v_tpose", torch.float64)
    worst = {"joint": 0.0, "vertex": 0.0, "align": 0.0, "smooth": 0.0}

    for _ in range(n_points):
        gt3d = torch.randn(k, 3, generator=generator, dtype=torch.float64) * 0.3
        gt2d = torch.rand(k, 2, generator=generator, dtype=torch.float64) * 2 - 1
        packed_j = torch.cat([(gt3d + _offsets((k, 3), generator)).reshape(-1),
                              (gt3d + _offsets((k, 3), generator)).reshape(-1),
                              (gt2d + _offsets((k, 2), generator)).reshape(-1),
                              (gt2d + _offsets((k, 2), generator)).reshape(-1)])

        def joint_fn(x: torch.Tensor) -> torch.Tensor:
            d3, r3, d2, r2 = torch.split(x, [3 * k, 3 * k, 2 * k, 2 * k])
            return loss_joint(d3.reshape(k, 3), r3.reshape(k, 3), d2.reshape(k, 2),
                              r2.reshape(k, 2), gt3d, gt2d, weights)

        worst["joint"] = max(worst["joint"], check_tensor_gradient(joint_fn, packed_j, n_coords, generator))

        gt_full = v_rest + 0.02 * torch.randn(v_rest.shape, generator=generator, dtype=torch.float64)
        sub1 = torch.as_tensor(template.sub1_idx)
        sub2 = torch.as_tensor(template.sub2_idx)
        packed_v = torch.cat([(gt_full + _offsets(gt_full.shape, generator)).reshape(-1),
                              (gt_full[sub1] + _offsets((len(sub1), 3), generator)).reshape(-1),
                              (gt_full[sub2] + _offsets((len(sub2), 3), generator)).reshape(-1)])
        sizes = [template.m_full * 3, template.m_sub1 * 3, template.m_sub2 * 3]

        def vertex_fn(x: torch.Tensor) -> torch.Tensor:
            full, s1, s2 = torch.split(x, sizes)
            return loss_vertex(full.reshape(-1, 3), s1.reshape(-1, 3), s2.reshape(-1, 3), gt_full,
                               template, weights)

        worst["vertex"] = max(worst["vertex"], check_tensor_gradient(vertex_fn, packed_v, n_coords, generator))

        gt_p3d = torch.randn(n_views, k, 3, generator=generator, dtype=torch.float64)
        gt_p2d = torch.rand(n_views, k, 2, generator=generator, dtype=torch.float64) * 2 - 1
        packed_a = torch.cat([(gt_p3d + _offsets(gt_p3d.shape, generator)).reshape(-1),
                              (gt_p2d + _offsets(gt_p2d.shape, generator)).reshape(-1)])

        def align_fn(x: torch.Tensor) -> torch.Tensor:
            p3d, p2d = torch.split(x, [gt_p3d.numel(), gt_p2d.numel()])
            return loss_align(p3d.reshape(gt_p3d.shape), p2d.reshape(gt_p2d.shape), gt_p3d, gt_p2d)

        worst["align"] = max(worst["align"], check_tensor_gradient(align_fn, packed_a, n_coords, generator))

        pred_v = gt_full + 0.01 * torch.randn(gt_full.shape, generator=generator, dtype=torch.float64)

        def smooth_fn(x: torch.Tensor) -> torch.Tensor:
            return loss_smooth(x, gt_full, template)

        worst["smooth"] = max(worst["smooth"], check_tensor_gradient(smooth_fn, pred_v, n_coords, generator))

    return [GradcheckTerm(name, err, n_points * n_coords, LOSS_TOLERANCE) for name, err in worst.items()]


def _model_term(config: TrainConfig, n_params: int, generator: torch.Generator) -> GradcheckTerm:
    """Sum-of-squares objective on the model outputs against a sample of its parameters."""
    check_config = config.with_overrides(dropout=0.0, mask_fraction_max=0.0)
    model = MeshTranslator(check_config).double().eval()
    images = torch.rand(1, config.n_views, config.image_size, config.image_size,
                        config.image_channels, generator=generator, dtype=torch.float64)
    view_ids = torch.arange(config.n_views)[None]
    rotations = torch.eye(3, dtype=torch.float64).expand(1, config.n_views, 3, 3)

    def objective() -> torch.Tensor:
        pred = model(images, view_ids, rotations)
        return ((pred.body.v_full ** 2).sum() + (pred.body.joints ** 2).sum()
                + (pred.inter.p2d / config.image_size).pow(2).sum())

    model.zero_grad()
    objective().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_params):
            which = int(torch.multinomial(sizes, 1, generator=generator))
            p = params[which]
            i = int(torch.randint(p.numel(), (1,), generator=generator))
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
            original = float(p.reshape(-1)[i])
            p.view(-1)[i] = original + STEP
            f_plus = float(objective())
            p.view(-1)[i] = original - STEP
            f_minus = float(objective())
            p.view(-1)[i] = original
            worst = max(worst, relative_error(analytic, (f_plus - f_minus) / (2 * STEP)))
    return GradcheckTerm("end_to_end", worst, n_params, MODEL_TOLERANCE)


def run_gradcheck(config: TrainConfig, seed: Optional[int] = None, n_points: int = 20,
                  n_coords: int = 3, n_params: int = 20) -> GradcheckReport:
    """Check every loss term at `n_points` random points and the model on `n_params` parameters."""
    generator = torch.Generator().manual_seed(config.seed if seed is None else seed)
    torch.manual_seed(config.seed if seed is None else seed)
    template = template_for(config.m_full, config.m_sub1, config.m_sub2)
    report = GradcheckReport(_loss_terms(template, config.n_views, n_points, n_coords, generator))
    report.terms.append(_model_term(config, n_params, generator))
    for term in report.terms:
        log = logger.info if term.passed else logger.error
        log(f"gradcheck {term.name}: max relative error {term.max_rel_error:.3e}")
    return report
