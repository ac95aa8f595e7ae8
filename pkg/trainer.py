"""
Training, evaluation, ablation and export for the mesh translator.

A run trains from a fixed seed on a dataset file, writes a line-delimited JSON
metrics log and a binary checkpoint into an output directory, and evaluates
the master-view prediction on held-out samples after every epoch.
"""

import json
import logging
import os
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset

from config import TrainConfig, learning_rate_at
from dataset_io import DatasetReader
from errors import (ConfigError, DatasetFormatError, NonFinite, SampleOutOfRange,
                    ShapeMismatch)
from fusion_transformer import output_level_fusion_targets
from geometry import project, rotate_points
from losses_metrics import (LossReport, LossWeights, joint_terms, loss_align, loss_joint,
                            loss_smooth, loss_vertex, mpjpe, mpve, normalize_pixels, pa_mpjpe,
                            total_loss)
from mesh import MeshTemplate, PosedBody, regress_joints, template_for, write_obj
from metrics_report import MetricsReporter
from model import (MASTER_VIEW_ID, MeshTranslator, Prediction, canonical_view_order,
                   load_flat_parameters, parameter_offsets, take_views)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMTC"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sII")
CHECKPOINT_NAME = "checkpoint.mmtc"
METRICS_NAME = "metrics.jsonl"
MILLIMETERS = 1000.0

ABLATION_AXES = {
    "views": ["1", "2", "3", "4"],
    "fusion": ["mmt", "conv1x1", "strategyA", "strategyB"],
    "alignment": ["off", "3d", "3d2d", "3d2d+template"],
    "smooth": ["false", "true"],
}


def seed_everything(seed: int, num_threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(num_threads)


class MultiViewDataset(Dataset):
    """Samples of a dataset file restricted to its first `n_views` views."""

    def __init__(self, reader: DatasetReader, indices: Sequence[int], n_views: int):
        if n_views > reader.header.n_views:
            raise ShapeMismatch(f"Requested {n_views} views, dataset has {reader.header.n_views}")
        rig = reader.rig()
        if rig.master != 0 or rig.views[0].view_id != MASTER_VIEW_ID:
            raise ConfigError(f"Training expects the master camera at view {MASTER_VIEW_ID}")
        rig = rig.subset(n_views)
        self.reader = reader
        self.indices = list(indices)
        self.n_views = n_views
        self.rotations = torch.as_tensor(rig.rotations(), dtype=torch.float32)
        self.view_ids = torch.tensor([v.view_id for v in rig.views], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        index = self.indices[i]
        arrays = self.reader.arrays(index)
        k = self.n_views
        item = {name: torch.from_numpy(np.ascontiguousarray(a[:k])) for name, a in arrays.items()}
        item.update(index=torch.tensor(index), view_ids=self.view_ids.clone(),
                    rotations=self.rotations.clone())
        return item


def split_indices(n_samples: int, holdout_fraction: float) -> Tuple[List[int], List[int]]:
    """The last floor(fraction * n) samples are held out; at least one sample trains."""
    held = min(int(np.floor(holdout_fraction * n_samples)), n_samples - 1)
    cut = n_samples - held
    return list(range(cut)), list(range(cut, n_samples))


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
                            weight_decay=config.weight_decay)


def _ordered_targets(batch: Dict[str, torch.Tensor], image_size: int):
    order = canonical_view_order(batch["view_ids"])
    gt3d = take_views(batch["gt_joints3d"], order)
    gt2d = normalize_pixels(take_views(batch["gt_joints2d"], order), image_size)
    gtv = take_views(batch["gt_vertices"], order)
    return gt3d, gt2d, gtv


def compute_losses(pred: Prediction, batch: Dict[str, torch.Tensor], template: MeshTemplate,
                   config: TrainConfig, weights: Optional[LossWeights] = None) -> LossReport:
    """All loss terms for one batch, in master-view (or, for strategy B, every-view) frames."""
    weights = weights or LossWeights.from_config(config)
    gt3d, gt2d, gtv = _ordered_targets(batch, config.image_size)
    m = pred.master_slot
    body = pred.body
    inter = pred.inter
    regressed = regress_joints(body.v_full, template.joint_regressor)

    if config.fusion_variant == "strategyB":
        rot = pred.rotations
        posed = output_level_fusion_targets(PosedBody(body.v_full, body.joints), rot)
        v_full, direct3d = posed.vertices, posed.joints
        v_sub1 = rotate_points(rot, body.v_sub1[:, None])
        v_sub2 = rotate_points(rot, body.v_sub2[:, None])
        reg3d = rotate_points(rot, regressed[:, None])
        direct2d = project(inter.intrinsics, rot, body.joints[:, None])
        reg2d = project(inter.intrinsics, rot, regressed[:, None])
        target3d, target2d, target_v = gt3d, gt2d, gtv
    else:
        identity = torch.eye(3, dtype=body.joints.dtype, device=body.joints.device)
        cam = pred.master_camera
        v_full, v_sub1, v_sub2 = body.v_full, body.v_sub1, body.v_sub2
        direct3d, reg3d = body.joints, regressed
        direct2d = project(cam, identity, body.joints)
        reg2d = project(cam, identity, regressed)
        target3d, target2d, target_v = gt3d[:, m], gt2d[:, m], gtv[:, m]
    direct2d = normalize_pixels(direct2d, config.image_size)
    reg2d = normalize_pixels(reg2d, config.image_size)

    breakdown = joint_terms(direct3d, reg3d, direct2d, reg2d, target3d, target2d)
    parts = {
        "joint": loss_joint(direct3d, reg3d, direct2d, reg2d, target3d, target2d, weights),
        "vertex": loss_vertex(v_full, v_sub1, v_sub2, target_v, template, weights),
    }
    zero = body.v_full.new_zeros(())
    if config.alignment == "off":
        parts["align"] = zero
    elif config.fusion_variant == "strategyA":
        master = slice(m, m + 1)
        parts["align"] = loss_align(inter.p3d[:, master], inter.p2d[:, master], gt3d[:, master],
                                    gt2d[:, master], use_2d=False)
    else:
        parts["align"] = loss_align(inter.p3d, normalize_pixels(inter.p2d, config.image_size),
                                    gt3d, gt2d, use_2d=config.alignment == "3d2d")
    parts["smooth"] = loss_smooth(body.v_full, gtv[:, m], template) if weights.mu > 0 else zero
    return total_loss(parts, weights, breakdown)


@dataclass(eq=False)
class Checkpoint:
    """Model parameters, Adam moments and RNG state with a config snapshot."""

    config: TrainConfig
    params: np.ndarray
    offsets: Dict[str, Tuple[int, Tuple[int, ...]]]
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int
    epoch: int
    rng_state: np.ndarray
    dataset: str = ""
    version: int = CHECKPOINT_VERSION

    def _arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [
            ("params", np.asarray(self.params, dtype="<f4")),
            ("exp_avg", np.asarray(self.exp_avg, dtype="<f4")),
            ("exp_avg_sq", np.asarray(self.exp_avg_sq, dtype="<f4")),
            ("rng_state", np.asarray(self.rng_state, dtype=np.uint8)),
        ]

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        header = {
            "version": self.version,
            "config": self.config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "dataset": self.dataset,
            "offsets": {name: [off, list(shape)] for name, (off, shape) in self.offsets.items()},
            "arrays": [[name, a.dtype.str, int(a.size)] for name, a in arrays],
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        prefix = _CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, self.version, len(header_bytes))
        return prefix + header_bytes + b"".join(a.tobytes() for _, a in arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _CHECKPOINT_PREFIX.size:
            raise DatasetFormatError("Checkpoint too short")
        magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(data)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise DatasetFormatError(f"Not a version-{CHECKPOINT_VERSION} checkpoint")
        start = _CHECKPOINT_PREFIX.size
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        offset = start + header_len
        arrays = {}
        for name, dtype, size in header["arrays"]:
            dt = np.dtype(dtype)
            arrays[name] = np.frombuffer(data, dtype=dt, count=size, offset=offset).copy()
            offset += size * dt.itemsize
        if offset != len(data):
            raise DatasetFormatError(f"Checkpoint has {len(data) - offset} trailing bytes")
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            params=arrays["params"],
            offsets={k: (v[0], tuple(v[1])) for k, v in header["offsets"].items()},
            exp_avg=arrays["exp_avg"],
            exp_avg_sq=arrays["exp_avg_sq"],
            step=int(header["step"]),
            epoch=int(header["epoch"]),
            rng_state=arrays["rng_state"],
            dataset=header["dataset"],
            version=int(header["version"]),
        )


def capture_checkpoint(model: MeshTranslator, optimizer: torch.optim.Adam, epoch: int,
                       dataset: str = "") -> Checkpoint:
    params = list(model.parameters())
    flat = torch.cat([p.detach().reshape(-1) for p in params]).float().numpy()
    if not np.isfinite(flat).all():
        raise NonFinite(f"Parameters became non-finite by epoch {epoch}; checkpoint not captured")
    first, second, step = [], [], 0
    for p in params:
        state = optimizer.state.get(p, {})
        first.append(state.get("exp_avg", torch.zeros_like(p)).detach().reshape(-1))
        second.append(state.get("exp_avg_sq", torch.zeros_like(p)).detach().reshape(-1))
        if "step" in state:
            step = max(step, int(state["step"]))
    return Checkpoint(
        config=model.config,
        params=flat.copy(),
        offsets=parameter_offsets(model),
        exp_avg=torch.cat(first).float().numpy().copy(),
        exp_avg_sq=torch.cat(second).float().numpy().copy(),
        step=step,
        epoch=epoch,
        rng_state=torch.get_rng_state().numpy().copy(),
        dataset=dataset,
    )


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write via a temporary file so an interrupted save never clobbers the previous one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} (epoch {checkpoint.epoch}, step {checkpoint.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def restore(checkpoint: Checkpoint,
            restore_rng: bool = False) -> Tuple[MeshTranslator, torch.optim.Adam]:
    """Rebuild the model and optimizer a checkpoint was captured from."""
    config = checkpoint.config
    model = MeshTranslator(config)
    if parameter_offsets(model) != checkpoint.offsets:
        raise ShapeMismatch("Checkpoint parameter layout does not match the model")
    load_flat_parameters(model, torch.from_numpy(checkpoint.params.copy()))
    optimizer = make_optimizer(model, config)
    if checkpoint.step > 0:
        for name, p in model.named_parameters():
            offset, shape = checkpoint.offsets[name]
            window = slice(offset, offset + int(np.prod(shape)))
            optimizer.state[p] = {
                "step": torch.tensor(float(checkpoint.step)),
                "exp_avg": torch.from_numpy(checkpoint.exp_avg[window].copy()).reshape(shape),
                "exp_avg_sq": torch.from_numpy(checkpoint.exp_avg_sq[window].copy()).reshape(shape),
            }
    if restore_rng:
        torch.set_rng_state(torch.from_numpy(checkpoint.rng_state.copy()))
    return model, optimizer


@torch.no_grad()
def predict(model: MeshTranslator, dataset: MultiViewDataset,
            batch_size: int = 8) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Master-frame (joints, full vertices) per sample index, in float64."""
    model.eval()
    out = {}
    for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        pred = model(batch["images"], batch["view_ids"], batch["rotations"])
        joints = pred.body.joints.double().numpy()
        vertices = pred.body.v_full.double().numpy()
        for row, index in enumerate(batch["index"].tolist()):
            out[index] = (joints[row], vertices[row])
    return out


def evaluate_predictions(predictions: Dict[int, Tuple[np.ndarray, np.ndarray]],
                         reader: DatasetReader, template: MeshTemplate,
                         rotations: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Per-sample MPJPE, PA-MPJPE, MPVE (x1000) and smooth-loss value.

    With `rotations` (N, 3, 3) the metrics are averaged over the N views, each
    prediction rotated into the view and compared with that view's ground truth.
    """
    rows = []
    for index in sorted(predictions):
        joints, vertices = predictions[index]
        arrays = reader.arrays(index)
        views = [(np.eye(3), 0)] if rotations is None else [(r, i) for i, r in enumerate(rotations)]
        scores = defaultdict(list)
        for rotation, view in views:
            gt_j = arrays["gt_joints3d"][view].astype(np.float64)
            gt_v = arrays["gt_vertices"][view].astype(np.float64)
            pj = rotate_points(np.asarray(rotation, dtype=np.float64), joints)
            pv = rotate_points(np.asarray(rotation, dtype=np.float64), vertices)
            scores["mpjpe"].append(mpjpe(pj, gt_j) * MILLIMETERS)
            scores["pa_mpjpe"].append(pa_mpjpe(pj, gt_j) * MILLIMETERS)
            scores["mpve"].append(mpve(pv, gt_v) * MILLIMETERS)
        gt_master = torch.from_numpy(arrays["gt_vertices"][0].astype(np.float64))
        smooth = float(loss_smooth(torch.from_numpy(vertices), gt_master, template))
        rows.append({"sample": index, **{k: float(np.mean(v)) for k, v in scores.items()},
                     "smooth": smooth})
    return MetricsReporter().evaluation_table(rows)


def evaluate_model(model: MeshTranslator, dataset: MultiViewDataset,
                   all_views: bool = False) -> pd.DataFrame:
    predictions = predict(model, dataset, model.config.batch_size)
    rotations = dataset.rotations.double().numpy() if all_views else None
    return evaluate_predictions(predictions, dataset.reader, model.template, rotations)


def evaluate(checkpoint_path: Union[str, Path], dataset_path: Union[str, Path],
             n_views: Optional[int] = None,
             indices: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Evaluate a checkpoint on a dataset (all samples unless `indices` is given)."""
    checkpoint = load_checkpoint(checkpoint_path)
    config = checkpoint.config
    n_views = config.n_views if n_views is None else n_views
    if n_views != config.n_views:
        raise ShapeMismatch(f"Checkpoint was trained with {config.n_views} views, got {n_views}")
    seed_everything(config.seed, config.num_threads)
    model, _ = restore(checkpoint)
    reader = DatasetReader(dataset_path)
    indices = range(len(reader)) if indices is None else indices
    table = evaluate_model(model, MultiViewDataset(reader, indices, n_views), config.eval_all_views)
    logger.info(f"Evaluated {len(table)} samples: " + ", ".join(
        f"{k}={v:.3f}" for k, v in MetricsReporter().means(table).items()))
    return table


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_log: Path
    epochs: int
    steps: int
    final_loss: float
    test_metrics: Optional[pd.DataFrame] = None


class Trainer:
    """One deterministic training run."""

    def __init__(self, config: TrainConfig, dataset_path: Union[str, Path],
                 out_dir: Union[str, Path], test_data: Optional[Union[str, Path]] = None):
        self.config = config
        self.dataset_path = Path(dataset_path)
        self.out_dir = Path(out_dir)
        self.test_data = Path(test_data) if test_data is not None else None
        self.checkpoint_path = self.out_dir / CHECKPOINT_NAME
        self.metrics_path = self.out_dir / METRICS_NAME

    def _datasets(self) -> Tuple[MultiViewDataset, Optional[MultiViewDataset]]:
        reader = DatasetReader(self.dataset_path)
        n = self.config.n_views
        if self.test_data is not None:
            test_reader = DatasetReader(self.test_data)
            return (MultiViewDataset(reader, range(len(reader)), n),
                    MultiViewDataset(test_reader, range(len(test_reader)), n))
        train_idx, test_idx = split_indices(len(reader), self.config.holdout_fraction)
        test = MultiViewDataset(reader, test_idx, n) if test_idx else None
        return MultiViewDataset(reader, train_idx, n), test

    def _log_record(self, record: Dict[str, float]) -> None:
        with open(self.metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self) -> TrainResult:
        config = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        seed_everything(config.seed, config.num_threads)
        train_set, test_set = self._datasets()
        logger.info(f"Training on {len(train_set)} samples "
                    f"({len(test_set) if test_set else 0} held out), {config.n_views} views, "
                    f"fusion={config.fusion_variant}, alignment={config.alignment}")

        template = template_for(config.m_full, config.m_sub1, config.m_sub2)
        model = MeshTranslator(config, template)
        optimizer = make_optimizer(model, config)
        weights = LossWeights.from_config(config)
        loader = DataLoader(train_set, batch_size=config.batch_size, shuffle=True,
                            generator=torch.Generator().manual_seed(config.seed))

        self.metrics_path.write_text("", encoding="utf-8")
        save_checkpoint(self.checkpoint_path,
                        capture_checkpoint(model, optimizer, 0, str(self.dataset_path)))

        steps = 0
        final_loss = float("nan")
        test_table = None
        for epoch in range(config.epochs):
            lr = learning_rate_at(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            totals: Dict[str, float] = defaultdict(float)
            batches = 0
            for batch in loader:
                optimizer.zero_grad()
                pred = model(batch["images"], batch["view_ids"], batch["rotations"])
                try:
                    report = compute_losses(pred, batch, template, config, weights)
                except Exception as e:
                    logger.error(f"Epoch {epoch + 1}, step {steps + 1}: {e}; "
                                 f"last good checkpoint is {self.checkpoint_path}")
                    raise
                report.total.backward()
                optimizer.step()
                steps += 1
                batches += 1
                for key, value in report.as_dict().items():
                    totals[key] += value
                logger.debug(f"step {steps}: loss={report.as_dict()['loss']:.6f}")

            record = {key: value / batches for key, value in totals.items()}
            record.update(epoch=epoch + 1, lr=lr, steps=steps)
            final_loss = record["loss"]
            if test_set is not None:
                test_table = evaluate_model(model, test_set, config.eval_all_views)
                record.update({f"test_{k}": v for k, v in MetricsReporter().means(test_table).items()})
            self._log_record(record)
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: loss={final_loss:.6f} lr={lr:g}")

            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                try:
                    checkpoint = capture_checkpoint(model, optimizer, epoch + 1,
                                                    str(self.dataset_path))
                except NonFinite as e:
                    logger.error(f"{e}; last good checkpoint is {self.checkpoint_path}")
                    raise
                save_checkpoint(self.checkpoint_path, checkpoint)

        return TrainResult(self.checkpoint_path, self.metrics_path, config.epochs, steps,
                           final_loss, test_table)


def train(config: TrainConfig, dataset: Union[str, Path], out_dir: Union[str, Path],
          test_data: Optional[Union[str, Path]] = None) -> TrainResult:
    return Trainer(config, dataset, out_dir, test_data).run()


def ablation_config(config: TrainConfig, axis: str, setting: str) -> TrainConfig:
    if axis == "views":
        return config.with_overrides(n_views=int(setting))
    if axis == "fusion":
        return config.with_overrides(fusion_variant=setting)
    if axis == "alignment":
        if setting == "3d2d+template":
            return config.with_overrides(alignment="3d2d", template_replacement=True)
        return config.with_overrides(alignment=setting, template_replacement=False)
    if axis == "smooth":
        return config.with_overrides(smooth_loss=setting)
    raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")


def ablate(config: TrainConfig, dataset: Union[str, Path], axis: str,
           out_dir: Union[str, Path], test_data: Optional[Union[str, Path]] = None,
           settings: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Train one model per setting of `axis` from the same seed and tabulate test metrics."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    header = DatasetReader(dataset).header
    if axis == "views" and header.n_views < 4:
        raise ShapeMismatch(f"The views ablation needs 4 views, dataset has {header.n_views}")
    reporter = MetricsReporter()
    rows = []
    for setting in settings or ABLATION_AXES[axis]:
        run_config = ablation_config(config, axis, setting)
        run_dir = Path(out_dir) / axis / setting.replace("+", "_")
        logger.info(f"Ablation {axis}={setting}: training into {run_dir}")
        result = train(run_config, dataset, run_dir, test_data)
        if result.test_metrics is None:
            raise ShapeMismatch("Ablation needs held-out samples; set holdout_fraction or --test-data")
        rows.append({"setting": setting, **reporter.means(result.test_metrics)})
    return reporter.ablation_table(axis, rows)


def export_obj(checkpoint_path: Union[str, Path], dataset_path: Union[str, Path], index: int,
               out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the predicted and ground-truth master-view meshes of one sample."""
    reader = DatasetReader(dataset_path)
    if not 0 <= index < len(reader):
        raise SampleOutOfRange(f"Sample {index} outside [0, {len(reader)})")
    checkpoint = load_checkpoint(checkpoint_path)
    config = checkpoint.config
    seed_everything(config.seed, config.num_threads)
    model, _ = restore(checkpoint)
    predictions = predict(model, MultiViewDataset(reader, [index], config.n_views))
    _, vertices = predictions[index]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / f"sample_{index:05d}_pred.obj"
    gt_path = out_dir / f"sample_{index:05d}_gt.obj"
    write_obj(pred_path, vertices, model.template.faces)
    write_obj(gt_path, reader.arrays(index)["gt_vertices"][0], model.template.faces)
    return pred_path, gt_path
