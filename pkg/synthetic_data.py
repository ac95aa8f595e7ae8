"""
Procedural multi-view dataset of the articulated template body.

A sample is one random pose, skinned onto the template with fixed linear-blend
weights, expressed in the master camera frame, rotated into every rig view and
rendered there as a silhouette + nearest-depth raster. Everything is a pure
function of (GeneratorConfig, seed, sample index).
"""

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from config import GeneratorConfig
from dataset_io import DatasetWriter, sidecar_path
from errors import ConfigError, OutOfFrame
from geometry import CameraRig, CameraView, axis_angle_to_matrix, project, rotate_points
from mesh import (JOINT_NAMES, KINEMATIC_ORDER, NODE_NAMES, NODE_PARENTS, REST_NODES, SEGMENTS,
                  MeshTemplate, PosedBody, regress_joints, template_for)

logger = logging.getLogger(__name__)

DEFAULT_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)

# Per-node axis-angle limits (radians) at pose_amplitude = 1, as (low xyz, high xyz).
JOINT_LIMITS: Dict[str, Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = {
    "r_hip": ((-0.5, -0.3, -0.4), (0.9, 0.3, 0.4)),
    "l_hip": ((-0.5, -0.3, -0.4), (0.9, 0.3, 0.4)),
    "r_knee": ((-1.3, 0.0, 0.0), (0.0, 0.0, 0.0)),
    "l_knee": ((-1.3, 0.0, 0.0), (0.0, 0.0, 0.0)),
    "neck": ((-0.2, -0.4, -0.2), (0.2, 0.4, 0.2)),
    "r_shoulder": ((-0.8, -0.6, -1.0), (0.8, 0.6, 1.0)),
    "l_shoulder": ((-0.8, -0.6, -1.0), (0.8, 0.6, 1.0)),
    "r_elbow": ((0.0, -1.2, 0.0), (0.0, 1.2, 0.0)),
    "l_elbow": ((0.0, -1.2, 0.0), (0.0, 1.2, 0.0)),
}
ROOT_TILT_LIMIT = 0.15
JITTER_RANGE = 0.1
# Weight of the parent segment's transform on the first rings of a child segment.
PARENT_BLEND = (0.5, 0.15)


@dataclass(frozen=True, eq=False)
class PoseParams:
    node_rotations: np.ndarray
    root_orientation: np.ndarray
    bone_scale: np.ndarray

    @classmethod
    def rest(cls) -> "PoseParams":
        n = len(NODE_NAMES)
        return cls(np.zeros((n, 3)), np.zeros(3), np.ones(n))


@dataclass(frozen=True, eq=False)
class MultiViewSample:
    images: np.ndarray
    gt_joints3d: np.ndarray
    gt_joints2d: np.ndarray
    gt_vertices: np.ndarray


@dataclass(frozen=True, eq=False)
class RenderedView:
    raster: np.ndarray
    out_of_frame_fraction: float

    @property
    def out_of_frame(self) -> bool:
        return self.out_of_frame_fraction > 0.1


def joint_limits(config: GeneratorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(low, high) arrays of shape (nodes, 3) scaled by the pose amplitude."""
    low = np.zeros((len(NODE_NAMES), 3))
    high = np.zeros((len(NODE_NAMES), 3))
    for name, (lo, hi) in JOINT_LIMITS.items():
        idx = NODE_NAMES.index(name)
        low[idx] = lo
        high[idx] = hi
    return low * config.pose_amplitude, high * config.pose_amplitude


def sample_pose(seed: int, config: GeneratorConfig) -> PoseParams:
    rng = np.random.default_rng(seed)
    low, high = joint_limits(config)
    rotations = rng.uniform(low, high)
    amp = config.pose_amplitude
    yaw = config.root_yaw_limit * amp
    tilt = ROOT_TILT_LIMIT * amp
    root = rng.uniform((-tilt, -yaw, -tilt), (tilt, yaw, tilt))
    jitter = JITTER_RANGE * min(amp, 1.0)
    scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=len(NODE_NAMES))
    scale[0] = 1.0
    return PoseParams(rotations, root, scale)


def forward_kinematics(params: PoseParams) -> Tuple[np.ndarray, np.ndarray]:
    """Global rotations (nodes, 3, 3) and positions (nodes, 3) of the skeleton."""
    n = len(NODE_NAMES)
    rotations = np.zeros((n, 3, 3))
    positions = np.zeros((n, 3))
    for name in KINEMATIC_ORDER:
        i = NODE_NAMES.index(name)
        local = axis_angle_to_matrix(params.node_rotations[i])
        parent = NODE_PARENTS[name]
        if parent is None:
            rotations[i] = axis_angle_to_matrix(params.root_orientation) @ local
            positions[i] = REST_NODES[name]
            continue
        p = NODE_NAMES.index(parent)
        offset = np.subtract(REST_NODES[name], REST_NODES[parent])
        rotations[i] = rotations[p] @ local
        positions[i] = positions[p] + rotations[p] @ (params.bone_scale[i] * offset)
    return rotations, positions


def _segment_transforms(params: PoseParams, rotations: np.ndarray,
                        positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-segment affine maps v -> A v + b taking rest vertices to posed ones."""
    linear = np.zeros((len(SEGMENTS), 3, 3))
    offset = np.zeros((len(SEGMENTS), 3))
    for s, (start, end, _) in enumerate(SEGMENTS):
        a = NODE_NAMES.index(start)
        b = NODE_NAMES.index(end)
        axis = np.subtract(REST_NODES[end], REST_NODES[start])
        axis = axis / np.linalg.norm(axis)
        stretch = np.eye(3) + (params.bone_scale[b] - 1.0) * np.outer(axis, axis)
        linear[s] = rotations[a] @ stretch
        offset[s] = positions[a] - linear[s] @ np.asarray(REST_NODES[start])
    return linear, offset


def _parent_segments() -> np.ndarray:
    ends = {end: s for s, (_, end, _) in enumerate(SEGMENTS)}
    return np.array([ends.get(start, -1) for start, _, _ in SEGMENTS])


def pose_body(params: PoseParams, template: MeshTemplate) -> PosedBody:
    """Skin the template with fixed blend weights; joints come from the regressor."""
    rotations, positions = forward_kinematics(params)
    linear, offset = _segment_transforms(params, rotations, positions)
    seg = template.vertex_segment
    parent = _parent_segments()[seg]
    blend = np.zeros(template.m_full)
    for ring, w in enumerate(PARENT_BLEND):
        blend[(template.vertex_ring == ring) & (parent >= 0)] = w

    v = template.v_tpose
    own = np.einsum("nij,nj->ni", linear[seg], v) + offset[seg]
    par_idx = np.where(parent >= 0, parent, seg)
    inherited = np.einsum("nij,nj->ni", linear[par_idx], v) + offset[par_idx]
    vertices = (1.0 - blend)[:, None] * own + blend[:, None] * inherited
    return PosedBody(vertices=vertices, joints=regress_joints(vertices, template.joint_regressor))


def skeleton_joints(params: PoseParams) -> np.ndarray:
    """Forward-kinematics joint positions in JOINT_NAMES order."""
    _, positions = forward_kinematics(params)
    return np.stack([positions[NODE_NAMES.index(name)] for name in JOINT_NAMES])


def master_from_world(config: GeneratorConfig) -> np.ndarray:
    """Rotation taking body (world) coordinates into the master camera frame."""
    azimuth = DEFAULT_AZIMUTHS[config.master % len(DEFAULT_AZIMUTHS)]
    return (axis_angle_to_matrix(np.array([math.radians(config.elevation_deg), 0.0, 0.0]))
            @ axis_angle_to_matrix(np.array([0.0, math.radians(azimuth), 0.0])))


def default_rig(config: GeneratorConfig) -> CameraRig:
    """Cameras every 90 degrees of azimuth (first n_views of them), tilted by the elevation."""
    if config.n_views > len(DEFAULT_AZIMUTHS):
        raise ConfigError(f"The default rig has at most {len(DEFAULT_AZIMUTHS)} views")
    return CameraRig.ring(DEFAULT_AZIMUTHS[:config.n_views], config.elevation_deg,
                          config.camera_scale, config.image_size, config.master)


def render_view(view: CameraView, body: PosedBody, config: GeneratorConfig) -> RenderedView:
    """Z-buffered splat of the body's vertices as seen by `view`.

    Channel 0 is the silhouette, channel 1 (when present) the nearest depth
    mapped to (0, 1] with nearer points brighter.
    """
    size = config.image_size
    depth = np.zeros(size * size)
    vertices = np.asarray(body.vertices, dtype=np.float64).reshape(-1, 3)
    fraction = 0.0
    if len(vertices):
        uv = project(view.intrinsics, view.rotation, vertices)
        z = rotate_points(view.rotation, vertices)[:, 2]
        value = np.clip(0.5 - z / (2.0 * config.depth_extent), 1e-3, 1.0)
        col = np.floor(uv[:, 0]).astype(np.int64)
        row = np.floor(uv[:, 1]).astype(np.int64)
        inside = (col >= 0) & (col < size) & (row >= 0) & (row < size)
        fraction = 1.0 - float(inside.mean())

        r = config.splat_radius
        dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        rows = (row[:, None] + dy.ravel()[None, :]).ravel()
        cols = (col[:, None] + dx.ravel()[None, :]).ravel()
        values = np.repeat(value, dy.size)
        ok = (cols >= 0) & (cols < size) & (rows >= 0) & (rows < size)
        np.maximum.at(depth, rows[ok] * size + cols[ok], values[ok])

    depth = depth.reshape(size, size)
    raster = np.zeros((size, size, config.image_channels), dtype=np.float32)
    raster[..., 0] = depth > 0
    if config.image_channels > 1:
        raster[..., 1] = depth
    rendered = RenderedView(raster, fraction)
    if rendered.out_of_frame:
        warnings.warn(f"View {view.view_id}: {fraction:.1%} of vertices project outside the image",
                      OutOfFrame)
    return rendered


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_sample(index: int, seed: int, rig: CameraRig, template: MeshTemplate,
                    config: GeneratorConfig) -> MultiViewSample:
    params = sample_pose(sample_seed(seed, index), config)
    body = pose_body(params, template)
    to_master = master_from_world(config)
    master = PosedBody(rotate_points(to_master, body.vertices), rotate_points(to_master, body.joints))

    images, joints3d, joints2d, verts = [], [], [], []
    for view in rig.views:
        view_body = PosedBody(rotate_points(view.rotation, master.vertices),
                              rotate_points(view.rotation, master.joints))
        images.append(render_view(view, master, config).raster)
        joints3d.append(view_body.joints)
        joints2d.append(project(view.intrinsics, view.rotation, master.joints))
        verts.append(view_body.vertices)
    return MultiViewSample(np.stack(images), np.stack(joints3d), np.stack(joints2d), np.stack(verts))


def make_dataset(n_samples: int, rig: CameraRig, seed: int, out: Union[str, Path],
                 config: GeneratorConfig) -> Path:
    """Generate `n_samples` records into `out` plus the `<out>.rig.json` sidecar."""
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    template = template_for(config.m_full, config.m_sub1, config.m_sub2, config.rings_per_segment)
    out = Path(out)
    logger.info(f"Generating {n_samples} samples with seed {seed} into {out}")

    def build(i: int) -> MultiViewSample:
        return generate_sample(i, seed, rig, template, config)

    with DatasetWriter(out, n_samples, rig.n_views, template.num_joints, template.m_full,
                       config.image_size, config.image_size, config.image_channels) as writer:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for sample in pool.map(build, range(n_samples)):
                writer.write_sample(sample)

    sidecar = {"seed": seed, "generator": config.to_dict(), "rig": rig.to_dict()}
    sidecar_path(out).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote dataset {out} ({out.stat().st_size:,} bytes)")
    return out
