"""
Body mesh template and topology operations.

The template is a procedurally built capsule-limb humanoid: ten skinned
segments (thighs, shins, torso, upper arms, forearms, head), each a stack of
vertex rings between two skeleton joints. Every one of the 14 joints sits at
the center of some segment's end ring, so the joint regressor is a uniform
average over that ring and reproduces the joint exactly.

Coarse-to-fine upsampling uses fixed matrices. Each finer vertex is an affine
combination (weights sum to 1) of its nearest coarser vertices, solved so the
rest pose is reproduced exactly and any local affine motion is carried over.

Operations accept numpy arrays or torch tensors with leading batch dimensions.
"""

import functools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch

from errors import ConfigError, DegenerateFace, ShapeMismatch

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head_top",
)

# Kinematic tree: node 0 is a virtual pelvis root, node j + 1 is joint j.
NODE_NAMES = ("pelvis",) + JOINT_NAMES
NODE_PARENTS = {
    "pelvis": None,
    "r_hip": "pelvis", "r_knee": "r_hip", "r_ankle": "r_knee",
    "l_hip": "pelvis", "l_knee": "l_hip", "l_ankle": "l_knee",
    "neck": "pelvis",
    "r_shoulder": "neck", "r_elbow": "r_shoulder", "r_wrist": "r_elbow",
    "l_shoulder": "neck", "l_elbow": "l_shoulder", "l_wrist": "l_elbow",
    "head_top": "neck",
}


def _kinematic_order() -> Tuple[str, ...]:
    order: List[str] = []
    pending = list(NODE_PARENTS)
    while pending:
        ready = [n for n in pending if NODE_PARENTS[n] is None or NODE_PARENTS[n] in order]
        order.extend(ready)
        pending = [n for n in pending if n not in ready]
    return tuple(order)


# Parents before children.
KINEMATIC_ORDER = _kinematic_order()

# Rest (T-pose) positions in length units, y pointing down.
REST_NODES = {
    "pelvis": (0.0, 0.0, 0.0),
    "r_hip": (-0.1, 0.0, 0.0), "r_knee": (-0.1, 0.42, 0.0), "r_ankle": (-0.1, 0.82, 0.0),
    "l_hip": (0.1, 0.0, 0.0), "l_knee": (0.1, 0.42, 0.0), "l_ankle": (0.1, 0.82, 0.0),
    "neck": (0.0, -0.5, 0.0),
    "r_shoulder": (-0.2, -0.48, 0.0), "r_elbow": (-0.46, -0.48, 0.0),
    "r_wrist": (-0.72, -0.48, 0.0),
    "l_shoulder": (0.2, -0.48, 0.0), "l_elbow": (0.46, -0.48, 0.0),
    "l_wrist": (0.72, -0.48, 0.0),
    "head_top": (0.0, -0.8, 0.0),
}

# (start node, end node, radius); a segment moves with its start node's frame.
SEGMENTS = (
    ("r_hip", "r_knee", 0.07), ("r_knee", "r_ankle", 0.055),
    ("l_hip", "l_knee", 0.07), ("l_knee", "l_ankle", 0.055),
    ("pelvis", "neck", 0.15),
    ("r_shoulder", "r_elbow", 0.05), ("r_elbow", "r_wrist", 0.04),
    ("l_shoulder", "l_elbow", 0.05), ("l_elbow", "l_wrist", 0.04),
    ("neck", "head_top", 0.1),
)


@dataclass(frozen=True, eq=False)
class MeshTemplate:
    v_tpose: np.ndarray
    j_tpose: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    joint_regressor: np.ndarray
    up1: np.ndarray
    up2: np.ndarray
    sub1_idx: np.ndarray
    sub2_idx: np.ndarray
    neighborhoods: Tuple[Tuple[int, ...], ...]
    neighbor_mean: np.ndarray
    vertex_segment: np.ndarray
    vertex_ring: np.ndarray
    rings_per_segment: int

    @property
    def m_full(self) -> int:
        return self.v_tpose.shape[0]

    @property
    def m_sub1(self) -> int:
        return len(self.sub1_idx)

    @property
    def m_sub2(self) -> int:
        return len(self.sub2_idx)

    @property
    def num_joints(self) -> int:
        return self.j_tpose.shape[0]

    def tensor(self, name: str, dtype: torch.dtype = torch.float32,
               device: Union[str, torch.device] = "cpu") -> torch.Tensor:
        return torch.as_tensor(np.array(getattr(self, name)), dtype=dtype, device=device)


@dataclass
class PosedBody:
    vertices: ArrayLike
    joints: ArrayLike

    def __post_init__(self):
        if self.vertices.shape[-1] != 3 or self.joints.shape[-1] != 3:
            raise ShapeMismatch("PosedBody coordinates must be 3D")


def _ring_basis(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, direction)
    u /= np.linalg.norm(u)
    w = np.cross(direction, u)
    return u, w


def _farthest_point_order(points: np.ndarray, count: int) -> np.ndarray:
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def _affine_upsampling(targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Rows of affine weights (sum 1) reproducing each target from nearby sources."""
    weights = np.zeros((len(targets), len(sources)))
    for i, p in enumerate(targets):
        dist = np.linalg.norm(sources - p, axis=1)
        order = np.argsort(dist, kind="stable")
        if dist[order[0]] < 1e-12:
            weights[i, order[0]] = 1.0
            continue
        for k in range(4, len(sources) + 1):
            nn = order[:k]
            a = np.vstack([sources[nn].T, np.ones(k)])
            sv = np.linalg.svd(a, compute_uv=False)
            if sv[-1] > 1e-3 * sv[0]:
                w, *_ = np.linalg.lstsq(a, np.append(p, 1.0), rcond=None)
                weights[i, nn] = w
                break
        else:
            raise ConfigError("Coarse subset is too degenerate to interpolate the template")
    return weights


def build_template(m_full: int = 400, m_sub1: int = 100, m_sub2: int = 25,
                   rings_per_segment: int = 5) -> MeshTemplate:
    """Construct the capsule-limb template and its fixed matrices."""
    n_seg = len(SEGMENTS)
    if rings_per_segment < 2:
        raise ConfigError("rings_per_segment must be at least 2")
    ring_size, rem = divmod(m_full, n_seg * rings_per_segment)
    if rem or ring_size < 3:
        raise ConfigError(
            f"m_full={m_full} must be {n_seg} * {rings_per_segment} * ring_size with ring_size >= 3"
        )
    if not 4 <= m_sub2 <= m_sub1 <= m_full:
        raise ConfigError("Expected 4 <= m_sub2 <= m_sub1 <= m_full")

    rest = {name: np.array(pos) for name, pos in REST_NODES.items()}
    vertices: List[np.ndarray] = []
    faces: List[Tuple[int, int, int]] = []
    segment_ids: List[int] = []
    ring_ids: List[int] = []
    end_rings: Dict[str, List[int]] = {}

    angles = 2.0 * math.pi * np.arange(ring_size) / ring_size
    for s, (start, end, radius) in enumerate(SEGMENTS):
        a, b = rest[start], rest[end]
        direction = (b - a) / np.linalg.norm(b - a)
        u, w = _ring_basis(direction)
        base = len(vertices)
        for r in range(rings_per_segment):
            t = r / (rings_per_segment - 1)
            center = a + t * (b - a)
            rad = radius * (0.6 + 0.4 * math.sin(math.pi * t))
            for theta in angles:
                vertices.append(center + rad * (math.cos(theta) * u + math.sin(theta) * w))
                segment_ids.append(s)
                ring_ids.append(r)
        for r in range(rings_per_segment - 1):
            for k in range(ring_size):
                k1 = (k + 1) % ring_size
                v00 = base + r * ring_size + k
                v01 = base + r * ring_size + k1
                v11 = base + (r + 1) * ring_size + k1
                v10 = base + (r + 1) * ring_size + k
                faces.append((v00, v01, v11))
                faces.append((v00, v11, v10))
        end_rings.setdefault(start, list(range(base, base + ring_size)))
        last = base + (rings_per_segment - 1) * ring_size
        end_rings.setdefault(end, list(range(last, last + ring_size)))

    v_tpose = np.array(vertices)
    faces_arr = np.array(faces, dtype=np.int64)
    j_tpose = np.array([rest[name] for name in JOINT_NAMES])

    regressor = np.zeros((len(JOINT_NAMES), m_full))
    for j, name in enumerate(JOINT_NAMES):
        ring = end_rings[name]
        regressor[j, ring] = 1.0 / len(ring)

    edges = unique_edges(faces_arr)
    adjacency: List[set] = [set() for _ in range(m_full)]
    for i, k in edges:
        adjacency[i].add(int(k))
        adjacency[k].add(int(i))
    neighborhoods = tuple(tuple(sorted(nbrs)) for nbrs in adjacency)
    neighbor_mean = np.zeros((m_full, m_full))
    for i, nbrs in enumerate(neighborhoods):
        neighbor_mean[i, list(nbrs)] = 1.0 / len(nbrs)

    order = _farthest_point_order(v_tpose, m_sub1)
    sub1_idx = np.sort(order)
    sub2_idx = np.sort(order[:m_sub2])
    up2 = _affine_upsampling(v_tpose[sub1_idx], v_tpose[sub2_idx])
    up1 = _affine_upsampling(v_tpose, v_tpose[sub1_idx])

    residual = np.abs(up1 @ (up2 @ v_tpose[sub2_idx]) - v_tpose).max()
    logger.debug(f"Template built: {m_full} vertices, {len(faces_arr)} faces, "
                 f"upsampling rest residual {residual:.2e}")

    arrays = dict(v_tpose=v_tpose, j_tpose=j_tpose, faces=faces_arr, edges=edges,
                  joint_regressor=regressor, up1=up1, up2=up2, sub1_idx=sub1_idx,
                  sub2_idx=sub2_idx, neighbor_mean=neighbor_mean,
                  vertex_segment=np.array(segment_ids, dtype=np.int64),
                  vertex_ring=np.array(ring_ids, dtype=np.int64))
    for value in arrays.values():
        value.setflags(write=False)
    return MeshTemplate(neighborhoods=neighborhoods, rings_per_segment=rings_per_segment,
                        **arrays)


@functools.lru_cache(maxsize=8)
def template_for(m_full: int = 400, m_sub1: int = 100, m_sub2: int = 25,
                 rings_per_segment: int = 5) -> MeshTemplate:
    """Cached build_template; templates are immutable so sharing is safe."""
    return build_template(m_full, m_sub1, m_sub2, rings_per_segment)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Undirected edges of a triangle list, sorted, each pair (low, high)."""
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _gather(vertices: ArrayLike, index: np.ndarray) -> ArrayLike:
    if isinstance(vertices, torch.Tensor):
        return vertices[..., torch.as_tensor(index, device=vertices.device), :]
    return vertices[..., index, :]


def _norm(x: ArrayLike) -> ArrayLike:
    if isinstance(x, torch.Tensor):
        return torch.linalg.norm(x, dim=-1)
    return np.linalg.norm(x, axis=-1)


def _apply(matrix: np.ndarray, x: ArrayLike) -> ArrayLike:
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(np.array(matrix), dtype=x.dtype, device=x.device) @ x
    return np.asarray(matrix, dtype=x.dtype) @ x


def face_normals(vertices: ArrayLike, faces: np.ndarray) -> ArrayLike:
    """Unit normals following the right-hand rule over each face's winding."""
    faces = np.asarray(faces)
    v0 = _gather(vertices, faces[:, 0])
    v1 = _gather(vertices, faces[:, 1])
    v2 = _gather(vertices, faces[:, 2])
    if isinstance(vertices, torch.Tensor):
        n = torch.linalg.cross(v1 - v0, v2 - v0, dim=-1)
    else:
        n = np.cross(v1 - v0, v2 - v0)
    length = _norm(n)
    if bool((length <= 1e-12).any()):
        raise DegenerateFace("Zero-area face; normal is undefined")
    return n / length[..., None]


def edge_lengths(vertices: ArrayLike, edges: np.ndarray) -> ArrayLike:
    edges = np.asarray(edges)
    return _norm(_gather(vertices, edges[:, 0]) - _gather(vertices, edges[:, 1]))


def regress_joints(vertices: ArrayLike, joint_regressor: np.ndarray) -> ArrayLike:
    """J = regressor . V for full-resolution vertices (..., M_full, 3)."""
    if vertices.shape[-2] != joint_regressor.shape[1]:
        raise ShapeMismatch(
            f"Regressor expects {joint_regressor.shape[1]} vertices, got {vertices.shape[-2]}"
        )
    return _apply(joint_regressor, vertices)


def upsample(v_sub2: ArrayLike, template: MeshTemplate) -> Tuple[ArrayLike, ArrayLike]:
    """Coarse (M_sub2) vertices to (M_sub1, M_full) through the two fixed maps."""
    if v_sub2.shape[-2] != template.m_sub2:
        raise ShapeMismatch(f"Expected {template.m_sub2} coarse vertices, got {v_sub2.shape[-2]}")
    v_sub1 = _apply(template.up2, v_sub2)
    return v_sub1, _apply(template.up1, v_sub1)


def laplacian_offsets(delta: ArrayLike, template: MeshTemplate) -> ArrayLike:
    """delta_i minus the mean of delta over vertex i's neighbors."""
    return delta - _apply(template.neighbor_mean, delta)


def write_obj(path: Union[str, Path], vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII OBJ with 1-based face indices; 9 significant digits keep float32 exact."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(vertices)} vertices and {len(faces)} faces to {path}")


def read_obj(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    vertices, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
