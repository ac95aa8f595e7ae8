"""
Reader and writer for the binary multi-view dataset format.

Layout (little-endian):

    magic "MMTD" | u32 version=1 | u32 n_samples | u32 N | u32 K | u32 M_full | u32 H | u32 W | u32 c
    then per sample, as float32 in this order:
        images        N x H x W x c
        gt_joints3d   N x K x 3
        gt_joints2d   N x K x 2
        gt_vertices   N x M_full x 3

The rig and generator settings live next to the data file in `<file>.rig.json`.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from errors import DatasetFormatError, SampleOutOfRange, ShapeMismatch, expect_shape
from geometry import CameraRig

logger = logging.getLogger(__name__)

MAGIC = b"MMTD"
VERSION = 1
_HEADER = struct.Struct("<4s8I")
_FLOAT = np.dtype("<f4")


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".rig.json")


@dataclass(frozen=True)
class DatasetHeader:
    n_samples: int
    n_views: int
    num_joints: int
    m_full: int
    height: int
    width: int
    channels: int

    @property
    def sizes(self) -> Dict[str, tuple]:
        n, k = self.n_views, self.num_joints
        return {
            "images": (n, self.height, self.width, self.channels),
            "gt_joints3d": (n, k, 3),
            "gt_joints2d": (n, k, 2),
            "gt_vertices": (n, self.m_full, 3),
        }

    @property
    def record_floats(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.sizes.values())

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.n_samples, self.n_views, self.num_joints,
                            self.m_full, self.height, self.width, self.channels)


class DatasetWriter:
    """Sequential writer; samples must arrive in index order."""

    def __init__(self, path: Union[str, Path], n_samples: int, n_views: int, num_joints: int,
                 m_full: int, height: int, width: int, channels: int):
        self.path = Path(path)
        self.header = DatasetHeader(n_samples, n_views, num_joints, m_full, height, width,
                                    channels)
        self.written = 0
        self._file = None

    def __enter__(self) -> "DatasetWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "wb")
        self._file.write(self.header.pack())
        return self

    def write_sample(self, sample: Any) -> None:
        if self._file is None:
            raise RuntimeError("DatasetWriter used outside a with-block")
        if self.written >= self.header.n_samples:
            raise DatasetFormatError(f"Header declares only {self.header.n_samples} samples")
        for name, shape in self.header.sizes.items():
            array = getattr(sample, name)
            expect_shape(name, array.shape, shape)
            self._file.write(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())
        self.written += 1

    def __exit__(self, exc_type, exc, tb) -> None:
        self._file.close()
        self._file = None
        if exc_type is None and self.written != self.header.n_samples:
            raise DatasetFormatError(
                f"Wrote {self.written} samples but header declares {self.header.n_samples}"
            )


class DatasetReader:
    """Memory-mapped view of a dataset file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.header: Optional[DatasetHeader] = None
        self._records: Optional[np.memmap] = None
        self.parse_file()

    def parse_file(self) -> None:
        try:
            with open(self.path, "rb") as f:
                raw = f.read(_HEADER.size)
        except OSError as e:
            logger.error(f"Error opening dataset {self.path}: {e}")
            raise
        if len(raw) < _HEADER.size:
            raise DatasetFormatError(f"{self.path}: file too short for a header")
        magic, version, *dims = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise DatasetFormatError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise DatasetFormatError(f"{self.path}: unsupported version {version}")
        self.header = DatasetHeader(*dims)

        expected = _HEADER.size + self.header.n_samples * self.header.record_floats * _FLOAT.itemsize
        actual = self.path.stat().st_size
        if actual != expected:
            raise DatasetFormatError(f"{self.path}: expected {expected} bytes, found {actual}")
        self._records = np.memmap(self.path, dtype=_FLOAT, mode="r", offset=_HEADER.size,
                                  shape=(self.header.n_samples, self.header.record_floats))
        logger.info(f"Opened dataset {self.path}: {self.header.n_samples} samples, "
                    f"{self.header.n_views} views")

    def __len__(self) -> int:
        return self.header.n_samples

    def arrays(self, index: int) -> Dict[str, np.ndarray]:
        """Copies of one record's arrays as native float32."""
        if not 0 <= index < len(self):
            raise SampleOutOfRange(f"Sample {index} outside [0, {len(self)})")
        record = self._records[index]
        out: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.header.sizes.items():
            size = int(np.prod(shape))
            out[name] = np.array(record[offset:offset + size], dtype=np.float32).reshape(shape)
            offset += size
        return out

    def sample(self, index: int):
        from synthetic_data import MultiViewSample

        return MultiViewSample(**self.arrays(index))

    def sidecar(self) -> Dict[str, Any]:
        path = sidecar_path(self.path)
        if not path.exists():
            raise DatasetFormatError(f"Missing rig sidecar {path}")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except ValueError as e:
            raise DatasetFormatError(f"{path}: not valid JSON ({e})") from None

    def rig(self) -> CameraRig:
        sidecar = self.sidecar()
        try:
            rig = CameraRig.from_dict(sidecar["rig"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{sidecar_path(self.path)}: invalid rig ({e})") from None
        if rig.n_views != self.header.n_views:
            raise ShapeMismatch(
                f"Sidecar rig has {rig.n_views} views, dataset has {self.header.n_views}"
            )
        return rig
