"""
Configuration for dataset generation and training.

Config files are flat UTF-8 text, one ``key = value`` per line. Blank lines and
lines starting with ``#`` are ignored. Unknown or repeated keys are errors so a
typo can never silently fall back to a default.
"""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Tuple, Type, TypeVar, Union

from errors import ConfigError

logger = logging.getLogger(__name__)

FUSION_VARIANTS = ("mmt", "conv1x1", "strategyA", "strategyB")
ALIGNMENT_MODES = ("off", "3d", "3d2d")
TOKEN_EMBEDDINGS = ("grid+view", "view", "grid", "none")

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}

C = TypeVar("C", bound="_FlatConfig")


class _FlatConfig:
    """Shared key=value parsing for the config dataclasses."""

    @classmethod
    def from_dict(cls: Type[C], values: Dict[str, Any]) -> C:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"Unknown config key: {key}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_text(cls: Type[C], text: str) -> C:
        values: Dict[str, str] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"Line {line_no}: expected 'key = value', got {stripped!r}")
            key, value = (part.strip() for part in stripped.split("=", 1))
            if key in values:
                raise ConfigError(f"Line {line_no}: duplicate key {key}")
            values[key] = value
        return cls.from_dict(values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self: C, **overrides: Any) -> C:
        values = self.to_dict()
        values.update(overrides)
        return type(self).from_dict(values)

    def validate(self) -> None:
        pass


def _coerce(key: str, raw: Any, target: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if target is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}") from None


@dataclass
class GeneratorConfig(_FlatConfig):
    """Synthetic body, rig and raster settings."""

    num_joints: int = 14
    m_full: int = 400
    m_sub1: int = 100
    m_sub2: int = 25
    rings_per_segment: int = 5
    n_views: int = 4
    elevation_deg: float = 10.0
    master: int = 0
    camera_scale: float = 50.0
    image_size: int = 112
    image_channels: int = 2
    splat_radius: int = 1
    depth_extent: float = 1.5
    pose_amplitude: float = 1.0
    root_yaw_limit: float = 3.141592653589793
    workers: int = 1

    def validate(self) -> None:
        for name in ("num_joints", "m_full", "m_sub1", "m_sub2", "n_views", "image_size",
                     "image_channels", "rings_per_segment", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_joints != 14:
            raise ConfigError("The synthetic skeleton has exactly 14 joints")
        if not self.m_sub2 <= self.m_sub1 <= self.m_full:
            raise ConfigError("Expected m_sub2 <= m_sub1 <= m_full")
        if not 0 <= self.master < self.n_views:
            raise ConfigError(f"master must be in [0, {self.n_views})")
        if self.camera_scale <= 0 or self.depth_extent <= 0:
            raise ConfigError("camera_scale and depth_extent must be positive")
        if self.pose_amplitude < 0 or self.splat_radius < 0:
            raise ConfigError("pose_amplitude and splat_radius must be non-negative")
        if self.image_channels > 2:
            raise ConfigError("image_channels is 1 (silhouette) or 2 (silhouette, depth)")


@dataclass
class TrainConfig(_FlatConfig):
    """Everything a training run depends on besides the dataset itself."""

    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 100
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    mu: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0

    n_views: int = 4
    num_joints: int = 14
    d: int = 64
    h: int = 8
    feature_channels: int = 128
    m_full: int = 400
    m_sub1: int = 100
    m_sub2: int = 25
    image_size: int = 112
    image_channels: int = 2

    fusion_variant: str = "mmt"
    alignment: str = "3d2d"
    template_replacement: bool = False
    smooth_loss: bool = False
    mask_fraction_max: float = 0.3
    dropout: float = 0.1
    n_encoder_layers: int = 1
    n_decoder_layers: int = 1
    decoder_heads: int = 4
    token_embedding: str = "grid+view"
    learnable_upsampling: bool = False

    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    holdout_fraction: float = 0.2
    num_threads: int = 1
    checkpoint_every: int = 1
    eval_all_views: bool = False

    def validate(self) -> None:
        for name in ("lr", "lr_decay_factor", "lr_decay_every", "batch_size", "n_views",
                     "num_joints", "d", "h", "feature_channels", "m_full", "m_sub1", "m_sub2",
                     "image_size", "image_channels", "n_encoder_layers", "n_decoder_layers",
                     "decoder_heads", "num_threads", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.d % self.h != 0:
            raise ConfigError(f"d={self.d} must be divisible by h={self.h}")
        if self.n_views > 4:
            raise ConfigError("n_views must be in 1..4")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"fusion_variant must be one of {FUSION_VARIANTS}")
        if self.alignment not in ALIGNMENT_MODES:
            raise ConfigError(f"alignment must be one of {ALIGNMENT_MODES}")
        if self.token_embedding not in TOKEN_EMBEDDINGS:
            raise ConfigError(f"token_embedding must be one of {TOKEN_EMBEDDINGS}")
        weights = ("alpha", "beta", "gamma", "mu", "lambda1", "lambda2", "lambda3", "lambda4",
                   "eta1", "eta2", "eta3", "weight_decay")
        for name in weights:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.mask_fraction_max <= 1.0:
            raise ConfigError("mask_fraction_max must be in [0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if not self.m_sub2 <= self.m_sub1 <= self.m_full:
            raise ConfigError("Expected m_sub2 <= m_sub1 <= m_full")

    @property
    def effective_mu(self) -> float:
        return self.mu if self.smooth_loss else 0.0

    def template_config(self) -> GeneratorConfig:
        """Generator settings that rebuild the template this model was sized for."""
        return GeneratorConfig(
            num_joints=self.num_joints,
            m_full=self.m_full,
            m_sub1=self.m_sub1,
            m_sub2=self.m_sub2,
            image_size=self.image_size,
            image_channels=self.image_channels,
        )


def load_config(path: Union[str, Path], cls: Type[C] = TrainConfig) -> C:  # type: ignore[assignment]
    """Read a key=value config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path} is not UTF-8: {e}") from None
    config = cls.from_text(text)
    logger.info(f"Loaded {cls.__name__} from {path}")
    return config


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Stepped schedule: lr0 * decay ** floor(epoch / decay_every)."""
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def split_overrides(pairs: Tuple[str, ...]) -> Dict[str, str]:
    """Parse ``key=value`` strings given on the command line."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must be key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides
