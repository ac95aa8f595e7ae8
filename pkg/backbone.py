"""Per-view convolutional feature extractor (shared weights across views)."""

import logging
from typing import Sequence

import torch
from torch import nn

from errors import ConfigError, expect_shape

logger = logging.getLogger(__name__)

CHANNEL_PLAN = (16, 32, 64)
GRID_SIZE = 7


class Backbone(nn.Module):
    """Four 3x3 stride-2 conv blocks: 112 -> 56 -> 28 -> 14 -> 7.

    Takes channels-last images (B, N, H, W, c) and returns a channels-last
    feature grid (B, N, 7, 7, C). The same stack runs on every view.
    """

    def __init__(self, in_channels: int = 2, feature_channels: int = 128, image_size: int = 112,
                 channel_plan: Sequence[int] = CHANNEL_PLAN):
        super().__init__()
        if image_size != GRID_SIZE * 2 ** (len(channel_plan) + 1):
            raise ConfigError(
                f"image_size {image_size} does not reduce to a {GRID_SIZE}x{GRID_SIZE} grid")
        self.in_channels = in_channels
        self.feature_channels = feature_channels
        self.image_size = image_size
        widths = (in_channels, *channel_plan, feature_channels)
        layers = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.SiLU()]
        self.blocks = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        expect_shape("images", images.shape,
                     (None, None, self.image_size, self.image_size, self.in_channels))
        b, n = images.shape[:2]
        x = images.reshape(b * n, self.image_size, self.image_size, self.in_channels)
        x = self.blocks(x.permute(0, 3, 1, 2))
        return x.permute(0, 2, 3, 1).reshape(b, n, GRID_SIZE, GRID_SIZE, self.feature_channels)


def extract_features(images: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Feature grid for one multi-view group (N, H, W, c) -> (N, 7, 7, C)."""
    return backbone(images.unsqueeze(0)).squeeze(0)
