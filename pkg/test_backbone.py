import pytest
import torch
from torch import nn

from backbone import Backbone, extract_features
from errors import ConfigError, ShapeMismatch


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return Backbone(in_channels=2, feature_channels=16)


def test_output_grid_shape(backbone):
    grid = backbone(torch.rand(3, 4, 112, 112, 2))
    assert grid.shape == (3, 4, 7, 7, 16)


def test_single_view_shape(backbone):
    assert extract_features(torch.rand(1, 112, 112, 2), backbone).shape == (1, 7, 7, 16)


def test_zero_images_zero_bias_give_zero_grid(backbone):
    with torch.no_grad():
        for module in backbone.modules():
            if isinstance(module, nn.Conv2d):
                module.bias.zero_()
    grid = backbone(torch.zeros(1, 2, 112, 112, 2))
    assert not grid.any()


def test_view_permutation_equivariance(backbone):
    images = torch.rand(2, 4, 112, 112, 2)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        grid = backbone(images)
        permuted = backbone(images[:, perm])
    torch.testing.assert_close(permuted, grid[:, perm], rtol=0, atol=1e-6)


def test_rejects_wrong_image_shape(backbone):
    with pytest.raises(ShapeMismatch):
        backbone(torch.rand(1, 1, 64, 64, 2))
    with pytest.raises(ShapeMismatch):
        backbone(torch.rand(1, 1, 112, 112, 3))


def test_image_size_must_reduce_to_grid():
    with pytest.raises(ConfigError):
        Backbone(image_size=100)


def test_parameter_gradients_match_finite_differences(backbone):
    backbone = backbone.double()
    images = torch.rand(1, 2, 112, 112, 2, dtype=torch.float64)

    def objective() -> torch.Tensor:
        return (backbone(images) ** 2).sum()

    backbone.zero_grad()
    objective().backward()
    generator = torch.Generator().manual_seed(1)
    params = list(backbone.parameters())
    step = 1e-4
    with torch.no_grad():
        for _ in range(10):
            p = params[int(torch.randint(len(params), (1,), generator=generator))]
            i = int(torch.randint(p.numel(), (1,), generator=generator))
            analytic = float(p.grad.reshape(-1)[i])
            original = float(p.reshape(-1)[i])
            p.view(-1)[i] = original + step
            plus = float(objective())
            p.view(-1)[i] = original - step
            minus = float(objective())
            p.view(-1)[i] = original
            numeric = (plus - minus) / (2 * step)
            assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6) < 1e-3
