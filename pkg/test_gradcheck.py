import torch

from gradcheck import (LOSS_TOLERANCE, GradcheckReport, GradcheckTerm, check_tensor_gradient,
                       relative_error, run_gradcheck)


class _DoubledGradient(torch.autograd.Function):
    """x**2 whose backward reports twice the true gradient."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x ** 2).sum()

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 4 * x


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 0.0) == 0.0


def test_correct_gradient_passes():
    x = torch.randn(10, dtype=torch.float64)
    error = check_tensor_gradient(lambda t: (t ** 3).sum(), x, 10, torch.Generator().manual_seed(0))
    assert error < LOSS_TOLERANCE


def test_wrong_gradient_is_caught():
    x = torch.rand(10, dtype=torch.float64) + 0.5
    error = check_tensor_gradient(_DoubledGradient.apply, x, 5, torch.Generator().manual_seed(0))
    assert error > 0.4
    report = GradcheckReport([GradcheckTerm("doubled", error, 5, LOSS_TOLERANCE)])
    assert not report.passed
    assert report.to_text().splitlines()[-1] == "FAIL"


def test_small_model_passes(small_config):
    report = run_gradcheck(small_config, seed=0, n_points=2, n_coords=3, n_params=6)
    assert [t.name for t in report.terms] == ["joint", "vertex", "align", "smooth", "end_to_end"]
    assert report.passed, report.to_text()
    assert report.to_text().splitlines()[-1] == "PASS"
    frame = report.to_frame()
    assert list(frame.columns) == ["term", "max_rel_error", "tolerance", "checked", "passed"]
    assert frame["checked"].tolist() == [6, 6, 6, 6, 6]
