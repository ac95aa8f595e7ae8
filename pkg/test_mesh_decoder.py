import math

import pytest
import torch
from torch import nn

from errors import ShapeMismatch
from losses_metrics import LossWeights, loss_vertex
from mesh_decoder import MeshDecoder, block_heads, decode_body, progressive_widths
from synthetic_data import pose_body, sample_pose


@pytest.fixture
def decoder(template):
    torch.manual_seed(0)
    return MeshDecoder(template, rows_in=56, d=16, decoder_heads=4)


def test_block_heads():
    assert block_heads(67, 4) == 1
    assert block_heads(33, 4) == 3
    assert block_heads(16, 4) == 4
    assert block_heads(19, 4) == 1


def test_progressive_widths():
    assert progressive_widths(64) == (67, 33, 16)
    assert progressive_widths(16) == (19, 9, 4)


def test_query_shape(decoder):
    queries = decoder.build_body_queries(torch.randn(2, 56, 16))
    assert queries.shape == (2, 39, 19)


def test_zero_sequence_keeps_template_coordinates(decoder, template):
    queries = decoder.build_body_queries(torch.zeros(1, 56, 16))
    assert not queries[0, :, :16].any()
    torch.testing.assert_close(queries[0, :14, 16:], template.tensor("j_tpose"), rtol=0, atol=0)
    coarse = template.tensor("v_tpose")[torch.as_tensor(template.sub2_idx)]
    torch.testing.assert_close(queries[0, 14:, 16:], coarse, rtol=0, atol=0)


def test_joint_template_replaces_rest_joints(decoder, template):
    joints = torch.randn(2, 14, 3)
    queries = decoder.build_body_queries(torch.randn(2, 56, 16), joint_template=joints)
    torch.testing.assert_close(queries[:, :14, 16:], joints)
    torch.testing.assert_close(queries[:, 14:, 16:],
                               decoder.template_coords[14:].expand(2, -1, -1))


def test_rejects_wrong_sequence_length(decoder):
    with pytest.raises(ShapeMismatch):
        decoder.build_body_queries(torch.randn(1, 42, 16))


def test_masking_is_identity_when_disabled(template):
    decoder = MeshDecoder(template, rows_in=14, d=16, mask_fraction_max=0.0).train()
    queries = torch.randn(3, 39, 19)
    torch.testing.assert_close(decoder.mask_queries(queries), queries, rtol=0, atol=0)


def test_masking_is_identity_in_eval(decoder):
    decoder.eval()
    queries = torch.randn(3, 39, 19)
    torch.testing.assert_close(decoder.mask_queries(queries), queries, rtol=0, atol=0)
    torch.testing.assert_close(decoder.mask_queries(queries, fraction=1.0), queries, rtol=0, atol=0)


def test_full_mask_replaces_every_feature_row(decoder):
    decoder.train()
    with torch.no_grad():
        decoder.mask_token.copy_(torch.arange(16.0))
    queries = torch.randn(2, 39, 19)
    masked = decoder.mask_queries(queries, fraction=1.0)
    torch.testing.assert_close(masked[..., :16], torch.arange(16.0).expand(2, 39, 16))
    torch.testing.assert_close(masked[..., 16:], queries[..., 16:], rtol=0, atol=0)


def test_masked_row_count_is_bounded(decoder):
    decoder.train()
    with torch.no_grad():
        decoder.mask_token.fill_(1e6)
    limit = math.floor(0.3 * 39)
    for _ in range(50):
        masked = decoder.mask_queries(torch.randn(4, 39, 19))
        counts = (masked[..., 0] == 1e6).sum(dim=1)
        assert (counts <= limit).all()


def test_forward_shapes(decoder, template):
    decoder.eval()
    body = decode_body(torch.randn(2, 56, 16), decoder)
    assert body.joints.shape == (2, 14, 3)
    assert body.v_sub2.shape == (2, template.m_sub2, 3)
    assert body.v_sub1.shape == (2, template.m_sub1, 3)
    assert body.v_full.shape == (2, template.m_full, 3)


def test_progressive_encode_splits_joint_and_vertex_rows(decoder, template):
    decoder.eval()
    queries = decoder.build_body_queries(torch.randn(2, 56, 16))
    joints, v_sub2 = decoder.progressive_encode(queries)
    assert joints.shape == (2, 14, 3)
    assert v_sub2.shape == (2, template.m_sub2, 3)
    with pytest.raises(ShapeMismatch):
        decoder.progressive_encode(queries[:, 1:])


def test_eval_forward_is_deterministic(decoder):
    decoder.eval()
    z = torch.randn(1, 56, 16)
    first = decoder(z)
    second = decoder(z)
    torch.testing.assert_close(first.v_full, second.v_full, rtol=0, atol=0)


def test_full_mesh_is_upsampled_coarse_mesh(decoder, template):
    decoder.eval()
    body = decoder(torch.randn(1, 56, 16))
    expected = template.tensor("up1") @ (template.tensor("up2") @ body.v_sub2[0])
    torch.testing.assert_close(body.v_full[0], expected, rtol=1e-5, atol=1e-5)


def test_upsampling_matrices_buffers_or_parameters(template):
    fixed = MeshDecoder(template, rows_in=14, d=16)
    assert "up1" in dict(fixed.named_buffers())
    assert not isinstance(fixed.up1, nn.Parameter)
    learnable = MeshDecoder(template, rows_in=14, d=16, learnable_upsampling=True)
    assert isinstance(learnable.up1, nn.Parameter)
    assert isinstance(learnable.up2, nn.Parameter)
    body = learnable(torch.randn(1, 14, 16))
    body.v_full.sum().backward()
    assert learnable.up1.grad is not None and learnable.up1.grad.abs().sum() > 0


def test_widths_must_start_at_d_plus_three(template):
    with pytest.raises(ShapeMismatch):
        MeshDecoder(template, rows_in=14, d=16, widths=(16, 8, 4))


def test_decoder_gradient_matches_finite_differences(template):
    torch.manual_seed(3)
    decoder = MeshDecoder(template, rows_in=14, d=8, decoder_heads=2, dropout=0.0,
                          mask_fraction_max=0.0).double()
    z = torch.randn(1, 14, 8, dtype=torch.float64)

    def objective() -> torch.Tensor:
        body = decoder(z)
        return (body.v_full ** 2).sum() + (body.joints ** 2).sum()

    objective().backward()
    step = 1e-6
    checked = [decoder.length_match, decoder.to_coords.weight, decoder.blocks[0].attention.w_q.weight]
    with torch.no_grad():
        for p in checked:
            for i in (0, 3):
                analytic = float(p.grad.reshape(-1)[i])
                original = float(p.reshape(-1)[i])
                p.view(-1)[i] = original + step
                plus = float(objective())
                p.view(-1)[i] = original - step
                minus = float(objective())
                p.view(-1)[i] = original
                numeric = (plus - minus) / (2 * step)
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_single_sample_vertex_loss_falls_every_ten_steps(template, generator_config):
    torch.manual_seed(0)
    decoder = MeshDecoder(template, rows_in=56, d=16, mask_fraction_max=0.0, decoder_heads=4,
                          dropout=0.0)
    z = torch.randn(1, 56, 16)
    body = pose_body(sample_pose(0, generator_config), template)
    gt = torch.as_tensor(body.vertices, dtype=torch.float32)[None]
    optimizer = torch.optim.Adam(decoder.parameters(), lr=1e-3)
    losses = []
    for _ in range(100):
        optimizer.zero_grad()
        out = decoder(z)
        loss = loss_vertex(out.v_full, out.v_sub1, out.v_sub2, gt, template, LossWeights())
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    windows = [sum(losses[i:i + 10]) / 10 for i in range(0, len(losses), 10)]
    assert all(later < earlier for earlier, later in zip(windows, windows[1:]))
