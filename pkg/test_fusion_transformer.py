import math

import numpy as np
import numpy.testing as npt
import pytest
import torch
from torch import nn

from errors import ShapeMismatch
from fusion_transformer import (GRID_CELLS, ConvFusion, Embeddings, FusionTransformer,
                                MultiHeadAttention, Sublayer, decoder_queries, fuse,
                                fuse_conv1x1, multi_head_attention, output_level_fusion_targets,
                                token_meta, tokenize)
from geometry import rotate_points
from mesh import PosedBody


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)


def test_tokenize_shape():
    grid = torch.randn(1, 4, 7, 7, 128)
    tokens = tokenize(grid, torch.arange(4)[None], nn.Linear(128, 64, bias=False), Embeddings(64, 14))
    assert tokens.shape == (1, 196, 64)


def test_tokenize_zero_grid_zero_embeddings():
    embeddings = Embeddings(8, 14)
    with torch.no_grad():
        for p in embeddings.parameters():
            p.zero_()
    tokens = tokenize(torch.zeros(2, 3, 7, 7, 5), torch.arange(3).expand(2, 3),
                      nn.Linear(5, 8, bias=False), embeddings)
    assert not tokens.any()


def test_token_meta_indexing():
    meta = token_meta(torch.tensor([[0, 2, 3]]), GRID_CELLS)
    for i, view in enumerate((0, 2, 3)):
        for j in (0, 17, 48):
            assert int(meta.view[0, GRID_CELLS * i + j]) == view
            assert int(meta.slot[0, GRID_CELLS * i + j]) == j


def test_tokenize_adds_origin_embeddings():
    embeddings = Embeddings(8, 14)
    projection = nn.Linear(5, 8, bias=False)
    grid = torch.randn(1, 2, 7, 7, 5)
    view_ids = torch.tensor([[1, 3]])
    tokens = tokenize(grid, view_ids, projection, embeddings)
    expected = projection(grid[0, 1, 2, 4]) + embeddings.grid[2 * 7 + 4] + embeddings.view[3]
    torch.testing.assert_close(tokens[0, GRID_CELLS + 18], expected)


def test_embedding_modes():
    grid = torch.randn(1, 1, 7, 7, 5)
    projection = nn.Linear(5, 8, bias=False)
    plain = projection(grid.reshape(1, GRID_CELLS, 5))
    view_ids = torch.tensor([[0]])
    none = Embeddings(8, 14, mode="none")
    torch.testing.assert_close(tokenize(grid, view_ids, projection, none), plain)
    view_only = Embeddings(8, 14, mode="view")
    torch.testing.assert_close(tokenize(grid, view_ids, projection, view_only),
                               plain + view_only.view[0])
    grid_only = Embeddings(8, 14, mode="grid")
    torch.testing.assert_close(tokenize(grid, view_ids, projection, grid_only),
                               plain + grid_only.grid)


def test_tokenize_rejects_bad_grid():
    with pytest.raises(ShapeMismatch):
        tokenize(torch.zeros(1, 2, 6, 6, 5), torch.zeros(1, 2, dtype=torch.long),
                 nn.Linear(5, 8), Embeddings(8, 14))


def test_decoder_queries_rows():
    embeddings = Embeddings(8, 14)
    queries = decoder_queries(torch.tensor([[0, 2]]), embeddings)
    assert queries.shape == (1, 28, 8)
    torch.testing.assert_close(queries[0, 14 + 5], embeddings.joint[5] + embeddings.view[2])


def test_attention_single_token():
    mha = MultiHeadAttention(8, 2)
    x = torch.randn(1, 1, 8)
    out, weights = mha(x, x)
    torch.testing.assert_close(out, mha.w_z(mha.w_v(x)))
    torch.testing.assert_close(weights, torch.ones(1, 2, 1, 1))


def test_attention_identical_keys_uniform():
    mha = MultiHeadAttention(8, 2)
    kv = torch.randn(1, 1, 8).expand(1, 6, 8)
    _, weights = mha(torch.randn(1, 3, 8), kv)
    torch.testing.assert_close(weights, torch.full((1, 2, 3, 6), 1 / 6))


def test_attention_matches_loop_oracle():
    d, h, length = 8, 2, 5
    mha = MultiHeadAttention(d, h).double()
    x = torch.randn(1, length, d, dtype=torch.float64)
    out = multi_head_attention(x, x, mha)[0].detach().numpy()

    xs = x[0].numpy()
    wq, wk, wv, wz = (m.weight.detach().numpy().T for m in (mha.w_q, mha.w_k, mha.w_v, mha.w_z))
    dh = d // h
    heads = np.zeros((length, d))
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        q, k, v = xs @ wq[:, cols], xs @ wk[:, cols], xs @ wv[:, cols]
        for i in range(length):
            scores = [sum(q[i, c] * k[j, c] for c in range(dh)) / math.sqrt(dh)
                      for j in range(length)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            for j in range(length):
                heads[i, cols] += e[j] / sum(e) * v[j]
    npt.assert_allclose(out, heads @ wz, atol=1e-6)


def test_attention_rows_are_distributions():
    mha = MultiHeadAttention(16, 4)
    _, weights = mha(torch.randn(2, 7, 16), torch.randn(2, 11, 16))
    assert (weights >= 0).all()
    torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 4, 7))


def test_attention_head_count_must_divide_width():
    with pytest.raises(ShapeMismatch):
        MultiHeadAttention(10, 4)


def test_sublayer_residual_only():
    sublayer = Sublayer(8).eval()
    with torch.no_grad():
        sublayer.w_l.weight.zero_()
    z = torch.randn(3, 8)
    torch.testing.assert_close(sublayer(z), nn.functional.layer_norm(z, (8,)))


def test_sublayer_constant_row_gives_shift():
    sublayer = Sublayer(8).eval()
    with torch.no_grad():
        sublayer.w_l.weight.zero_()
        sublayer.norm.bias.copy_(torch.randn(8))
    out = sublayer(torch.full((1, 8), 3.0))
    torch.testing.assert_close(out[0], sublayer.norm.bias.detach())


def test_sublayer_dropout_is_unbiased():
    sublayer = Sublayer(8, dropout=0.5).train()
    z = torch.randn(1, 8)
    with torch.no_grad():
        clean = sublayer.w_l(z)
        trials = torch.stack([sublayer.dropout(sublayer.w_l(z)) for _ in range(10_000)])
    mean = trials.mean(dim=0)
    sigma = trials.std(dim=0) / math.sqrt(10_000)
    assert ((mean - clean).abs() <= 5 * sigma + 1e-6).all()
    sublayer.eval()
    torch.testing.assert_close(sublayer(z), nn.functional.layer_norm(z + clean, (8,),
                                                                     sublayer.norm.weight,
                                                                     sublayer.norm.bias))


@pytest.mark.parametrize("n_views", [1, 2, 3, 4])
def test_fuse_shapes(n_views):
    model = FusionTransformer(num_joints=14, feature_channels=16, d=64, h=8).eval()
    out = model(torch.randn(2, n_views, 7, 7, 16), torch.arange(n_views).expand(2, n_views))
    assert out.z.shape == (2, 14 * n_views, 64)
    encoder_weights, decoder_weights = out.attention
    assert encoder_weights.shape == (2, 8, 49 * n_views, 49 * n_views)
    assert decoder_weights.shape == (2, 8, 14 * n_views, 49 * n_views)


def test_fuse_default_dims():
    model = FusionTransformer().eval()
    z = fuse(torch.randn(1, 4, 7, 7, 128), torch.arange(4)[None], model)
    assert z.shape == (1, 56, 64)


def test_fuse_zero_params_is_finite():
    model = FusionTransformer(feature_channels=16, d=16, h=4).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" not in name:
                p.zero_()
    z = fuse(torch.randn(1, 2, 7, 7, 16), torch.arange(2)[None], model)
    assert z.shape == (1, 28, 16)
    assert torch.isfinite(z).all()


def test_fuse_deterministic_without_dropout():
    model = FusionTransformer(feature_channels=16, d=16, h=4, dropout=0.0).train()
    grid = torch.randn(1, 3, 7, 7, 16)
    ids = torch.arange(3)[None]
    torch.testing.assert_close(fuse(grid, ids, model), fuse(grid, ids, model), rtol=0, atol=0)


def test_fuse_permutation_equivariance():
    model = FusionTransformer(feature_channels=16, d=16, h=4).eval()
    grid = torch.randn(1, 4, 7, 7, 16)
    ids = torch.arange(4)[None]
    perm = torch.tensor([3, 1, 0, 2])
    with torch.no_grad():
        z = fuse(grid, ids, model).reshape(1, 4, 14, 16)
        zp = fuse(grid[:, perm], ids[:, perm], model).reshape(1, 4, 14, 16)
    torch.testing.assert_close(zp, z[:, perm], rtol=0, atol=1e-5)


def test_query_views_can_differ_from_encoder_views():
    model = FusionTransformer(feature_channels=16, d=16, h=4).eval()
    out = model(torch.randn(1, 1, 7, 7, 16), torch.tensor([[0]]), query_view_ids=torch.arange(4)[None])
    assert out.z.shape == (1, 56, 16)


def pooled_cells(cells, n_rows):
    """Average of the contiguous cell bins adaptive pooling uses, one row at a time."""
    rows = []
    for i in range(n_rows):
        start = (i * GRID_CELLS) // n_rows
        end = -((-(i + 1) * GRID_CELLS) // n_rows)
        rows.append(cells[:, start:end].mean(dim=1))
    return torch.stack(rows, dim=1)


def test_conv1x1_single_view_pools_every_cell():
    fusion = ConvFusion(1, 14, feature_channels=5, d=8)
    grid = torch.randn(2, 1, 7, 7, 5)
    weight = fusion.conv.weight.detach().reshape(8, 5)
    expected = pooled_cells(grid.reshape(2, GRID_CELLS, 5) @ weight.T, 14)
    torch.testing.assert_close(fuse_conv1x1(grid, fusion), expected)


@pytest.mark.parametrize("n_views", [1, 2, 3, 4])
def test_conv1x1_output_depends_on_every_cell(n_views):
    fusion = ConvFusion(n_views, 14, feature_channels=3, d=4)
    grid = torch.randn(1, n_views, 7, 7, 3, requires_grad=True)
    out = fusion(grid)
    assert out.shape == (1, 14 * n_views, 4)
    out.pow(2).sum().backward()
    assert (grid.grad.abs().sum(dim=(0, 1, 4)) > 0).all()


def test_conv1x1_zero_grid():
    fusion = ConvFusion(3, 14, feature_channels=5, d=8)
    assert not fusion(torch.zeros(1, 3, 7, 7, 5)).any()


def test_conv1x1_tiles_cells_when_rows_cover_the_grid():
    n, c, d, k = 4, 3, 4, 14
    fusion = ConvFusion(n, k, feature_channels=c, d=d).double()
    grid = torch.randn(1, n, 7, 7, c, dtype=torch.float64)
    out = fusion(grid)[0].detach().numpy()
    assert out.shape == (k * n, d)
    weight = fusion.conv.weight.detach().numpy().reshape(d, n * c)
    g = grid[0].numpy()
    for row in range(k * n):
        cell = row % GRID_CELLS
        y, x = divmod(cell, 7)
        for o in range(d):
            value = sum(weight[o, v * c + ch] * g[v, y, x, ch] for v in range(n) for ch in range(c))
            assert out[row, o] == pytest.approx(value, abs=1e-6)


def test_output_level_identity_rig():
    body = PosedBody(np.random.default_rng(0).normal(size=(10, 3)), np.zeros((14, 3)))
    out = output_level_fusion_targets(body, np.tile(np.eye(3), (3, 1, 1)))
    assert out.vertices.shape == (3, 10, 3)
    for i in range(3):
        npt.assert_array_equal(out.vertices[i], body.vertices)


def test_output_level_rotations(rig, template):
    body = PosedBody(np.array(template.v_tpose), np.array(template.j_tpose))
    out = output_level_fusion_targets(body, rig)
    back = []
    for i, view in enumerate(rig.views):
        npt.assert_allclose(out.vertices[i], rotate_points(view.rotation, body.vertices), atol=1e-7)
        npt.assert_allclose(out.joints[i], rotate_points(view.rotation, body.joints), atol=1e-7)
        back.append(rotate_points(view.rotation.inverse(), out.vertices[i]))
    npt.assert_allclose(np.stack(back), np.broadcast_to(body.vertices, (4, 400, 3)), atol=1e-7)


def test_output_level_torch_batch(rig):
    vertices = torch.randn(2, 10, 3, dtype=torch.float64)
    body = PosedBody(vertices, torch.randn(2, 14, 3, dtype=torch.float64))
    out = output_level_fusion_targets(body, rig)
    assert out.vertices.shape == (2, 4, 10, 3)
