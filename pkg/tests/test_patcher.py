import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glmae.errors import MaskRatioError, ShapeMismatchError, TokenizationError
from glmae.patcher import (
    full_view,
    grid_dims_for,
    mask_count,
    mask_patches,
    num_patches,
    patchify,
    patchify_tensor,
    sample_mask,
    unpatchify,
    unpatchify_tensor,
)


def test_full_scale_token_counts():
    g = patchify(np.zeros((96, 96, 96), np.float32), 16)
    assert g.num_patches == 216 and g.patches.shape[1] == 4096
    assert num_patches((160, 160, 160), 16) == 1000
    assert num_patches((32, 32, 32), 8) == 64


def test_tokenization_error_names_axis():
    with pytest.raises(TokenizationError) as e:
        grid_dims_for((16, 12, 16), 8)
    assert e.value.axis == 1


def test_patch_order_is_lexicographic():
    x = torch.arange(4 * 4 * 4).reshape(4, 4, 4)
    p = patchify_tensor(x, 2)
    # patch 1 is the (0, 0, 1) block; its first voxel sits at (0, 0, 2)
    assert p[1, 0] == x[0, 0, 2]
    # patch 2 is the (0, 1, 0) block
    assert p[2, 0] == x[0, 2, 0]
    # voxels inside a patch follow (h, w, d) order
    assert p[0].tolist() == [x[0, 0, 0], x[0, 0, 1], x[0, 1, 0], x[0, 1, 1], x[1, 0, 0], x[1, 0, 1], x[1, 1, 0], x[1, 1, 1]]


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(1, 4)] * 3), st.integers(0, 2))
def test_patchify_round_trip_bit_exact(grid, ps, lead):
    shape = (2,) * lead + tuple(g * p for g, p in zip(grid, ps))
    x = torch.randn(shape, dtype=torch.float64)
    p = patchify_tensor(x, ps)
    assert p.shape[-2:] == (np.prod(grid), np.prod(ps))
    assert torch.equal(unpatchify_tensor(p, grid, ps), x)


def test_unpatchify_examples():
    assert not unpatchify(torch.zeros(8, 8), (2, 2, 2), 2).any()
    patch = torch.arange(24.0)[None]
    assert torch.equal(unpatchify(patch, (1, 1, 1), (2, 3, 4)), patch.reshape(2, 3, 4))
    with pytest.raises(ShapeMismatchError):
        unpatchify(torch.zeros(7, 8), (2, 2, 2), 2)


def test_mask_count_examples():
    assert mask_count(0.6, 216) == 130
    assert mask_count(0.75, 8) == 6
    assert mask_count(0.0, 10) == 0
    assert mask_count(0.99, 4) == 3  # at least one patch stays visible
    for bad in (1.0, 1.5, -0.1):
        with pytest.raises(MaskRatioError):
            mask_count(bad, 10)


@given(st.floats(0, 0.999), st.integers(1, 400))
def test_mask_count_is_round_half_up(ratio, P):
    k = mask_count(ratio, P)
    assert k == min(int(np.floor(ratio * P + 0.5)), P - 1)
    m = sample_mask(P, ratio, np.random.default_rng(0))
    assert m.sum() == k and (~m).sum() >= 1


def test_zero_ratio_keeps_everything_visible():
    g = patchify(np.zeros((16, 16, 16), np.float32), 8)
    mv = mask_patches(g, 0.0, np.random.default_rng(0))
    assert mv.num_masked == 0 and mv.visible_index.tolist() == list(range(8))
    fv = full_view(g)
    assert np.array_equal(fv.mask, mv.mask)


def test_masked_view_partitions_positions():
    g = patchify(np.zeros((32, 32, 32), np.float32), 8)
    mv = mask_patches(g, 0.6, np.random.default_rng(3))
    both = np.sort(np.concatenate([mv.visible_index, mv.masked_index]))
    assert both.tolist() == list(range(64))
    assert np.all(np.diff(mv.visible_index) > 0)
    again = mask_patches(g, 0.6, np.random.default_rng(3))
    assert np.array_equal(again.mask, mv.mask)
