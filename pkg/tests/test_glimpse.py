import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthram.glimpse import GlimpseConfig, SparseGrid, denormalize, extract, extract_dense, grid_view, normalize
from depthram.voxel import VoxelTensor4D


def random_grid(rng, nd, max_side=12, density=None):
    shape = tuple(int(v) for v in rng.integers(1, max_side + 1, size=nd))
    p = rng.random() if density is None else density
    dense = (rng.random(shape) < p).astype(np.float64)
    return SparseGrid(np.argwhere(dense > 0), shape), dense


def test_config_validation():
    with pytest.raises(ValueError):
        GlimpseConfig(size=3)
    with pytest.raises(ValueError):
        GlimpseConfig(patches=0)
    assert GlimpseConfig().length(4) == 5 * 8 ** 4


def test_denormalize_endpoints_and_rounding():
    shape = (250, 100, 200, 32)
    assert denormalize(np.array([-1, -1, -1, -1.0]), shape).tolist() == [0, 0, 0, 0]
    assert denormalize(np.array([1, 1, 1, 1.0]), shape).tolist() == [249, 99, 199, 31]
    # (0 + 1) / 2 * 249 = 124.5 rounds half up
    assert denormalize(np.zeros(4), shape).tolist() == [125, 50, 100, 16]
    assert denormalize(np.array([5.0]), (10,)).tolist() == [9]


def test_normalize_inverts_denormalize():
    shape = (250, 100)
    c = np.array([17, 99])
    assert np.array_equal(denormalize(normalize(c, shape), shape), c)


def test_glimpse_length_and_empty_grid():
    g = SparseGrid(np.zeros((0, 3), dtype=np.int64), (10, 10, 10))
    out = extract(g, np.zeros(3), GlimpseConfig(4, 3))
    assert out.shape == (3 * 4 ** 3,) and not out.any()


def test_single_cell_patch_values():
    # one occupied cell at the centre: patch k holds 1 / k**nd in one cell
    g = SparseGrid(np.array([[8, 8]]), (17, 17))
    out = extract(g, np.zeros(2), GlimpseConfig(4, 3)).reshape(3, 4, 4)
    for k in range(1, 4):
        assert out[k - 1].sum() == pytest.approx(1.0 / k ** 2)
        assert np.count_nonzero(out[k - 1]) == 1


def test_full_grid_interior_is_all_ones():
    shape = (64, 64)
    g = SparseGrid(np.argwhere(np.ones(shape)), shape)
    out = extract(g, np.zeros(2), GlimpseConfig(8, 5))
    assert np.all(out == 1.0)


def test_corner_glimpse_is_zero_padded():
    shape = (16, 16)
    g = SparseGrid(np.argwhere(np.ones(shape)), shape)
    out = extract(g, -np.ones(2), GlimpseConfig(4, 1)).reshape(4, 4)
    # window [-2, 2) per axis: only the lower-right quarter lies inside the grid
    assert out[2:, 2:].min() == 1.0 and out[:2].max() == 0.0 and out[:, :2].max() == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_extract_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    nd = int(rng.integers(1, 5))
    grid, dense = random_grid(rng, nd, max_side=10 if nd == 4 else 16)
    cfg = GlimpseConfig(size=int(rng.choice([2, 4])), patches=int(rng.integers(1, 4)))
    loc = rng.uniform(-1.2, 1.2, size=nd)
    assert np.array_equal(extract(grid, loc, cfg), extract_dense(dense, loc, cfg))


def test_sparse_grid_sorts_rows():
    g = SparseGrid(np.array([[3, 0], [1, 1], [2, 2]]), (4, 4))
    assert g.coords[:, 0].tolist() == [1, 2, 3]
    assert g.rows_in(2, 4).tolist() == [[2, 2], [3, 0]]


def test_grid_views_per_dimensionality():
    coords = np.array([[1, 2, 3, 0], [1, 2, 4, 0], [5, 6, 7, 1]])
    t = VoxelTensor4D(coords, frames=2, dims=(8, 8, 8))
    g4 = grid_view(t, 4)
    assert g4.shape == (8, 8, 8, 2) and len(g4.coords) == 3
    g3 = grid_view(t, 3, 0)
    assert g3.shape == (8, 8, 8) and g3.coords.tolist() == [[1, 2, 3], [1, 2, 4]]
    g2 = grid_view(t, 2, 0)
    # the two frame-0 cells share an x-y column and project onto one pixel
    assert g2.shape == (8, 8) and g2.coords.tolist() == [[1, 2]]
    with pytest.raises(ValueError):
        grid_view(t, 3)
