from functools import reduce
from itertools import permutations

import numpy as np
import pytest
from devtools import debug
from hypothesis import given, settings, strategies as st

from s2s_net.base import ConvMode
from s2s_net.errors import BevFileError, IncompatibleGridError, ShapeError, WeightFileError
from s2s_net.grid import DESK_GRID, FULL_SCALE_GRID, GridConfig, PointCloud, SparseVoxelGrid, center_features, voxelize
from s2s_net.network import (
    BevFeatureMap,
    BlockWeights,
    Layer,
    ModelWeights,
    backbone_stages,
    bev_shape,
    conv_block,
    forward,
    init_weights,
    load_bev,
    load_weights,
    save_bev,
    save_weights,
    scatter,
    to_bev,
)
from s2s_net.sparse_nn import ConvParams, NormParams, SparseTensor, batchnorm_relu, sparse_conv, submanifold_conv


SMALL_CHANNELS = (4, 8, 8, 8)


@st.composite
def tensors(draw, dims=(4, 4, 4), width: int = 3):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    mask = rng.random(dims) < rng.uniform(0.0, 0.5)
    coords = np.argwhere(mask)
    # Few distinct values so that ties between tensors happen
    features = rng.integers(-3, 4, (len(coords), width)).astype(np.float32) / 2
    return SparseTensor(dims, coords, features)


def desk_cloud(seed: int, n: int = 400) -> PointCloud:
    rng = np.random.default_rng(seed)
    low = DESK_GRID.origin_array
    return PointCloud(rng.uniform(low, low + DESK_GRID.size, (n, 3)))


def local_only(grid: SparseVoxelGrid, weights: ModelWeights) -> BevFeatureMap:
    tensor = center_features(grid)
    for block in weights.local_blocks:
        tensor = conv_block(tensor, block)
    return to_bev(weights.final(tensor))


@settings(max_examples=1000, deadline=None)
@given(tensors(), tensors(), tensors())
def test_scatter_algebra(a, b, c):
    assert scatter(a, b) == scatter(b, a)
    assert scatter(scatter(a, b), c) == scatter(a, scatter(b, c))
    assert scatter(a, a) == a
    assert scatter(a, SparseTensor.empty(a.dims, a.width)) == a


def test_scatter_values():
    a = SparseTensor((2, 2, 2), [[0, 0, 0], [1, 1, 1]], [[1.0, 5.0], [2.0, 2.0]])
    b = SparseTensor((2, 2, 2), [[0, 0, 0], [0, 1, 0]], [[3.0, -1.0], [7.0, 8.0]])
    fused = scatter(a, b)
    assert fused.coords.tolist() == [[0, 0, 0], [0, 1, 0], [1, 1, 1]]
    assert fused.features.tolist() == [[3.0, 5.0], [7.0, 8.0], [2.0, 2.0]]


def test_scatter_mismatch():
    a = SparseTensor.empty((2, 2, 2), 3)
    with pytest.raises(ShapeError):
        scatter(a, SparseTensor.empty((2, 2, 4), 3))
    with pytest.raises(ShapeError):
        scatter(a, SparseTensor.empty((2, 2, 2), 4))


def test_full_scale_bev_shape():
    weights = init_weights(0, SMALL_CHANNELS)
    assert bev_shape(FULL_SCALE_GRID.dims, weights) == (700, 200, 5 * 8)
    assert bev_shape(FULL_SCALE_GRID.dims, init_weights(0)) == (700, 200, 320)


def test_desk_forward_shape():
    weights = init_weights(42)
    grid = voxelize(desk_cloud(1), DESK_GRID)
    bev = forward(grid, SparseVoxelGrid(DESK_GRID), weights)
    debug(bev.shape)
    assert bev.shape == (8, 8, 64)
    assert bev.shape == bev_shape(DESK_GRID.dims, weights)


def test_init_weights_is_seeded():
    assert init_weights(7, SMALL_CHANNELS) == init_weights(7, SMALL_CHANNELS)
    assert init_weights(7, SMALL_CHANNELS) != init_weights(8, SMALL_CHANNELS)


def test_init_weights_rejects_bad_plan():
    with pytest.raises(ShapeError):
        init_weights(0, (4, 8), (1, 2, 2))
    with pytest.raises(ShapeError):
        init_weights(0, ())


def test_empty_collective_is_local_only():
    weights = init_weights(3, SMALL_CHANNELS)
    grid = voxelize(desk_cloud(2), DESK_GRID)
    assert forward(grid, SparseVoxelGrid(DESK_GRID), weights) == local_only(grid, weights)


def test_identical_streams_are_local_only():
    weights = init_weights(4, SMALL_CHANNELS)
    shared = ModelWeights(weights.local_blocks, weights.local_blocks, weights.final)
    grid = voxelize(desk_cloud(3), DESK_GRID)
    assert forward(grid, grid, shared) == local_only(grid, shared)


def test_fusion_never_shrinks_active_sites():
    weights = init_weights(5, SMALL_CHANNELS)
    ego = center_features(voxelize(desk_cloud(4), DESK_GRID))
    collective = center_features(voxelize(desk_cloud(5), DESK_GRID))
    alone = backbone_stages(ego, SparseTensor.empty(ego.dims, ego.width), weights)
    fused = backbone_stages(ego, collective, weights)
    for a, f in zip(alone, fused):
        assert set(map(tuple, a.coords.tolist())) <= set(map(tuple, f.coords.tolist()))


def test_forward_rejects_other_grid():
    other = GridConfig.from_extent((0, 0, 0), (0.05, 0.05, 0.1), (3.2, 3.2, 0.8))
    with pytest.raises(IncompatibleGridError):
        forward(SparseVoxelGrid(DESK_GRID), SparseVoxelGrid(other), init_weights(0, SMALL_CHANNELS))


def test_stride_schedules_must_agree():
    weights = init_weights(0, SMALL_CHANNELS, collective_strides=(1, 1, 2, 2))
    grid = voxelize(desk_cloud(6), DESK_GRID)
    with pytest.raises(IncompatibleGridError):
        forward(grid, grid, weights)


def test_weight_file(tmp_path):
    weights = init_weights(9, SMALL_CHANNELS)
    path = tmp_path / 'weights.bin'
    save_weights(weights, path)
    assert path.read_bytes()[:4] == b'S2SW'
    assert load_weights(path) == weights


def test_bad_weight_files(tmp_path):
    path = tmp_path / 'weights.bin'
    save_weights(init_weights(9, SMALL_CHANNELS), path)
    data = path.read_bytes()
    bad = tmp_path / 'bad.bin'
    bad.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(WeightFileError) as e:
        load_weights(bad)
    assert e.value.offset == 0
    bad.write_bytes(data[:-10])
    with pytest.raises(WeightFileError, match='truncated'):
        load_weights(bad)
    bad.write_bytes(data + b'\x00' * 4)
    with pytest.raises(WeightFileError) as e:
        load_weights(bad)
    assert e.value.offset == len(data)


def test_bev_dump(tmp_path):
    bev = forward(voxelize(desk_cloud(7), DESK_GRID), SparseVoxelGrid(DESK_GRID), init_weights(1, SMALL_CHANNELS))
    path = tmp_path / 'bev.bin'
    save_bev(bev, path)
    data = path.read_bytes()
    assert len(data) == 16 + 4 * 8 * 8 * 8
    assert load_bev(path) == bev
    path.write_bytes(data[:-4])
    with pytest.raises(BevFileError):
        load_bev(path)


def test_scatter_ignores_sender_order():
    streams = [center_features(voxelize(desk_cloud(seed, 200), DESK_GRID)) for seed in (11, 12, 13)]
    fused = [reduce(scatter, order) for order in permutations(streams)]
    assert all(f == fused[0] for f in fused)
    assert set(fused[0].keys.tolist()) == set().union(*(s.keys.tolist() for s in streams))


def test_to_bev_single_site():
    tensor = SparseTensor((4, 5, 2), [[2, 3, 0]], [[1.0, 2.0, 3.0]])
    bev = to_bev(tensor)
    assert bev.shape == (4, 5, 6)
    assert np.count_nonzero(bev.data.any(axis=2)) == 1
    assert bev.data[2, 3].tolist() == [1.0, 2.0, 3.0, 0.0, 0.0, 0.0]


def test_to_bev_empty():
    bev = to_bev(SparseTensor.empty((3, 3, 2), 4))
    assert bev.shape == (3, 3, 8)
    assert not bev.data.any()


@settings(max_examples=50, deadline=None)
@given(tensors(dims=(3, 4, 5), width=2))
def test_to_bev_folds_height_into_channels(tensor):
    bev = to_bev(tensor).data
    dense = tensor.to_dense()
    for x, y, z, c in np.ndindex(dense.shape):
        assert bev[x, y, z * tensor.width + c] == dense[x, y, z, c]


def test_identity_block():
    layer = Layer(ConvParams.identity(3), NormParams.identity(3))
    block = BlockWeights(layer, layer, layer)
    rng = np.random.default_rng(8)
    coords = np.argwhere(rng.random((6, 6, 6)) < 0.3)
    tensor = SparseTensor((6, 6, 6), coords, rng.uniform(0, 2, (len(coords), 3)).astype(np.float32))
    assert conv_block(tensor, block) == tensor


def test_block_is_its_three_layers():
    block = init_weights(3, SMALL_CHANNELS).local_blocks[1]
    assert block.entry.conv.mode == ConvMode.STRIDED
    rng = np.random.default_rng(9)
    coords = np.argwhere(rng.random((6, 6, 6)) < 0.3)
    features = rng.standard_normal((len(coords), block.entry.conv.in_channels)).astype(np.float32)
    tensor = SparseTensor((6, 6, 6), coords, features)
    expected = batchnorm_relu(sparse_conv(tensor, block.entry.conv), block.entry.norm)
    for layer in (block.subm1, block.subm2):
        expected = batchnorm_relu(submanifold_conv(expected, layer.conv), layer.norm)
    out = conv_block(tensor, block)
    assert out.dims == (3, 3, 3)
    assert out == expected


def test_empty_block_input():
    block = init_weights(3, SMALL_CHANNELS).local_blocks[1]
    out = conv_block(SparseTensor.empty((6, 6, 6), block.entry.conv.in_channels), block)
    assert len(out) == 0
    assert out.dims == (3, 3, 3)
