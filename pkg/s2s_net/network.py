"""
Dual-backbone fusion network.

The local backbone sees the ego voxel grid, the collective backbone sees the merged grids shared by other
vehicles. Both run four convolution blocks with the same stride schedule. After every block the two
streams are fused with the scatter operation, and the fused tensor feeds the next local block only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from logbook import Logger

from .base import CENTER_FEATURE_WIDTH, DEFAULT_CHANNELS, DEFAULT_STRIDES, ConvMode
from .errors import BevFileError, IncompatibleGridError, ShapeError, WeightFileError
from .grid import SparseVoxelGrid, center_features
from .sparse_nn import ConvParams, NormParams, SparseTensor, batchnorm_relu, conv, conv_output_dims


logger = Logger(__name__)

WEIGHTS_MAGIC = b'S2SW'
WEIGHTS_VERSION = 1
BEV_MAGIC = b'S2SB'


def scatter(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Union of two sparse tensors, taking the element-wise maximum where both have a site."""
    if a.dims != b.dims:
        raise ShapeError(f'Cannot scatter tensors with dims {a.dims} and {b.dims}')
    if a.width != b.width:
        raise ShapeError(f'Cannot scatter tensors of width {a.width} and {b.width}')
    if not len(b):
        return a
    if not len(a):
        return b
    keys, inverse = np.unique(np.concatenate([a.keys, b.keys]), return_inverse=True)
    fused = np.full((len(keys), a.width), -np.inf, dtype=np.float32)
    np.maximum.at(fused, inverse.reshape(-1), np.concatenate([a.features, b.features]))
    coords = np.stack(np.unravel_index(keys, a.dims), axis=1)
    return SparseTensor(a.dims, coords, fused)


@dataclass(frozen=True, eq=False)
class Layer:
    conv: ConvParams
    norm: NormParams

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Layer):
            return NotImplemented
        return self.conv == other.conv and self.norm == other.norm

    def __call__(self, tensor: SparseTensor) -> SparseTensor:
        return batchnorm_relu(conv(tensor, self.conv), self.norm)


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """A sparse convolution, strided or not, followed by two submanifold convolutions."""

    entry: Layer
    subm1: Layer
    subm2: Layer

    def __post_init__(self):
        if self.subm1.conv.mode != ConvMode.SUBMANIFOLD or self.subm2.conv.mode != ConvMode.SUBMANIFOLD:
            raise ShapeError('The last two layers of a block must be submanifold convolutions')
        chain = [self.entry.conv.in_channels]
        for layer in self.layers:
            if layer.conv.in_channels != chain[-1] or layer.norm.width != layer.conv.out_channels:
                raise ShapeError(f'Broken channel chain in block: {chain} then {layer.conv.kernel.shape[3:]}')
            chain.append(layer.conv.out_channels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BlockWeights):
            return NotImplemented
        return self.layers == other.layers

    @property
    def layers(self) -> tuple[Layer, Layer, Layer]:
        return (self.entry, self.subm1, self.subm2)

    @property
    def stride(self) -> tuple[int, int, int]:
        return self.entry.conv.stride


def conv_block(tensor: SparseTensor, weights: BlockWeights) -> SparseTensor:
    for layer in weights.layers:
        tensor = layer(tensor)
    return tensor


@dataclass(frozen=True, eq=False)
class ModelWeights:
    local_blocks: tuple[BlockWeights, ...]
    collective_blocks: tuple[BlockWeights, ...]
    final: Layer

    def __post_init__(self):
        if len(self.local_blocks) != len(self.collective_blocks):
            raise ShapeError('Both backbones need the same number of blocks')
        for lb, cb in zip(self.local_blocks, self.collective_blocks):
            if lb.entry.conv.out_channels != cb.entry.conv.out_channels:
                raise ShapeError('Both backbones must share the channel plan')

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (
            self.local_blocks == other.local_blocks
            and self.collective_blocks == other.collective_blocks
            and self.final == other.final
        )

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(b.entry.conv.out_channels for b in self.local_blocks)

    @property
    def in_channels(self) -> int:
        return self.local_blocks[0].entry.conv.in_channels

    @property
    def local_strides(self) -> tuple[int, ...]:
        return tuple(b.stride[0] for b in self.local_blocks)

    @property
    def collective_strides(self) -> tuple[int, ...]:
        return tuple(b.stride[0] for b in self.collective_blocks)

    @property
    def final_channels(self) -> int:
        return self.final.conv.out_channels

    def all_layers(self) -> list[Layer]:
        layers = [layer for b in self.local_blocks for layer in b.layers]
        layers.extend(layer for b in self.collective_blocks for layer in b.layers)
        layers.append(self.final)
        return layers


@dataclass(frozen=True, eq=False)
class BevFeatureMap:
    # (nx, ny, nz * C), channel block z * C .. (z + 1) * C holds height slice z
    data: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BevFeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def tobytes(self) -> bytes:
        return self.data.astype('<f4').tobytes()


def to_bev(tensor: SparseTensor) -> BevFeatureMap:
    nx, ny, nz = tensor.dims
    # Densify to (x, y, z, C) then fold z into channels
    return BevFeatureMap(tensor.to_dense().reshape(nx, ny, nz * tensor.width))


# Weight construction


def _random_layer(rng: np.random.Generator, c_in: int, c_out: int, stride: int, mode: ConvMode) -> Layer:
    fan_in = 27 * c_in
    kernel = rng.standard_normal((3, 3, 3, c_in, c_out)) * np.sqrt(2.0 / fan_in)
    norm = NormParams(
        gamma=rng.uniform(0.5, 1.5, c_out),
        beta=rng.normal(0.0, 0.1, c_out),
        running_mean=rng.normal(0.0, 0.1, c_out),
        running_var=rng.uniform(0.5, 1.5, c_out),
    )
    return Layer(ConvParams(kernel, (stride,) * 3, mode), norm)


def _layer_mode(stride: int) -> ConvMode:
    # A unit-stride entry layer stays submanifold so it does not dilate the input
    return ConvMode.SUBMANIFOLD if stride == 1 else ConvMode.STRIDED


def _random_backbone(rng: np.random.Generator, in_channels: int, channels: Sequence[int], strides: Sequence[int]):
    blocks = []
    c_in = in_channels
    for c_out, stride in zip(channels, strides):
        entry = _random_layer(rng, c_in, c_out, stride, _layer_mode(stride))
        subm1 = _random_layer(rng, c_out, c_out, 1, ConvMode.SUBMANIFOLD)
        subm2 = _random_layer(rng, c_out, c_out, 1, ConvMode.SUBMANIFOLD)
        blocks.append(BlockWeights(entry, subm1, subm2))
        c_in = c_out
    return tuple(blocks)


def init_weights(
    seed: int,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    strides: Sequence[int] = DEFAULT_STRIDES,
    collective_strides: Sequence[int] | None = None,
    final_channels: int | None = None,
    in_channels: int = CENTER_FEATURE_WIDTH,
) -> ModelWeights:
    if len(channels) != len(strides) or not channels or any(c < 1 for c in channels):
        raise ShapeError(f'Invalid channel plan {tuple(channels)} for strides {tuple(strides)}')
    collective_strides = strides if collective_strides is None else collective_strides
    if len(collective_strides) != len(channels):
        raise ShapeError('Collective stride schedule must have one stride per block')
    final_channels = channels[-1] if final_channels is None else final_channels
    rng = np.random.default_rng(seed)
    local = _random_backbone(rng, in_channels, channels, strides)
    collective = _random_backbone(rng, in_channels, channels, collective_strides)
    final = _random_layer(rng, channels[-1], final_channels, 1, ConvMode.SUBMANIFOLD)
    logger.debug('Initialized weights with seed {} and channel plan {}', seed, tuple(channels))
    return ModelWeights(local, collective, final)


# Forward pass


def _check_fusion(local: SparseTensor, collective: SparseTensor, stage: int):
    if local.dims != collective.dims:
        raise IncompatibleGridError(
            f'Streams reach different resolutions after block {stage}: {local.dims} vs {collective.dims}'
        )


def backbone_stages(ego: SparseTensor, collective: SparseTensor, weights: ModelWeights) -> list[SparseTensor]:
    """Fused tensor after each block; the last one is the input of the final layer."""
    fused_stages = []
    local_in = ego
    for stage, (lb, cb) in enumerate(zip(weights.local_blocks, weights.collective_blocks), 1):
        local = conv_block(local_in, lb)
        collective = conv_block(collective, cb)
        _check_fusion(local, collective, stage)
        local_in = scatter(local, collective)
        logger.debug('Block {}: {} local + {} collective -> {} fused sites', stage, len(local), len(collective),
                     len(local_in))
        fused_stages.append(local_in)
    return fused_stages


def forward(ego: SparseVoxelGrid, collective: SparseVoxelGrid, weights: ModelWeights) -> BevFeatureMap:
    if ego.config != collective.config:
        raise IncompatibleGridError(f'Ego grid {ego.config} and collective grid {collective.config} differ')
    stages = backbone_stages(center_features(ego), center_features(collective), weights)
    return to_bev(weights.final(stages[-1]))


def bev_shape(dims: Sequence[int], weights: ModelWeights) -> tuple[int, int, int]:
    for s in weights.local_strides:
        dims = conv_output_dims(dims, (s, s, s))
    nx, ny, nz = dims
    return (nx, ny, nz * weights.final_channels)


# Weight file: magic, version, plan, then every array in declaration order, little-endian


def _layer_arrays(layer: Layer) -> list[np.ndarray]:
    return [layer.conv.kernel, *(getattr(layer.norm, n) for n in NormParams.field_names())]


def save_weights(weights: ModelWeights, path: Path):
    n_blocks = len(weights.channels)
    plan = [weights.in_channels, n_blocks, *weights.channels, *weights.local_strides, *weights.collective_strides,
            weights.final_channels]
    with open(path, 'wb') as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack('<I', WEIGHTS_VERSION))
        f.write(struct.pack(f'<{len(plan)}I', *plan))
        for layer in weights.all_layers():
            for array in _layer_arrays(layer):
                f.write(array.astype('<f4').tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise WeightFileError(f'Weight file truncated while reading {what}', self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self, count: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f'<{count}I', self.take(4 * count, what))

    def f32(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        size = int(np.prod(shape))
        return np.frombuffer(self.take(4 * size, what), dtype='<f4').reshape(shape).astype(np.float32)


def _read_layer(reader: _Reader, c_in: int, c_out: int, stride: int, mode: ConvMode, name: str) -> Layer:
    kernel = reader.f32((3, 3, 3, c_in, c_out), f'{name} kernel')
    norm = NormParams(*(reader.f32((c_out,), f'{name} {n}') for n in NormParams.field_names()))
    return Layer(ConvParams(kernel, (stride,) * 3, mode), norm)


def _read_backbone(reader: _Reader, in_channels: int, channels, strides, name: str):
    blocks = []
    c_in = in_channels
    for i, (c_out, stride) in enumerate(zip(channels, strides), 1):
        entry = _read_layer(reader, c_in, c_out, stride, _layer_mode(stride), f'{name} block {i} entry')
        subm1 = _read_layer(reader, c_out, c_out, 1, ConvMode.SUBMANIFOLD, f'{name} block {i} subm1')
        subm2 = _read_layer(reader, c_out, c_out, 1, ConvMode.SUBMANIFOLD, f'{name} block {i} subm2')
        blocks.append(BlockWeights(entry, subm1, subm2))
        c_in = c_out
    return tuple(blocks)


def load_weights(path: Path) -> ModelWeights:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, 'magic') != WEIGHTS_MAGIC:
        raise WeightFileError('Not a weight file: bad magic bytes', 0)
    (version,) = reader.u32(1, 'version')
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f'Unsupported weight file version {version}', 4)
    in_channels, n_blocks = reader.u32(2, 'channel plan')
    if not 0 < n_blocks <= 64:
        raise WeightFileError(f'Implausible block count {n_blocks}', reader.offset - 4)
    channels = reader.u32(n_blocks, 'channel plan')
    strides = reader.u32(n_blocks, 'local strides')
    collective_strides = reader.u32(n_blocks, 'collective strides')
    (final_channels,) = reader.u32(1, 'final channels')
    if any(s < 1 for s in (*strides, *collective_strides)):
        raise WeightFileError('Stride must be at least 1', reader.offset)
    try:
        local = _read_backbone(reader, in_channels, channels, strides, 'local')
        collective = _read_backbone(reader, in_channels, channels, collective_strides, 'collective')
        final = _read_layer(reader, channels[-1], final_channels, 1, ConvMode.SUBMANIFOLD, 'final')
        weights = ModelWeights(local, collective, final)
    except WeightFileError:
        raise
    except Exception as e:
        raise WeightFileError(f'Invalid weights: {e}', reader.offset) from e
    if reader.offset != len(reader.data):
        raise WeightFileError('Trailing bytes after the last layer', reader.offset)
    return weights


# BEV dump: magic, nx, ny, channels as u32, then the map as f32, little-endian


def save_bev(bev: BevFeatureMap, path: Path):
    nx, ny, channels = bev.shape
    with open(path, 'wb') as f:
        f.write(BEV_MAGIC)
        f.write(struct.pack('<3I', nx, ny, channels))
        f.write(bev.tobytes())


def load_bev(path: Path) -> BevFeatureMap:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != BEV_MAGIC:
        raise BevFileError('Not a BEV dump: bad header', 0)
    nx, ny, channels = struct.unpack_from('<3I', data, 4)
    expected = 16 + 4 * nx * ny * channels
    if len(data) != expected:
        raise BevFileError(f'BEV dump should be {expected} bytes, got {len(data)}', min(len(data), expected))
    array = np.frombuffer(data, dtype='<f4', offset=16).reshape(nx, ny, channels).astype(np.float32)
    return BevFeatureMap(array)
