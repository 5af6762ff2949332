"""
Sparse convolution engine.

Convolutions are driven by a rulebook: for each of the 27 kernel offsets, the list of (input site, output site)
pairs it connects. Output site ``o`` reads input site ``o * stride + k - 1`` through offset ``k``, i.e. a
cross-correlation with zero padding 1.

Tensors keep their sites sorted by (x, y, z) and features are accumulated offset by offset,
so a result never depends on the order sites were inserted in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np
from logbook import Logger

from .base import ConvMode
from .errors import ConfigurationError, GridRangeError, ShapeError
from .grid import Int3, linear_keys


logger = Logger(__name__)

KERNEL_SIZE = 3
PADDING = 1
# Kernel offsets (kx, ky, kz) in {0, 1, 2}^3, in the order the kernel tensor is laid out
OFFSETS = np.array(list(product(range(KERNEL_SIZE), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13
BN_EPSILON = 1e-5


def conv_output_dims(dims: Sequence[int], stride: Sequence[int]) -> Int3:
    x, y, z = ((n + 2 * PADDING - KERNEL_SIZE) // s + 1 for n, s in zip(dims, stride))
    return (x, y, z)


@dataclass(frozen=True, eq=False)
class SparseTensor:
    dims: Int3
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2 or len(features) != len(coords):
            raise ShapeError(f'Expected one feature row per site, got {features.shape} for {len(coords)} sites')
        if len(coords) and ((coords < 0).any() or (coords >= np.array(dims)).any()):
            raise GridRangeError(f'Active sites outside dims {dims}')
        if not np.isfinite(features).all():
            raise ShapeError('Features must be finite')
        keys = linear_keys(coords, dims)
        order = np.argsort(keys, kind='stable')
        keys = keys[order]
        if len(keys) > 1 and (np.diff(keys) == 0).any():
            raise ShapeError('Duplicate active sites')
        coords = coords[order]
        features = np.ascontiguousarray(features[order])
        coords.setflags(write=False)
        features.setflags(write=False)
        keys.setflags(write=False)
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'coords', coords)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, '_keys', keys)

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self._keys  # type: ignore[attr-defined]

    @classmethod
    def empty(cls, dims: Sequence[int], width: int) -> SparseTensor:
        return cls(tuple(dims), np.empty((0, 3), dtype=np.int64), np.empty((0, width), dtype=np.float32))

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: np.ndarray | None = None) -> SparseTensor:
        """Sites are the cells selected by ``mask``, or the cells with any nonzero channel."""
        if mask is None:
            mask = (dense != 0).any(axis=-1)
        coords = np.argwhere(mask)
        return cls(dense.shape[:3], coords, dense[mask])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((*self.dims, self.width), dtype=np.float32)
        if len(self):
            dense[tuple(self.coords.T)] = self.features
        return dense

    def active_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        if len(self):
            mask[tuple(self.coords.T)] = True
        return mask

    def with_features(self, features: np.ndarray) -> SparseTensor:
        return SparseTensor(self.dims, self.coords, features)


@dataclass(frozen=True, eq=False)
class ConvParams:
    kernel: np.ndarray
    stride: Int3 = (1, 1, 1)
    mode: ConvMode = ConvMode.SUBMANIFOLD
    padding: Int3 = (PADDING, PADDING, PADDING)

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=np.float32)
        if kernel.ndim != 5 or kernel.shape[:3] != (KERNEL_SIZE,) * 3:
            raise ConfigurationError(f'Kernel must have shape (3, 3, 3, C_in, C_out), got {kernel.shape}')
        stride = tuple(int(s) for s in self.stride)
        if len(stride) != 3 or any(s < 1 for s in stride):
            raise ConfigurationError(f'Invalid stride {self.stride}')
        mode = ConvMode(self.mode)
        if mode == ConvMode.SUBMANIFOLD and stride != (1, 1, 1):
            raise ConfigurationError('Submanifold convolution requires stride (1, 1, 1)')
        if tuple(self.padding) != (PADDING,) * 3:
            raise ConfigurationError(f'Only padding {PADDING} is supported, got {self.padding}')
        kernel.setflags(write=False)
        object.__setattr__(self, 'kernel', kernel)
        object.__setattr__(self, 'stride', stride)
        object.__setattr__(self, 'mode', mode)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConvParams):
            return NotImplemented
        return self.stride == other.stride and self.mode == other.mode and np.array_equal(self.kernel, other.kernel)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[3]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[4]

    @classmethod
    def identity(cls, channels: int) -> ConvParams:
        kernel = np.zeros((3, 3, 3, channels, channels), dtype=np.float32)
        kernel[1, 1, 1] = np.eye(channels, dtype=np.float32)
        return cls(kernel)


@dataclass(frozen=True, eq=False)
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPSILON

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, n), dtype=np.float32).reshape(-1) for n in self.field_names()]
        if len({len(a) for a in arrays}) != 1:
            raise ConfigurationError(f'Normalization parameters differ in width: {[len(a) for a in arrays]}')
        if (arrays[3] < 0).any():
            raise ConfigurationError('Running variance must be non-negative')
        for name, a in zip(self.field_names(), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NormParams):
            return NotImplemented
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in self.field_names()
        )

    @staticmethod
    def field_names() -> tuple[str, ...]:
        return ('gamma', 'beta', 'running_mean', 'running_var')

    @property
    def width(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, channels: int) -> NormParams:
        # No epsilon, so that it maps non-negative features to themselves exactly
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps=0.0)


@dataclass(frozen=True, eq=False)
class Rulebook:
    out_dims: Int3
    out_coords: np.ndarray
    # pairs[k] = (input site indices, output site indices) for kernel offset k
    pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return sum(len(i) for i, _o in self.pairs)


def _lookup(sorted_keys: np.ndarray, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions of ``keys`` in ``sorted_keys`` and the mask of keys actually present."""
    if not len(sorted_keys):
        return np.zeros(len(keys), dtype=np.int64), np.zeros(len(keys), dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    clipped = np.minimum(pos, len(sorted_keys) - 1)
    return clipped, sorted_keys[clipped] == keys


def _submanifold_rulebook(tensor: SparseTensor) -> Rulebook:
    dims = np.array(tensor.dims)
    pairs = []
    for k in OFFSETS:
        neighbors = tensor.coords + k - PADDING
        inside = np.all((neighbors >= 0) & (neighbors < dims), axis=1)
        out_idx = np.nonzero(inside)[0]
        pos, found = _lookup(tensor.keys, linear_keys(neighbors[inside], tensor.dims))
        pairs.append((pos[found], out_idx[found]))
    return Rulebook(tensor.dims, tensor.coords, pairs)


def _strided_rulebook(tensor: SparseTensor, stride: Int3) -> Rulebook:
    out_dims = conv_output_dims(tensor.dims, stride)
    step = np.array(stride)
    bound = np.array(out_dims)
    targets = []
    for k in OFFSETS:
        shifted = tensor.coords + PADDING - k
        ok = np.all((shifted >= 0) & (shifted % step == 0), axis=1)
        out = shifted // step
        ok &= np.all(out < bound, axis=1)
        in_idx = np.nonzero(ok)[0]
        targets.append((in_idx, linear_keys(out[ok], out_dims)))
    all_keys = np.unique(np.concatenate([keys for _i, keys in targets])) if targets else np.empty(0, np.int64)
    out_coords = np.stack(np.unravel_index(all_keys, out_dims), axis=1).astype(np.int64).reshape(-1, 3)
    pairs = [(in_idx, np.searchsorted(all_keys, keys)) for in_idx, keys in targets]
    return Rulebook(out_dims, out_coords, pairs)


def build_rulebook(tensor: SparseTensor, params: ConvParams) -> Rulebook:
    if params.mode == ConvMode.SUBMANIFOLD:
        return _submanifold_rulebook(tensor)
    return _strided_rulebook(tensor, params.stride)


def apply_rulebook(tensor: SparseTensor, rulebook: Rulebook, params: ConvParams) -> SparseTensor:
    if tensor.width != params.in_channels:
        raise ShapeError(f'Layer expects {params.in_channels} input channels, tensor has {tensor.width}')
    weights = params.kernel.reshape(len(OFFSETS), params.in_channels, params.out_channels)
    out = np.zeros((len(rulebook.out_coords), params.out_channels), dtype=np.float32)
    # Within one offset every output site appears at most once
    for k, (in_idx, out_idx) in enumerate(rulebook.pairs):
        if len(in_idx):
            out[out_idx] += tensor.features[in_idx] @ weights[k]
    return SparseTensor(rulebook.out_dims, rulebook.out_coords, out)


def submanifold_conv(tensor: SparseTensor, params: ConvParams) -> SparseTensor:
    if params.mode != ConvMode.SUBMANIFOLD:
        raise ConfigurationError(f'Expected a submanifold layer, got {params.mode.value}')
    return apply_rulebook(tensor, build_rulebook(tensor, params), params)


def sparse_conv(tensor: SparseTensor, params: ConvParams) -> SparseTensor:
    if params.mode != ConvMode.STRIDED:
        raise ConfigurationError(f'Expected a strided layer, got {params.mode.value}')
    return apply_rulebook(tensor, build_rulebook(tensor, params), params)


def conv(tensor: SparseTensor, params: ConvParams) -> SparseTensor:
    return apply_rulebook(tensor, build_rulebook(tensor, params), params)


def batchnorm_relu(tensor: SparseTensor, params: NormParams) -> SparseTensor:
    if tensor.width != params.width:
        raise ShapeError(f'Normalization has {params.width} channels, tensor has {tensor.width}')
    scale = params.gamma / np.sqrt(params.running_var + np.float32(params.eps))
    y = (tensor.features - params.running_mean) * scale + params.beta
    return tensor.with_features(np.maximum(y, np.float32(0)))


def dense_oracle_conv(dense: np.ndarray, params: ConvParams) -> np.ndarray:
    """Textbook 3D cross-correlation with zero padding 1, for checking the sparse engine on small grids."""
    nx, ny, nz, channels = dense.shape
    if channels != params.in_channels:
        raise ShapeError(f'Layer expects {params.in_channels} input channels, array has {channels}')
    sx, sy, sz = params.stride
    ox, oy, oz = conv_output_dims((nx, ny, nz), params.stride)
    padded = np.pad(dense.astype(np.float64), ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((ox, oy, oz, params.out_channels), dtype=np.float64)
    kernel = params.kernel.astype(np.float64)
    for kx, ky, kz in OFFSETS:
        window = padded[
            kx : kx + sx * (ox - 1) + 1 : sx,
            ky : ky + sy * (oy - 1) + 1 : sy,
            kz : kz + sz * (oz - 1) + 1 : sz,
        ]
        out += window @ kernel[kx, ky, kz]
    return out
