"""
Point clouds, grid geometry and coordinate-only sparse voxel grids.

A grid only stores which cells hold at least one point. Cells are half-open, ``[low, high)`` on every axis,
so a point lying exactly on the upper boundary of the grid is outside it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from logbook import Logger

from .errors import CloudFileError, ConfigurationError, GridRangeError, IncompatibleGridError


logger = Logger(__name__)

Vec3 = tuple[float, float, float]
Int3 = tuple[int, int, int]


def _as_f32(values: Iterable[float]) -> Vec3:
    x, y, z = (float(np.float32(v)) for v in values)
    return (x, y, z)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(points).all():
            raise ConfigurationError('Point cloud contains non-finite coordinates')
        object.__setattr__(self, 'points', _readonly(points))
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(intensity) != len(points):
                raise ConfigurationError(f'Got {len(intensity)} intensity values for {len(points)} points')
            object.__setattr__(self, 'intensity', _readonly(intensity))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.empty((0, 3)))


def grid_dims_check(config: GridConfig) -> Int3:
    if config.extent is not None:
        for n, v, e in zip(config.dims, config.voxel_size, config.extent):
            if abs(n * v - e) >= v:
                raise ConfigurationError(
                    f'Grid dims {config.dims} with voxel size {config.voxel_size} do not cover extent {config.extent}'
                )
    return config.dims


@dataclass(frozen=True)
class GridConfig:
    """
    Geometry of a uniform voxel grid.

    Origin and voxel size are kept at float32 precision, the precision they travel with on the wire,
    so that a receiver rebuilds exactly the same geometry.
    """

    origin: Vec3
    voxel_size: Vec3
    dims: Int3
    # Extent the user asked for, if the grid was built from one
    extent: Vec3 | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ConfigurationError('Grid origin, voxel size and dims must have 3 components')
        if not all(np.isfinite(v) and v > 0 for v in self.voxel_size):
            raise ConfigurationError(f'Voxel size must be positive, got {self.voxel_size}')
        if not all(np.isfinite(v) for v in self.origin):
            raise ConfigurationError(f'Grid origin must be finite, got {self.origin}')
        if not all(int(n) == n and n >= 1 for n in self.dims):
            raise ConfigurationError(f'Grid dims must be positive integers, got {self.dims}')
        object.__setattr__(self, 'origin', _as_f32(self.origin))
        object.__setattr__(self, 'voxel_size', _as_f32(self.voxel_size))
        object.__setattr__(self, 'dims', tuple(int(n) for n in self.dims))
        if self.extent is not None:
            object.__setattr__(self, 'extent', tuple(float(e) for e in self.extent))

    @classmethod
    def from_extent(cls, origin: Sequence[float], voxel_size: Sequence[float], extent: Sequence[float]) -> GridConfig:
        if len(voxel_size) != 3 or len(extent) != 3:
            raise ConfigurationError('Voxel size and extent must have 3 components')
        if any(v <= 0 for v in voxel_size):
            raise ConfigurationError(f'Voxel size must be positive, got {tuple(voxel_size)}')
        if any(e <= 0 for e in extent):
            raise ConfigurationError(f'Grid extent must be positive, got {tuple(extent)}')
        dims = tuple(max(1, int(round(e / v))) for e, v in zip(extent, voxel_size))
        config = cls(tuple(origin), tuple(voxel_size), dims, extent=tuple(extent))  # type: ignore[arg-type]
        grid_dims_check(config)
        return config

    @property
    def size(self) -> Vec3:
        x, y, z = (n * v for n, v in zip(self.dims, self.voxel_size))
        return (x, y, z)

    @property
    def origin_array(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    @property
    def voxel_array(self) -> np.ndarray:
        return np.array(self.voxel_size, dtype=np.float64)

    @property
    def dims_array(self) -> np.ndarray:
        return np.array(self.dims, dtype=np.int64)


FULL_SCALE_GRID = GridConfig.from_extent((-140.0, -40.0, -4.0), (0.05, 0.05, 0.10), (280.0, 80.0, 4.0))
# 64 x 64 x 8 cells of 0.4 m around the ego sensor, the ground 1.9 m below it falls in z cell 1
DESK_GRID = GridConfig.from_extent((-12.8, -12.8, -2.4), (0.4, 0.4, 0.4), (25.6, 25.6, 3.2))


def linear_keys(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Row-major linear index of each coordinate; sorting by key is sorting by (x, y, z)."""
    if not len(coords):
        return np.empty(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(coords.T.astype(np.int64)), tuple(dims)).astype(np.int64)


def canonical_coords(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Deduplicate and sort coordinates lexicographically."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    keys = np.unique(linear_keys(coords, dims))
    return np.stack(np.unravel_index(keys, tuple(dims)), axis=1).astype(np.int64).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    config: GridConfig
    coords: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) and ((coords < 0).any() or (coords >= self.config.dims_array).any()):
            raise GridRangeError(f'Voxel coordinates outside grid dims {self.config.dims}')
        object.__setattr__(self, 'coords', _readonly(canonical_coords(coords, self.config.dims)))

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVoxelGrid):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.coords, other.coords)

    @property
    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.config.dims)

    def coord_set(self) -> set[Int3]:
        return {(int(x), int(y), int(z)) for x, y, z in self.coords}

    def centers(self) -> np.ndarray:
        return self.config.origin_array + (self.coords + 0.5) * self.config.voxel_array


class VoxelizeResult(NamedTuple):
    grid: SparseVoxelGrid
    dropped: int


def quantize(points: np.ndarray, config: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Return integer cells of ``points`` and the mask of points falling inside the grid.

    Cells are computed with the float32 origin and voxel size that a receiver reads from the message header,
    not with the nominal values. For example, with 0.05 m voxels starting at 0, a point at exactly x = 0.05
    lands in cell 0, because float32(0.05) is slightly above 0.05.
    """
    cells = np.floor((points - config.origin_array) / config.voxel_array).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < config.dims_array), axis=1)
    return cells, inside


def voxelize_with_stats(cloud: PointCloud, config: GridConfig) -> VoxelizeResult:
    cells, inside = quantize(cloud.points, config)
    dropped = int(len(cells) - inside.sum())
    grid = SparseVoxelGrid(config, cells[inside])
    logger.debug('Voxelized {} points into {} voxels, {} dropped', len(cloud), len(grid), dropped)
    return VoxelizeResult(grid, dropped)


def voxelize(cloud: PointCloud, config: GridConfig) -> SparseVoxelGrid:
    return voxelize_with_stats(cloud, config).grid


def voxel_center(coord: Sequence[int], config: GridConfig) -> Vec3:
    if len(coord) != 3 or any(not 0 <= c < n for c, n in zip(coord, config.dims)):
        raise GridRangeError(f'Voxel {tuple(coord)} is outside grid dims {config.dims}')
    x, y, z = (o + (c + 0.5) * v for o, c, v in zip(config.origin, coord, config.voxel_size))
    return (x, y, z)


def center_features(grid: SparseVoxelGrid):
    # Imported here, the engine module depends on this one
    from .sparse_nn import SparseTensor

    return SparseTensor(grid.config.dims, grid.coords, grid.centers().astype(np.float32))


def merge_grids(grids: Sequence[SparseVoxelGrid]) -> SparseVoxelGrid:
    if not grids:
        raise IncompatibleGridError('Cannot merge an empty list of grids')
    config = grids[0].config
    for g in grids[1:]:
        if g.config != config:
            raise IncompatibleGridError(f'Cannot merge grid with {g.config} into grid with {config}')
    if len(grids) == 1:
        return grids[0]
    return SparseVoxelGrid(config, np.concatenate([g.coords for g in grids]))


# Point cloud files


def load_xyz(path: Path) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise CloudFileError(f'{path}:{lineno}: expected "x y z", got {line!r}')
            try:
                rows.append(tuple(float(p) for p in parts))
            except ValueError:
                raise CloudFileError(f'{path}:{lineno}: not a float triple: {line!r}') from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def save_xyz(cloud: PointCloud, path: Path):
    np.savetxt(path, cloud.points, fmt='%.6f')


def load_raw_cloud(path: Path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CloudFileError(f'{path}: too short to hold a point count')
    (count,) = struct.unpack_from('<I', data, 0)
    expected = 4 + count * 12
    if len(data) != expected:
        raise CloudFileError(f'{path}: header says {count} points ({expected} bytes), file has {len(data)} bytes')
    points = np.frombuffer(data, dtype='<f4', count=count * 3, offset=4).reshape(-1, 3)
    return PointCloud(points.astype(np.float64))


def save_raw_cloud(cloud: PointCloud, path: Path):
    with open(path, 'wb') as f:
        f.write(struct.pack('<I', len(cloud)))
        f.write(cloud.points.astype('<f4').tobytes())


def load_cloud(path: Path) -> PointCloud:
    path = Path(path)
    if path.suffix == '.xyz':
        return load_xyz(path)
    return load_raw_cloud(path)


def save_cloud(cloud: PointCloud, path: Path):
    path = Path(path)
    if path.suffix == '.xyz':
        save_xyz(cloud, path)
    else:
        save_raw_cloud(cloud, path)
