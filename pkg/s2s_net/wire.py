"""
Wire format of a shared sparse voxel grid.

Little-endian throughout::

    offset  size  field
    0       12    origin, 3 x f32 (meters)
    12      12    voxel_size, 3 x f32 (meters)
    24      12    dims, 3 x u32
    36      4     count, u32
    40      6*N   coordinates, N x (ix, iy, iz) as u16, sorted by x, then y, then z

The coordinate order makes the encoding a pure function of the grid.
"""

import struct
from dataclasses import dataclass

import numpy as np
from logbook import Logger

from .base import MAX_WIRE_DIM
from .errors import EncodingError, MalformedMessageError, S2SError
from .grid import GridConfig, PointCloud, SparseVoxelGrid


logger = Logger(__name__)

HEADER = struct.Struct('<3f3f3I I')
HEADER_SIZE = HEADER.size
COORD_SIZE = 6
RAW_POINT_SIZE = 12


def message_size(count: int) -> int:
    return HEADER_SIZE + COORD_SIZE * count


def encode(grid: SparseVoxelGrid) -> bytes:
    config = grid.config
    if any(n > MAX_WIRE_DIM for n in config.dims):
        raise EncodingError(f'Grid dims {config.dims} exceed the u16 coordinate range')
    header = HEADER.pack(*config.origin, *config.voxel_size, *config.dims, len(grid))
    # Grid coordinates are already kept in lexicographic order
    payload = grid.coords.astype('<u2').tobytes()
    return header + payload


def decode(data: bytes) -> SparseVoxelGrid:
    if len(data) < HEADER_SIZE:
        raise MalformedMessageError(f'Message of {len(data)} bytes is shorter than the header', len(data))
    fields = HEADER.unpack_from(data, 0)
    origin, voxel_size, dims, count = fields[0:3], fields[3:6], fields[6:9], fields[9]
    expected = message_size(count)
    if len(data) < expected:
        raise MalformedMessageError(f'Payload truncated: header announces {count} voxels', len(data))
    if len(data) > expected:
        raise MalformedMessageError(f'Trailing bytes after {count} voxels', expected)
    try:
        config = GridConfig(origin, voxel_size, dims)
    except S2SError as e:
        raise MalformedMessageError(f'Invalid grid header: {e}', 0) from e
    coords = np.frombuffer(data, dtype='<u2', count=count * 3, offset=HEADER_SIZE).reshape(-1, 3).astype(np.int64)
    bad = np.nonzero((coords >= np.array(dims, dtype=np.int64)).any(axis=1))[0]
    if len(bad):
        raise MalformedMessageError(f'Voxel {tuple(coords[bad[0]])} is outside dims {dims}',
                                    HEADER_SIZE + COORD_SIZE * int(bad[0]))
    grid = SparseVoxelGrid(config, coords)
    if len(grid) != count:
        raise MalformedMessageError(f'Message repeats voxels: {count} announced, {len(grid)} distinct', HEADER_SIZE)
    return grid


@dataclass(frozen=True)
class BandwidthReport:
    n_points: int
    n_voxels: int
    raw_bytes: int
    wire_bytes: int

    @property
    def reduction(self) -> float:
        if not self.raw_bytes:
            return float('-inf') if self.wire_bytes else 0.0
        return 1 - self.wire_bytes / self.raw_bytes


def bandwidth_report(cloud: PointCloud, grid: SparseVoxelGrid) -> BandwidthReport:
    report = BandwidthReport(
        n_points=len(cloud),
        n_voxels=len(grid),
        raw_bytes=RAW_POINT_SIZE * len(cloud),
        wire_bytes=message_size(len(grid)),
    )
    logger.debug('Sharing {} voxels instead of {} points: reduction {:.4f}', len(grid), len(cloud), report.reduction)
    return report
