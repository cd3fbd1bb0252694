import dataclasses
import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from eqvx.exceptions import InvalidArgumentError
from eqvx.pointcloud import PointCloud
from eqvx.utils import map_in_threads
from eqvx.xform import TransformGroup, apply_to_points

logger = logging.getLogger(__name__)

_CELL_EPS = 1e-9

Vec3 = Tuple[float, float, float]
Shape3 = Tuple[int, int, int]
# (x_min, y_min, z_min, x_max, y_max, z_max)
Range6 = Tuple[float, float, float, float, float, float]


@dataclasses.dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    '''
    A coordinate-indexed sparse 3D feature grid.

    Entries are kept in ascending lexicographic (iz, iy, ix) order, which is
    also ascending order of the linear key ``(iz * ny + iy) * nx + ix``.

    Args:
        voxel_size: (dx, dy, dz) in meters.
        origin: Minimum corner (x0, y0, z0) of the grid in meters.
        spatial_shape: (nx, ny, nz).
        coords: (K, 3) integer coordinates (ix, iy, iz).
        features: (K, C) features.
        counts: Optional (K,) number of points that fell into each voxel.
        action_index: Index of the group action the tensor was produced under, if any.
    '''
    voxel_size: Vec3
    origin: Vec3
    spatial_shape: Shape3
    coords: np.ndarray
    features: np.ndarray
    counts: Optional[np.ndarray] = None
    action_index: Optional[int] = None

    def __post_init__(self):
        shape = tuple(int(n) for n in self.spatial_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise InvalidArgumentError(f'spatial_shape must be three positive integers, got {shape}')
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise InvalidArgumentError(
                f'features shape {features.shape} does not match {coords.shape[0]} coordinates'
            )
        if np.any(coords < 0) or np.any(coords >= np.asarray(shape)):
            raise InvalidArgumentError('voxel coordinates out of spatial_shape bounds')
        if not np.all(np.isfinite(features)):
            raise InvalidArgumentError('voxel features must be finite')

        keys = _linear_keys(coords, shape)
        order = np.argsort(keys, kind='stable')
        keys = keys[order]
        if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
            raise InvalidArgumentError('duplicate voxel coordinates')

        counts = self.counts
        if counts is not None:
            counts = np.asarray(counts, dtype=np.int64)[order]

        object.__setattr__(self, 'spatial_shape', shape)
        object.__setattr__(self, 'voxel_size', tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, 'origin', tuple(float(v) for v in self.origin))
        object.__setattr__(self, 'coords', coords[order])
        object.__setattr__(self, 'features', features[order])
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, '_keys', keys)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self._keys  # type: ignore[attr-defined]

    def voxel_centers(self) -> np.ndarray:
        'Returns the (K, 3) world coordinates of the occupied voxel centers.'
        return np.asarray(self.origin) + (self.coords + 0.5) * np.asarray(self.voxel_size)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        '''
        Returns the entry index of every queried coordinate, or -1 where the
        voxel is empty or outside the grid.
        '''
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords >= 0) & (coords < np.asarray(self.spatial_shape)), axis=1)
        result = np.full(coords.shape[0], -1, dtype=np.int64)
        if not len(self) or not np.any(inside):
            return result
        query = _linear_keys(coords[inside], self.spatial_shape)
        pos = np.searchsorted(self.keys, query)
        pos_clipped = np.minimum(pos, len(self) - 1)
        found = self.keys[pos_clipped] == query
        result[np.flatnonzero(inside)[found]] = pos_clipped[found]
        return result

    def same_geometry(self, other: 'SparseVoxelTensor') -> bool:
        return (np.allclose(self.voxel_size, other.voxel_size, rtol=0, atol=1e-12)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
                and self.spatial_shape == other.spatial_shape
                and self.num_channels == other.num_channels)

    def with_features(self, features: np.ndarray) -> 'SparseVoxelTensor':
        return dataclasses.replace(self, features=features)

    def to_dense(self) -> np.ndarray:
        'Returns an (nx, ny, nz, C) array, zero where empty.'
        dense = np.zeros(self.spatial_shape + (self.num_channels,), dtype=self.features.dtype)
        dense[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.features
        return dense

    @staticmethod
    def from_dense(dense: np.ndarray, occupied: np.ndarray, voxel_size: Vec3,
                   origin: Vec3=(0.0, 0.0, 0.0)) -> 'SparseVoxelTensor':
        '''
        Builds a sparse tensor from an (nx, ny, nz, C) array and a boolean
        occupancy mask of shape (nx, ny, nz).
        '''
        coords = np.argwhere(occupied)
        return SparseVoxelTensor(voxel_size, origin, dense.shape[:3], coords,
                                 dense[coords[:, 0], coords[:, 1], coords[:, 2]])


def _linear_keys(coords: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    nx, ny, _ = shape
    return (coords[:, 2] * ny + coords[:, 1]) * nx + coords[:, 0]


@dataclasses.dataclass(frozen=True, eq=False)
class EquivariantSet:
    '''
    One tensor per group action; channel i was produced under ``group[i]``.
    Channels are SparseVoxelTensor or BevMap instances.
    '''
    group: TransformGroup
    channels: Tuple

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != self.group.order:
            raise InvalidArgumentError(
                f'{len(channels)} channels given for a group of order {self.group.order}'
            )
        object.__setattr__(self, 'channels', channels)

    def __len__(self) -> int:
        return len(self.channels)

    def __getitem__(self, index: int):
        return self.channels[index]

    def permuted(self, perm: Sequence[int]) -> 'EquivariantSet':
        'Returns the set whose channel i is channel perm[i] of this one.'
        return EquivariantSet(self.group, tuple(self.channels[p] for p in perm))


def _check_geometry(voxel_size: Sequence[float], point_range: Sequence[float]):
    if len(voxel_size) != 3 or len(point_range) != 6:
        raise InvalidArgumentError('voxel_size needs 3 values and range needs 6')
    if min(voxel_size) <= 0:
        raise InvalidArgumentError(f'voxel_size must be strictly positive, got {tuple(voxel_size)}')
    lo, hi = np.asarray(point_range[:3]), np.asarray(point_range[3:])
    if np.any(lo >= hi):
        raise InvalidArgumentError(f'empty range {tuple(point_range)}')


def grid_shape(voxel_size: Sequence[float], point_range: Sequence[float]) -> Shape3:
    '''
    Number of voxels per axis: enough to cover the range, at least one. A
    trailing partial voxel counts as a whole one; points past the range in it
    are still discarded by ``voxelize``.
    '''
    _check_geometry(voxel_size, point_range)
    extent = np.asarray(point_range[3:], dtype=np.float64) - np.asarray(point_range[:3], dtype=np.float64)
    cells = extent / np.asarray(voxel_size, dtype=np.float64)
    # ratios within rounding noise of an integer are taken as exact
    shape = np.maximum(np.ceil(cells - _CELL_EPS), 1).astype(np.int64)
    return (int(shape[0]), int(shape[1]), int(shape[2]))


def default_range(half_extent: float, z_range: Tuple[float, float], voxel_size: Vec3,
                    stride_product: int=4) -> Range6:
    '''
    Returns a range that is symmetric about the sensor in x and y, with
    x/y voxel counts congruent to 1 modulo ``stride_product``. Such a range
    keeps the voxel lattice symmetric through strided layers whose strides
    multiply to ``stride_product``.

    Args:
        half_extent: Requested half width of the x/y range; rounded up.
        z_range: (z_min, z_max).
        voxel_size: (dx, dy, dz); dx must equal dy.
        stride_product: Product of the x/y strides of the backbone.
    '''
    if voxel_size[0] != voxel_size[1]:
        raise InvalidArgumentError('symmetric ranges need square voxels in x/y')
    n = int(math.ceil(2 * half_extent / voxel_size[0]))
    while n % stride_product != 1 % stride_product:
        n += 1
    half = n * voxel_size[0] / 2
    return (-half, -half, float(z_range[0]), half, half, float(z_range[1]))


def voxelize(points: PointCloud, voxel_size: Vec3, point_range: Range6,
             dtype=np.float64) -> SparseVoxelTensor:
    '''
    Converts a point cloud into a sparse voxel tensor whose features are the
    per-voxel mean of (x, y, z, point features).

    A point at x lands in voxel floor((x - x_min) / dx). Points outside
    [min, max) on any axis are discarded.

    Args:
        points: The input cloud.
        voxel_size: (dx, dy, dz) in meters.
        point_range: (x_min, y_min, z_min, x_max, y_max, z_max).
        dtype: Feature dtype of the result.

    Raises:
        InvalidArgumentError: for non-positive voxel sizes or an empty range.
    '''
    shape = grid_shape(voxel_size, point_range)
    lo = np.asarray(point_range[:3], dtype=np.float64)
    hi = np.asarray(point_range[3:], dtype=np.float64)
    size = np.asarray(voxel_size, dtype=np.float64)
    width = 3 + points.num_features

    coords = np.floor((points.xyz - lo) / size).astype(np.int64)
    inside = np.all((points.xyz >= lo) & (points.xyz < hi), axis=1)
    inside &= np.all((coords >= 0) & (coords < np.asarray(shape)), axis=1)
    dropped = len(points) - int(inside.sum())
    if dropped:
        logger.debug('voxelize: %d of %d points outside range', dropped, len(points))

    if not np.any(inside):
        return SparseVoxelTensor(tuple(size), tuple(lo), shape,
                                 np.zeros((0, 3), dtype=np.int64),
                                 np.zeros((0, width), dtype=dtype),
                                 np.zeros(0, dtype=np.int64))

    coords = coords[inside]
    values = np.hstack([points.xyz[inside], points.features[inside]])
    keys = _linear_keys(coords, shape)

    order = np.argsort(keys, kind='stable')
    keys, coords, values = keys[order], coords[order], values[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    counts = np.diff(np.r_[starts, len(keys)])
    means = np.add.reduceat(values, starts, axis=0) / counts[:, None]

    return SparseVoxelTensor(tuple(size), tuple(lo), shape, coords[starts],
                             means.astype(dtype), counts)


def transform_and_voxelize(points: PointCloud, group: TransformGroup, voxel_size: Vec3,
                           point_range: Range6, dtype=np.float64,
                           threads: int=1) -> EquivariantSet:
    '''
    Voxelizes the cloud once per group action: channel i is
    ``voxelize(apply_to_points(group[i], points))``.
    '''
    grid_shape(voxel_size, point_range)

    def encode(index: int) -> SparseVoxelTensor:
        tensor = voxelize(apply_to_points(group[index], points), voxel_size, point_range, dtype)
        return dataclasses.replace(tensor, action_index=index)

    channels = map_in_threads(encode, list(range(group.order)), threads)
    logger.debug('transform_and_voxelize: %s occupied voxels per channel',
                 [len(c) for c in channels])
    return EquivariantSet(group, tuple(channels))


def channel_residual(a: SparseVoxelTensor, b: SparseVoxelTensor) -> float:
    '''
    Largest absolute feature difference between two tensors on the same
    grid; a voxel present in only one of them counts with its full magnitude.
    '''
    if not a.same_geometry(b):
        raise InvalidArgumentError('tensors do not share voxel geometry')
    if not len(a) and not len(b):
        return 0.0
    residual = 0.0
    in_b = b.lookup(a.coords)
    matched = in_b >= 0
    if np.any(matched):
        diff = a.features[matched].astype(np.float64) - b.features[in_b[matched]].astype(np.float64)
        residual = max(residual, float(np.max(np.abs(diff))))
    if np.any(~matched):
        residual = max(residual, float(np.max(np.abs(a.features[~matched]))))
    missing_in_a = a.lookup(b.coords) < 0
    if np.any(missing_in_a):
        residual = max(residual, float(np.max(np.abs(b.features[missing_in_a]))))
    return residual


