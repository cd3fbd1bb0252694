'''
Scene-level pooling over the equivariant channels.

Every voxel channel is flattened along height into a BEV map. The maps are
then aligned into the identity frame by sampling channel i at T_i applied to
the identity-frame pixel centres, and combined elementwise.
'''
import dataclasses
import logging
import math
from typing import List, Tuple

import numpy as np

from eqvx.exceptions import InvalidArgumentError
from eqvx.utils import map_in_threads
from eqvx.voxelizer import EquivariantSet, SparseVoxelTensor
from eqvx.xform import TransformAction, apply_to_xy, inverse

logger = logging.getLogger(__name__)

AGGREGATES = ('max', 'mean')


@dataclasses.dataclass(frozen=True, eq=False)
class BevMap:
    '''
    A dense H x W x C raster. Pixel (u, v) is ``data[v, u]`` and its centre
    lies at (x0 + (u + 0.5) * px, y0 + (v + 0.5) * py).
    '''
    data: np.ndarray
    origin: Tuple[float, float]
    pixel_size: Tuple[float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f'BEV data must be H x W x C with positive sizes, got {data.shape}')
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError('BEV values must be finite')
        if min(self.pixel_size) <= 0:
            raise InvalidArgumentError(f'pixel size must be positive, got {self.pixel_size}')
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, 'pixel_size', (float(self.pixel_size[0]), float(self.pixel_size[1])))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]

    def same_geometry(self, other: 'BevMap') -> bool:
        return (self.data.shape == other.data.shape
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
                and np.allclose(self.pixel_size, other.pixel_size, rtol=0, atol=1e-12))

    def with_data(self, data: np.ndarray) -> 'BevMap':
        return BevMap(data, self.origin, self.pixel_size)


@dataclasses.dataclass(frozen=True, eq=False)
class GridPointSet:
    '''
    Ordered query points in the frame of ``group[action_index]``.
    ``points`` is (n, 2) for scene grids and (n, 3) for proposal grids.
    '''
    points: np.ndarray
    action_index: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] not in (2, 3):
            raise InvalidArgumentError(f'grid points must be (n, 2) or (n, 3), got {points.shape}')
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError('grid points must be finite')
        object.__setattr__(self, 'points', points)

    def __len__(self) -> int:
        return self.points.shape[0]


def height_compress(v: SparseVoxelTensor) -> BevMap:
    '''
    Flattens a voxel tensor along z: pixel (ix, iy) holds the features of
    voxel (ix, iy, iz) in channel block iz*C .. (iz+1)*C, zero where empty.
    '''
    nx, ny, nz = v.spatial_shape
    c = v.num_channels
    data = np.zeros((ny, nx, nz * c), dtype=v.features.dtype if c else np.float64)
    if len(v):
        cols = v.coords[:, 2:3] * c + np.arange(c)
        data[v.coords[:, 1:2], v.coords[:, 0:1], cols] = v.features
    return BevMap(data, v.origin[:2], v.voxel_size[:2])


def pixel_centers(bev: BevMap) -> np.ndarray:
    'Returns the (H, W, 2) world coordinates of the pixel centres.'
    u = bev.origin[0] + (np.arange(bev.width) + 0.5) * bev.pixel_size[0]
    v = bev.origin[1] + (np.arange(bev.height) + 0.5) * bev.pixel_size[1]
    xx, yy = np.meshgrid(u, v)
    return np.stack([xx, yy], axis=-1)


def gen_scene_grid(bev: BevMap) -> GridPointSet:
    'One point per pixel centre, row-major (v outer, u inner), in the identity frame.'
    return GridPointSet(pixel_centers(bev).reshape(-1, 2), 0)


def bilinear_sample_many(bev: BevMap, xy: np.ndarray) -> np.ndarray:
    '''
    Bilinear interpolation of the raster at (n, 2) world points, with zero
    padding outside the raster.

    Returns:
        The (n, C) sampled features.
    '''
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    fu = (xy[:, 0] - bev.origin[0]) / bev.pixel_size[0] - 0.5
    fv = (xy[:, 1] - bev.origin[1]) / bev.pixel_size[1] - 0.5
    u0 = np.floor(fu)
    v0 = np.floor(fv)
    a = (fu - u0)[:, None]
    b = (fv - v0)[:, None]
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)

    # one ring of zeros around the raster; indices beyond it are clamped onto it
    padded = np.pad(bev.data, ((1, 1), (1, 1), (0, 0)))
    h, w = bev.height, bev.width

    def tap(v, u):
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        rows = np.where(inside, v + 1, 0)
        cols = np.where(inside, u + 1, 0)
        return padded[rows, cols]

    return ((1 - a) * (1 - b) * tap(v0, u0)
            + a * (1 - b) * tap(v0, u0 + 1)
            + (1 - a) * b * tap(v0 + 1, u0)
            + a * b * tap(v0 + 1, u0 + 1))


def bilinear_sample(bev: BevMap, point) -> np.ndarray:
    'Samples the raster at one (x, y) point; returns a length-C vector.'
    return bilinear_sample_many(bev, np.asarray(point, dtype=np.float64)[:2].reshape(1, 2))[0]


def _check_channels(channels):
    if not channels:
        raise InvalidArgumentError('cannot pool an empty channel set')
    first = channels[0]
    for i, channel in enumerate(channels[1:], start=1):
        if not first.same_geometry(channel):
            raise InvalidArgumentError(f'channel {i} does not share the voxel geometry of channel 0')


def _align(action: TransformAction, compressed: BevMap, grid: np.ndarray) -> np.ndarray:
    if not action.reflect and action.rotation_angle == 0.0:
        return compressed.data
    shape = compressed.data.shape
    return bilinear_sample_many(compressed, apply_to_xy(action, grid)).reshape(shape)


def aligned_maps(channel_set: EquivariantSet, threads: int=1) -> List[BevMap]:
    '''
    Returns the aligned maps A^{T_i}: channel i compressed, then sampled at
    T_i applied to the identity-frame pixel centres.
    '''
    channels = channel_set.channels
    _check_channels(channels)
    base = height_compress(channels[0])
    grid = gen_scene_grid(base).points

    def align(index: int) -> BevMap:
        compressed = base if index == 0 else height_compress(channels[index])
        return base.with_data(_align(channel_set.group[index], compressed, grid))

    return map_in_threads(align, list(range(len(channels))), threads)


def tebev_pool(channel_set: EquivariantSet, aggregate: str='max', threads: int=1) -> BevMap:
    '''
    Aligns every channel into the identity frame and aggregates the aligned
    maps elementwise.

    Args:
        channel_set: Voxel channels sharing one geometry.
        aggregate: 'max' (default) or 'mean'.
        threads: Worker threads for the per-channel alignment.

    Raises:
        InvalidArgumentError: for an empty set, mismatched geometry or an
            unknown aggregate.
    '''
    if aggregate not in AGGREGATES:
        raise InvalidArgumentError(f'aggregate must be one of {AGGREGATES}, got {aggregate!r}')
    channels = channel_set.channels
    _check_channels(channels)
    base = height_compress(channels[0])
    grid = gen_scene_grid(base).points
    group = channel_set.group

    def aligned(index: int) -> np.ndarray:
        compressed = base if index == 0 else height_compress(channels[index])
        return _align(group[index], compressed, grid)

    if aggregate == 'mean':
        total = np.zeros_like(base.data)
        for index in range(len(channels)):
            total = total + aligned(index)
        return base.with_data(total / len(channels))

    # each batch keeps a running max so only one aligned map per thread is alive
    num_batches = max(1, min(threads, len(channels)))
    size = math.ceil(len(channels) / num_batches)
    batches = [list(range(i, min(i + size, len(channels)))) for i in range(0, len(channels), size)]

    def running_max(batch: List[int]) -> np.ndarray:
        result = aligned(batch[0])
        for index in batch[1:]:
            result = np.maximum(result, aligned(index))
        return result

    partials = map_in_threads(running_max, batches, threads)
    pooled = partials[0]
    for partial in partials[1:]:
        pooled = np.maximum(pooled, partial)
    logger.debug('tebev_pool: %d channels -> raster %s', len(channels), pooled.shape)
    return base.with_data(pooled)


def resample_bev(bev: BevMap, action: TransformAction) -> BevMap:
    '''
    Returns the map transformed by ``action``: pixel p takes the value of the
    input at T^-1 applied to p's centre.
    '''
    if not action.reflect and action.rotation_angle == 0.0:
        return bev
    grid = gen_scene_grid(bev).points
    sampled = bilinear_sample_many(bev, apply_to_xy(inverse(action), grid))
    return bev.with_data(sampled.reshape(bev.data.shape))


def interior_mask(bev: BevMap, margin_pixels: float=2.0) -> np.ndarray:
    '''
    Pixels whose centre lies within the disc inscribed in the raster, shrunk
    by ``margin_pixels``. Rotating such a centre about the origin keeps its
    interpolation neighbourhood inside the raster.
    '''
    x_lo, y_lo = bev.origin
    x_hi = x_lo + bev.width * bev.pixel_size[0]
    y_hi = y_lo + bev.height * bev.pixel_size[1]
    radius = min(-x_lo, x_hi, -y_lo, y_hi) - margin_pixels * max(bev.pixel_size)
    centers = pixel_centers(bev)
    return np.hypot(centers[..., 0], centers[..., 1]) <= radius
