'''
Instance-level pooling over the equivariant channels.

For each proposal a G x G x G lattice of grid points is placed inside the
box and transformed into every channel's frame. Each channel pools voxel
features around its grid points; the per-channel features of one grid point
are fused by self-attention and averaged, which makes the result independent
of how the channels are ordered.
'''
import dataclasses
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import softmax

from eqvx.exceptions import FormatError, InvalidArgumentError
from eqvx.io import read_tensors, write_tensors
from eqvx.pointcloud import Box3D
from eqvx.tebev import GridPointSet
from eqvx.utils import map_in_threads
from eqvx.voxelizer import EquivariantSet, SparseVoxelTensor
from eqvx.xform import TransformGroup, apply_to_xyz

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class VsaConfig:
    '''
    Neighbourhood pooling parameters.

    Args:
        radii: Ball radii in meters, strictly increasing.
        max_neighbors: Neighbour cap per radius.
        mlp_widths: Widths of the per-radius perceptron layers.
        grid_per_axis: G; each proposal gets J = G^3 grid points.
    '''
    radii: Tuple[float, ...] = (0.4, 0.8)
    max_neighbors: Tuple[int, ...] = (16, 16)
    mlp_widths: Tuple[int, ...] = (32, 32)
    grid_per_axis: int = 4

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        max_neighbors = tuple(int(m) for m in np.broadcast_to(self.max_neighbors, (len(radii),)))
        if not radii or min(radii) <= 0:
            raise InvalidArgumentError(f'radii must be positive, got {radii}')
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise InvalidArgumentError(f'radii must be strictly increasing, got {radii}')
        if min(max_neighbors) < 1:
            raise InvalidArgumentError('max_neighbors must be positive')
        if not self.mlp_widths or min(self.mlp_widths) < 1:
            raise InvalidArgumentError('mlp_widths must be positive')
        if self.grid_per_axis < 1:
            raise InvalidArgumentError('grid_per_axis must be positive')
        object.__setattr__(self, 'radii', radii)
        object.__setattr__(self, 'max_neighbors', max_neighbors)
        object.__setattr__(self, 'mlp_widths', tuple(int(w) for w in self.mlp_widths))

    @property
    def num_grid_points(self) -> int:
        return self.grid_per_axis ** 3


@dataclasses.dataclass(frozen=True, eq=False)
class VsaWeights:
    '''
    ``mlps[r]`` is the list of (W, b) perceptron layers for radius r;
    ``projection`` maps the concatenated per-radius features to C.
    '''
    mlps: Tuple[Tuple[Tuple[np.ndarray, np.ndarray], ...], ...]
    projection: np.ndarray

    @property
    def c_in(self) -> int:
        return self.mlps[0][0][0].shape[0] - 3

    @property
    def c_out(self) -> int:
        return self.projection.shape[1]

    def arrays(self) -> List[np.ndarray]:
        'Flat list of all weights, in a fixed order, for EQVX storage.'
        flat = []
        for mlp in self.mlps:
            for w, b in mlp:
                flat.extend([w, b])
        flat.append(self.projection)
        return flat

    @staticmethod
    def from_arrays(arrays: Sequence[np.ndarray], cfg: VsaConfig) -> 'VsaWeights':
        per_radius = 2 * len(cfg.mlp_widths)
        if len(arrays) != per_radius * len(cfg.radii) + 1:
            raise InvalidArgumentError(f'expected {per_radius * len(cfg.radii) + 1} arrays, got {len(arrays)}')
        mlps = []
        for r in range(len(cfg.radii)):
            chunk = arrays[r * per_radius:(r + 1) * per_radius]
            mlps.append(tuple((np.asarray(chunk[i], dtype=np.float64), np.asarray(chunk[i + 1], dtype=np.float64))
                              for i in range(0, per_radius, 2)))
        return VsaWeights(tuple(mlps), np.asarray(arrays[-1], dtype=np.float64))


@dataclasses.dataclass(frozen=True, eq=False)
class AttentionWeights:
    'Query, key and value projections, each C x C.'
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.wq), np.shape(self.wk), np.shape(self.wv)}
        if len(shapes) != 1:
            raise InvalidArgumentError(f'attention projections differ in shape: {sorted(shapes)}')
        shape = shapes.pop()
        if len(shape) != 2 or shape[0] != shape[1]:
            raise InvalidArgumentError(f'attention projections must be C x C, got {shape}')
        for name in ('wq', 'wk', 'wv'):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise InvalidArgumentError(f'{name} must be finite')
            object.__setattr__(self, name, value)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    def arrays(self) -> List[np.ndarray]:
        return [self.wq, self.wk, self.wv]


@dataclasses.dataclass(frozen=True, eq=False)
class TiVoxelWeights:
    vsa: VsaWeights
    attention: AttentionWeights


@dataclasses.dataclass(frozen=True, eq=False)
class InstanceFeatureMatrix:
    'Pooled features of one proposal: (2N, J, C), channel-major.'
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise InvalidArgumentError(f'instance features must be (2N, J, C), got {values.shape}')
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError('instance features must be finite')
        object.__setattr__(self, 'values', values)

    def grid_block(self, j: int) -> np.ndarray:
        'The (2N, C) block of grid point j across all channels.'
        return self.values[:, j, :]


def init_vsa_weights(c_in: int, cfg: VsaConfig, c_out: int, seed: int=0) -> VsaWeights:
    '''
    Seeded uniform initialisation with bound 1/sqrt(fan_in) per layer. The
    output projection has no bias, so empty neighbourhoods pool to zero.
    '''
    rng = np.random.default_rng(seed)
    mlps = []
    for _ in cfg.radii:
        layers = []
        width = c_in + 3
        for out_width in cfg.mlp_widths:
            bound = 1.0 / math.sqrt(width)
            layers.append((rng.uniform(-bound, bound, size=(width, out_width)),
                           rng.uniform(-bound, bound, size=out_width)))
            width = out_width
        mlps.append(tuple(layers))
    fan_in = len(cfg.radii) * cfg.mlp_widths[-1]
    bound = 1.0 / math.sqrt(fan_in)
    return VsaWeights(tuple(mlps), rng.uniform(-bound, bound, size=(fan_in, c_out)))


def init_attention_weights(channels: int, seed: int=0) -> AttentionWeights:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(channels)
    wq, wk, wv = (rng.uniform(-bound, bound, size=(channels, channels)) for _ in range(3))
    return AttentionWeights(wq, wk, wv)


def save_tivoxel_weights(weights: TiVoxelWeights, path):
    'Writes the VSA arrays followed by Wq, Wk and Wv to one EQVX file.'
    write_tensors(weights.vsa.arrays() + weights.attention.arrays(), path)


def load_tivoxel_weights(path, c_in: int, cfg: VsaConfig, channels: int) -> TiVoxelWeights:
    '''
    Reads weights written by :func:`save_tivoxel_weights` for a backbone
    of width ``c_in`` and the given VSA settings and attention width.

    Raises:
        FormatError: if the number or shapes of the stored arrays differ
            from what those settings need.
    '''
    tensors = read_tensors(path)
    template = init_vsa_weights(c_in, cfg, channels).arrays() + init_attention_weights(channels).arrays()
    if len(tensors) != len(template):
        raise FormatError(f'expected {len(template)} tensors, found {len(tensors)}', path=str(path))
    for i, (stored, expected) in enumerate(zip(tensors, template)):
        if stored.shape != expected.shape:
            raise FormatError(f'tensor {i}: shape {stored.shape}, expected {expected.shape}', path=str(path))
    vsa = VsaWeights.from_arrays(tensors[:-3], cfg)
    attention = AttentionWeights(*(t.astype(np.float64) for t in tensors[-3:]))
    logger.info('loaded TiVoxel weights from %s', path)
    return TiVoxelWeights(vsa, attention)


def box_lattice(box: Box3D, grid_per_axis: int) -> np.ndarray:
    '''
    Returns the (G^3, 3) centres of a G x G x G lattice inside the box,
    flattened z-major, then y, then x.
    '''
    g = grid_per_axis
    steps = (np.arange(g) + 0.5) / g - 0.5
    zz, yy, xx = np.meshgrid(steps, steps, steps, indexing='ij')
    local = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1) * np.asarray(box.size)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rotated = np.empty_like(local)
    rotated[:, 0] = c * local[:, 0] - s * local[:, 1]
    rotated[:, 1] = s * local[:, 0] + c * local[:, 1]
    rotated[:, 2] = local[:, 2]
    return rotated + np.asarray(box.center)


def gen_proposal_grids(box: Box3D, group: TransformGroup, grid_per_axis: int) -> List[GridPointSet]:
    'Lattice points of the box, transformed into the frame of every group action.'
    if grid_per_axis < 1:
        raise InvalidArgumentError(f'grid_per_axis must be positive, got {grid_per_axis}')
    base = box_lattice(box, grid_per_axis)
    return [GridPointSet(apply_to_xyz(action, base), i) for i, action in enumerate(group.actions)]


def mirror_grid_order(grid_per_axis: int) -> np.ndarray:
    '''
    Index permutation of the box lattice with the y index reversed. Under a
    reflecting action the transformed box's lattice point j is the image of
    the original lattice point ``mirror_grid_order(G)[j]``.
    '''
    g = grid_per_axis
    iz, iy, ix = np.meshgrid(np.arange(g), np.arange(g), np.arange(g), indexing='ij')
    return ((iz * g + (g - 1 - iy)) * g + ix).ravel()


def _perceptron(x: np.ndarray, layers) -> np.ndarray:
    for w, b in layers:
        x = np.maximum(x @ w.astype(x.dtype) + b.astype(x.dtype), 0)
    return x


def _neighbours(tree: cKDTree, centres: np.ndarray, coords: np.ndarray, point: np.ndarray,
                radius: float, cap: int) -> np.ndarray:
    # slightly larger query, then the exact distance test below decides
    candidates = np.asarray(tree.query_ball_point(point, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    if not candidates.size:
        return candidates
    dist = np.sqrt(np.sum((centres[candidates] - point) ** 2, axis=1))
    keep = dist <= radius
    candidates, dist = candidates[keep], dist[keep]
    c = coords[candidates]
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], dist))
    return candidates[order[:cap]]


def vsa_pool(grids: GridPointSet, v: SparseVoxelTensor, cfg: VsaConfig,
             weights: VsaWeights) -> np.ndarray:
    '''
    Pools voxel features around every grid point.

    For each radius, up to max_neighbors occupied voxel centres within the
    radius are gathered, nearest first with ties broken by the lexicographic
    (ix, iy, iz) coordinate. Each neighbour is encoded as its feature
    followed by its offset to the grid point, passed through the radius'
    perceptron and max-reduced; empty neighbourhoods give zeros. The
    per-radius results are concatenated and projected to C.

    Returns:
        The (J, C) pooled features.

    Raises:
        InvalidArgumentError: if the grid and tensor come from different
            actions or the feature width does not match the weights.
    '''
    if v.action_index is not None and v.action_index != grids.action_index:
        raise InvalidArgumentError(
            f'grid points of action {grids.action_index} cannot pool channel {v.action_index}'
        )
    if v.num_channels != weights.c_in:
        raise InvalidArgumentError(f'voxel width {v.num_channels} does not match VSA input {weights.c_in}')

    dtype = v.features.dtype
    points = grids.points if grids.points.shape[1] == 3 else np.hstack([grids.points, np.zeros((len(grids), 1))])
    num_points = len(points)
    width = cfg.mlp_widths[-1]
    pooled = np.zeros((num_points, len(cfg.radii) * width), dtype=dtype)
    if not len(v) or not num_points:
        return pooled @ weights.projection.astype(dtype)

    centres = v.voxel_centers()
    tree = cKDTree(centres)
    for r, (radius, cap) in enumerate(zip(cfg.radii, cfg.max_neighbors)):
        rows, cols = [], []
        for p in range(num_points):
            found = _neighbours(tree, centres, v.coords, points[p], radius, cap)
            rows.append(np.full(found.size, p, dtype=np.int64))
            cols.append(found)
        row = np.concatenate(rows)
        col = np.concatenate(cols)
        if not row.size:
            continue
        encoded = np.hstack([v.features[col], (centres[col] - points[row]).astype(dtype)])
        hidden = _perceptron(encoded, weights.mlps[r])
        block = np.zeros((num_points, width), dtype=dtype)
        # perceptron outputs are nonnegative, so a zero start is neutral for max
        np.maximum.at(block, row, hidden)
        pooled[:, r * width:(r + 1) * width] = block
    return pooled @ weights.projection.astype(dtype)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    'Row-wise softmax, max-subtracted.'
    return softmax(scores, axis=1)


def _check_attention(block: np.ndarray, w: AttentionWeights):
    if block.ndim != 2 or block.shape[1] != w.channels:
        raise InvalidArgumentError(f'feature block {block.shape} does not match C = {w.channels}')


def cross_grid_attention(block: np.ndarray, w: AttentionWeights) -> np.ndarray:
    '''
    Self-attention across the channels of one grid point, then the mean over
    channels.

    Args:
        block: (2N, C) features of one grid point in every channel.
        w: The projections.

    Returns:
        The length-C fused feature.
    '''
    block = np.asarray(block)
    _check_attention(block, w)
    dtype = block.dtype
    q = block @ w.wq.astype(dtype)
    k = block @ w.wk.astype(dtype)
    v = block @ w.wv.astype(dtype)
    s = softmax_rows(q @ k.T / math.sqrt(w.channels))
    return (s @ v).mean(axis=0)


def cross_grid_attention_vjp(block: np.ndarray, w: AttentionWeights,
                             upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    '''
    Vector-Jacobian product of :func:`cross_grid_attention`.

    Returns:
        Gradients of ``upstream . cross_grid_attention(block, w)`` with
        respect to (block, wq, wk, wv).
    '''
    block = np.asarray(block, dtype=np.float64)
    _check_attention(block, w)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.shape != (w.channels,):
        raise InvalidArgumentError(f'upstream must have length {w.channels}, got {upstream.shape}')
    m = block.shape[0]
    scale = 1.0 / math.sqrt(w.channels)

    q = block @ w.wq
    k = block @ w.wk
    v = block @ w.wv
    s = softmax_rows(q @ k.T * scale)

    d_out = np.tile(upstream / m, (m, 1))
    d_s = d_out @ v.T
    d_v = s.T @ d_out
    d_scores = s * (d_s - np.sum(d_s * s, axis=1, keepdims=True))
    d_q = d_scores @ k * scale
    d_k = d_scores.T @ q * scale

    d_block = d_q @ w.wq.T + d_k @ w.wk.T + d_v @ w.wv.T
    return d_block, block.T @ d_q, block.T @ d_k, block.T @ d_v


def instance_features(box: Box3D, channel_set: EquivariantSet, cfg: VsaConfig,
                      weights: VsaWeights) -> InstanceFeatureMatrix:
    'Pools every channel at its own transformed lattice of the box.'
    grids = gen_proposal_grids(box, channel_set.group, cfg.grid_per_axis)
    blocks = [vsa_pool(grids[i], channel, cfg, weights) for i, channel in enumerate(channel_set.channels)]
    return InstanceFeatureMatrix(np.stack(blocks))


def tivoxel_pool(box: Box3D, channel_set: EquivariantSet, cfg: VsaConfig,
                 weights: TiVoxelWeights) -> np.ndarray:
    '''
    Returns the length J*C feature of one proposal: per grid point, the
    attention-fused mean over channels, concatenated in lattice order.

    The result is invariant to rotations of the scan and proposal. For a
    reflecting element the transformed lattice visits the grid points in
    mirrored order, so it equals the original only after
    :func:`regroup_mirrored`.
    '''
    if weights.vsa.c_out != weights.attention.channels:
        raise InvalidArgumentError(
            f'VSA output width {weights.vsa.c_out} does not match attention C {weights.attention.channels}'
        )
    features = instance_features(box, channel_set, cfg, weights.vsa)
    fused = [cross_grid_attention(features.grid_block(j), weights.attention)
             for j in range(cfg.num_grid_points)]
    return np.concatenate(fused)


def tivoxel_pool_all(boxes: Sequence[Box3D], channel_set: EquivariantSet, cfg: VsaConfig,
                     weights: TiVoxelWeights, threads: int=1,
                     dtype: Optional[np.dtype]=None) -> np.ndarray:
    '''
    Pools every proposal; returns a (num_proposals, J*C) matrix.
    '''
    width = cfg.num_grid_points * weights.attention.channels
    rows = map_in_threads(lambda box: tivoxel_pool(box, channel_set, cfg, weights), list(boxes), threads)
    if not rows:
        return np.zeros((0, width), dtype=dtype or np.float64)
    return np.stack(rows)


def regroup_mirrored(features: np.ndarray, grid_per_axis: int, channels: int) -> np.ndarray:
    'Reorders a flat J*C feature by :func:`mirror_grid_order`.'
    blocks = np.asarray(features).reshape(grid_per_axis ** 3, channels)
    return blocks[mirror_grid_order(grid_per_axis)].reshape(-1)
