'''
A small sparse 3D convolution engine and the shared-weight backbone that is
run on every transformation channel.
'''
import dataclasses
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from eqvx.exceptions import FormatError, InvalidArgumentError
from eqvx.io import read_tensors, write_tensors
from eqvx.utils import map_in_threads
from eqvx.voxelizer import EquivariantSet, SparseVoxelTensor

logger = logging.getLogger(__name__)

MODES = ('subm', 'spconv')
ACTIVATIONS = ('none', 'relu')


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    '''
    Shape of one backbone layer, without weights.

    Args:
        mode: 'subm' (submanifold) or 'spconv' (strided, dilating).
        kernel_size: Odd kernel width k.
        c_out: Output feature width.
        stride: Stride for 'spconv' layers; always 1 for 'subm'.
        activation: 'relu' or 'none'.
    '''
    mode: str
    kernel_size: int
    c_out: int
    stride: int = 1
    activation: str = 'relu'

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f'layer mode must be one of {MODES}, got {self.mode!r}')
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f'kernel size must be odd, got {self.kernel_size}')
        if self.c_out < 1 or self.stride < 1:
            raise InvalidArgumentError('c_out and stride must be positive')
        if self.mode == 'subm' and self.stride != 1:
            raise InvalidArgumentError('submanifold layers have stride 1')
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f'activation must be one of {ACTIVATIONS}, got {self.activation!r}')

    def __str__(self) -> str:
        if self.mode == 'subm':
            return f'subm:{self.kernel_size}:{self.c_out}'
        return f'spconv:{self.kernel_size}:{self.stride}:{self.c_out}'


DEFAULT_LAYERS = (
    LayerSpec('subm', 3, 16),
    LayerSpec('spconv', 3, 32, stride=2),
    LayerSpec('subm', 3, 32),
    LayerSpec('spconv', 3, 64, stride=2),
)


@dataclasses.dataclass(frozen=True, eq=False)
class SparseConvLayer:
    '''
    One sparse convolution layer.

    Args:
        kernel: (k, k, k, C_in, C_out) weights; kernel[a, b, c] multiplies the
            neighbour at offset (a - k//2, b - k//2, c - k//2) in (ix, iy, iz).
        bias: (C_out,) bias.
        stride: Per-axis stride (sx, sy, sz).
        mode: 'subm' or 'spconv'.
        activation: 'relu' or 'none'.
    '''
    kernel: np.ndarray
    bias: np.ndarray
    stride: Tuple[int, int, int] = (1, 1, 1)
    mode: str = 'subm'
    activation: str = 'none'

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if kernel.ndim != 5 or not kernel.shape[0] == kernel.shape[1] == kernel.shape[2]:
            raise InvalidArgumentError(f'kernel must be (k, k, k, C_in, C_out), got {kernel.shape}')
        if kernel.shape[0] % 2 == 0:
            raise InvalidArgumentError(f'kernel size must be odd, got {kernel.shape[0]}')
        if bias.shape != (kernel.shape[4],):
            raise InvalidArgumentError(f'bias shape {bias.shape} does not match C_out {kernel.shape[4]}')
        if not np.all(np.isfinite(kernel)) or not np.all(np.isfinite(bias)):
            raise InvalidArgumentError('kernel and bias must be finite')
        stride = tuple(int(s) for s in np.broadcast_to(self.stride, (3,)))
        if min(stride) < 1:
            raise InvalidArgumentError(f'stride must be positive, got {stride}')
        if self.mode not in MODES:
            raise InvalidArgumentError(f'mode must be one of {MODES}, got {self.mode!r}')
        if self.mode == 'subm' and stride != (1, 1, 1):
            raise InvalidArgumentError('submanifold layers have stride 1')
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f'activation must be one of {ACTIVATIONS}, got {self.activation!r}')
        kernel.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, 'kernel', kernel)
        object.__setattr__(self, 'bias', bias)
        object.__setattr__(self, 'stride', stride)

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[3]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[4]

    def offsets(self) -> np.ndarray:
        'The (k^3, 3) neighbour offsets in kernel flattening order.'
        r = self.kernel_size // 2
        steps = np.arange(-r, r + 1)
        a, b, c = np.meshgrid(steps, steps, steps, indexing='ij')
        return np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)


def output_geometry(layer: SparseConvLayer, tensor: SparseVoxelTensor):
    '''
    Returns (voxel_size, origin, spatial_shape) of the layer output.

    A strided output voxel o is centred on input voxel o * s, so the output
    voxel size is s * d and the origin moves by (1 - s) / 2 * d.
    '''
    if layer.mode == 'subm':
        return tensor.voxel_size, tensor.origin, tensor.spatial_shape
    s = np.asarray(layer.stride)
    d = np.asarray(tensor.voxel_size)
    shape = tuple(int(math.ceil(n / si)) for n, si in zip(tensor.spatial_shape, layer.stride))
    return tuple(s * d), tuple(np.asarray(tensor.origin) + (1 - s) / 2 * d), shape


@dataclasses.dataclass(frozen=True, eq=False)
class Rulebook:
    '''
    Input/output pairing of one layer. ``pairs[k]`` holds the (input entry,
    output entry) indices connected through kernel offset k; an output entry
    appears at most once per offset. ``out_coords`` are in linear-key order.
    '''
    mode: str
    kernel_size: int
    out_coords: np.ndarray
    pairs: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    def reusable_for(self, layer: SparseConvLayer) -> bool:
        'True when ``layer`` may reuse this pairing on the output it produced.'
        return self.mode == 'subm' and layer.mode == 'subm' and layer.kernel_size == self.kernel_size


def _keys(coords: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    nx, ny, _ = shape
    return (coords[..., 2] * ny + coords[..., 1]) * nx + coords[..., 0]


def build_rulebook(layer: SparseConvLayer, tensor: SparseVoxelTensor) -> Rulebook:
    '''
    Pairs every active output voxel with the input voxels under its kernel,
    for all offsets at once.

    Submanifold layers keep the input active set and look every neighbour up
    in one batch. Strided layers derive the pairs from the inputs: input c
    reaches output (c - offset) / s through offset ``offset`` whenever the
    division is exact and lands inside the output grid.
    '''
    _, _, shape = output_geometry(layer, tensor)
    offsets = layer.offsets()
    if layer.mode == 'subm':
        out_coords = tensor.coords
        found = tensor.lookup(out_coords[:, None, :] + offsets[None, :, :]).reshape(len(out_coords), len(offsets))
        pairs = []
        for k in range(len(offsets)):
            targets = np.flatnonzero(found[:, k] >= 0)
            pairs.append((found[targets, k], targets))
        return Rulebook(layer.mode, layer.kernel_size, out_coords, tuple(pairs))

    stride = np.asarray(layer.stride)
    shifted = tensor.coords[None, :, :] - offsets[:, None, :]
    reached = shifted // stride
    valid = np.all(shifted % stride == 0, axis=2)
    valid &= np.all((reached >= 0) & (reached < np.asarray(shape)), axis=2)
    keys = _keys(reached, shape)
    out_keys = np.unique(keys[valid])
    nx, ny, _ = shape
    out_coords = np.stack([out_keys % nx, (out_keys // nx) % ny, out_keys // (nx * ny)], axis=1).astype(np.int64)
    pairs = []
    for k in range(len(offsets)):
        sources = np.flatnonzero(valid[k])
        pairs.append((sources, np.searchsorted(out_keys, keys[k, sources])))
    return Rulebook(layer.mode, layer.kernel_size, out_coords, tuple(pairs))


def sparse_conv_forward(layer: SparseConvLayer, tensor: SparseVoxelTensor,
                        rulebook: Optional[Rulebook]=None) -> SparseVoxelTensor:
    '''
    Applies one sparse convolution layer.

    Submanifold layers keep the input active set. Strided layers activate
    every output voxel whose kernel footprint covers an active input voxel.
    Contributions are accumulated in fixed kernel-offset order, and within an
    offset every output voxel receives at most one term, so the result does
    not depend on entry enumeration.

    Args:
        layer: The layer.
        tensor: Its input.
        rulebook: Pairing built by :func:`build_rulebook` for this input and
            a layer of the same mode and kernel size; built when omitted.

    Raises:
        InvalidArgumentError: if the input width differs from the kernel's C_in.
    '''
    if tensor.num_channels != layer.c_in:
        raise InvalidArgumentError(
            f'input feature width {tensor.num_channels} does not match layer C_in {layer.c_in}'
        )
    dtype = tensor.features.dtype
    voxel_size, origin, shape = output_geometry(layer, tensor)
    if rulebook is None:
        rulebook = build_rulebook(layer, tensor)
    out_coords = rulebook.out_coords
    if not len(out_coords):
        return SparseVoxelTensor(voxel_size, origin, shape, np.zeros((0, 3), dtype=np.int64),
                                 np.zeros((0, layer.c_out), dtype=dtype), action_index=tensor.action_index)

    kernel = layer.kernel.astype(dtype).reshape(-1, layer.c_in, layer.c_out)
    out = np.zeros((len(out_coords), layer.c_out), dtype=dtype)
    for k, (sources, targets) in enumerate(rulebook.pairs):
        if sources.size:
            out[targets] += tensor.features[sources] @ kernel[k]
    out += layer.bias.astype(dtype)
    if layer.activation == 'relu':
        out = np.maximum(out, 0)
    return SparseVoxelTensor(voxel_size, origin, shape, out_coords, out, action_index=tensor.action_index)


@dataclasses.dataclass(frozen=True, eq=False)
class Backbone:
    'An ordered stack of sparse layers with chained widths.'
    layers: Tuple[SparseConvLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        for i in range(1, len(layers)):
            if layers[i - 1].c_out != layers[i].c_in:
                raise InvalidArgumentError(
                    f'layer {i} expects {layers[i].c_in} channels but layer {i - 1} produces {layers[i - 1].c_out}'
                )
        object.__setattr__(self, 'layers', layers)

    @property
    def c_in(self) -> int:
        return self.layers[0].c_in

    @property
    def c_out(self) -> int:
        return self.layers[-1].c_out

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, tensor: SparseVoxelTensor) -> SparseVoxelTensor:
        rulebook: Optional[Rulebook] = None
        for layer in self.layers:
            # a submanifold layer leaves the active set unchanged
            if rulebook is None or not rulebook.reusable_for(layer):
                rulebook = build_rulebook(layer, tensor)
            tensor = sparse_conv_forward(layer, tensor, rulebook)
        return tensor


def build_backbone(specs: Sequence[LayerSpec], c_in: int, seed: int=0) -> Backbone:
    '''
    Builds a backbone with seeded weights drawn uniformly from
    +-1/sqrt(k^3 * C_in) per layer; biases use the same bound.
    '''
    if not specs:
        raise InvalidArgumentError('a backbone needs at least one layer')
    rng = np.random.default_rng(seed)
    layers: List[SparseConvLayer] = []
    width = c_in
    for spec in specs:
        k = spec.kernel_size
        bound = 1.0 / math.sqrt(k ** 3 * width)
        kernel = rng.uniform(-bound, bound, size=(k, k, k, width, spec.c_out))
        bias = rng.uniform(-bound, bound, size=spec.c_out)
        layers.append(SparseConvLayer(kernel, bias, (spec.stride,) * 3, spec.mode, spec.activation))
        width = spec.c_out
    return Backbone(tuple(layers))


def backbone_forward(backbone: Backbone, channel_set: EquivariantSet,
                     threads: int=1) -> EquivariantSet:
    '''
    Runs the same backbone on every channel of the set.

    Raises:
        InvalidArgumentError: if a channel's width differs from the first layer's C_in.
    '''
    outputs = map_in_threads(backbone.forward, list(channel_set.channels), threads)
    logger.debug('backbone_forward: %s active voxels per channel', [len(t) for t in outputs])
    return EquivariantSet(channel_set.group, tuple(outputs))


def save_backbone(backbone: Backbone, path):
    'Writes kernel and bias of every layer, in order, to one EQVX file.'
    arrays = []
    for layer in backbone.layers:
        arrays.extend([layer.kernel, layer.bias])
    write_tensors(arrays, path)


def load_backbone(path, specs: Sequence[LayerSpec], c_in: Optional[int]=None) -> Backbone:
    '''
    Reads weights written by :func:`save_backbone` for the given layer specs.

    Raises:
        FormatError: if the file does not hold one kernel and bias per spec
            with matching shapes.
    '''
    tensors = read_tensors(path)
    if len(tensors) != 2 * len(specs):
        raise FormatError(f'expected {2 * len(specs)} tensors, found {len(tensors)}', path=str(path))
    layers = []
    width = c_in
    for i, spec in enumerate(specs):
        kernel, bias = tensors[2 * i], tensors[2 * i + 1]
        k = spec.kernel_size
        expected = (k, k, k, kernel.shape[3] if width is None else width, spec.c_out)
        if kernel.shape != expected or bias.shape != (spec.c_out,):
            raise FormatError(f'layer {i}: kernel {kernel.shape} / bias {bias.shape} do not match {spec}',
                              path=str(path))
        layers.append(SparseConvLayer(kernel.astype(np.float64), bias.astype(np.float64),
                                      (spec.stride,) * 3, spec.mode, spec.activation))
        width = spec.c_out
    return Backbone(tuple(layers))
