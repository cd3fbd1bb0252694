'''
File formats: KITTI-style point ``.bin`` files, box text files, object banks
and the EQVX tensor container.

EQVX layout, all little-endian: the 4-byte magic ``EQVX``, a u32 version (1),
a u32 rank, rank u32 dims and a row-major float32 payload. Multi-tensor files
are plain concatenations of containers.
'''
import logging
import os
import struct
from typing import BinaryIO, Dict, List, Sequence, Tuple, Union

import numpy as np

from eqvx.exceptions import FormatError, InvalidArgumentError
from eqvx.pointcloud import Box3D, PointCloud, ProposalSet
from eqvx.tebev import BevMap
from eqvx.voxelizer import SparseVoxelTensor

logger = logging.getLogger(__name__)

MAGIC = b'EQVX'
VERSION = 1

_POINT_DTYPE = np.dtype('<f4')
_RECORD_BYTES = 16

PathLike = Union[str, 'os.PathLike[str]']


def read_point_bin(path: PathLike) -> PointCloud:
    '''
    Reads a velodyne ``.bin`` file of (x, y, z, intensity) float32 records.
    Intensity becomes the single feature channel.

    Raises:
        FormatError: if the length is not a multiple of 16 bytes or a record
            holds a non-finite value.
    '''
    size = os.path.getsize(path)
    if size % _RECORD_BYTES:
        raise FormatError(f'length {size} is not a multiple of {_RECORD_BYTES} bytes', path=str(path))

    records = np.fromfile(path, dtype=_POINT_DTYPE).reshape(-1, 4)
    bad = ~np.all(np.isfinite(records), axis=1)
    if np.any(bad):
        raise FormatError('non-finite value', path=str(path), record=int(np.flatnonzero(bad)[0]))

    logger.debug('read %d points from %s', len(records), path)
    return PointCloud(records[:, :3].astype(np.float64), records[:, 3:4].astype(np.float64))


def write_point_bin(points: PointCloud, path: PathLike):
    '''
    Writes a cloud as (x, y, z, intensity) float32 records.

    Raises:
        InvalidArgumentError: if the cloud does not carry exactly one
            feature channel.
    '''
    if points.num_features != 1:
        raise InvalidArgumentError(f'point files hold one intensity channel, cloud has {points.num_features}')
    records = np.empty((len(points), 4), dtype=_POINT_DTYPE)
    records[:, :3] = points.xyz
    records[:, 3] = points.features[:, 0]
    records.tofile(path)


def parse_box_line(line: str, path: PathLike='<string>', line_number: int=0) -> Tuple[Box3D, Union[float, None]]:
    tokens = line.split()
    if len(tokens) not in (7, 8):
        raise FormatError(f'expected 7 or 8 fields, got {len(tokens)}', path=str(path), line=line_number)
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f'unparsable number in "{line.strip()}"', path=str(path), line=line_number) from None
    if not all(np.isfinite(values)):
        raise FormatError('non-finite value', path=str(path), line=line_number)
    x, y, z, l, w, h, yaw = values[:7]
    if min(l, w, h) <= 0:
        raise FormatError(f'box size must be positive, got ({l}, {w}, {h})', path=str(path), line=line_number)
    score = values[7] if len(values) == 8 else None
    return Box3D((x, y, z), (l, w, h), yaw), score


def read_boxes(path: PathLike) -> ProposalSet:
    '''
    Reads "x y z l w h yaw [score]" lines in the LiDAR frame. Blank lines and
    lines starting with '#' are skipped.

    Raises:
        FormatError: with the 1-based line number of a malformed line or a
            box with a non-positive size.
    '''
    boxes: List[Box3D] = []
    scores: List[Union[float, None]] = []
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            box, score = parse_box_line(stripped, path, line_number)
            boxes.append(box)
            scores.append(score)
    return ProposalSet(tuple(boxes), tuple(scores))


def format_box(box: Box3D, score: Union[float, None]=None) -> str:
    values = list(box.center) + list(box.size) + [box.yaw]
    if score is not None:
        values.append(score)
    return ' '.join(repr(float(v)) for v in values)


def write_boxes(proposals: ProposalSet, path: PathLike):
    with open(path, 'w', encoding='utf-8') as f:
        for box, score in zip(proposals.boxes, proposals.scores):
            f.write(format_box(box, score) + '\n')


def points_in_box(points: PointCloud, box: Box3D) -> np.ndarray:
    'Boolean mask of the points inside the oriented box.'
    return box.contains(points.xyz)


def _write_container(f: BinaryIO, array: np.ndarray):
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError('tensors must be finite to be written')
    f.write(MAGIC)
    f.write(struct.pack('<II', VERSION, array.ndim))
    f.write(struct.pack(f'<{array.ndim}I', *array.shape))
    f.write(np.ascontiguousarray(array, dtype='<f4').tobytes())


def _read_exact(f: BinaryIO, count: int, path: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f'truncated container: wanted {count} bytes, got {len(data)}', path=path)
    return data


def _read_container(f: BinaryIO, path: str) -> np.ndarray:
    magic = _read_exact(f, 4, path)
    if magic != MAGIC:
        raise FormatError(f'bad magic {magic!r}', path=path)
    version, rank = struct.unpack('<II', _read_exact(f, 8, path))
    if version != VERSION:
        raise FormatError(f'unsupported version {version}', path=path)
    dims = struct.unpack(f'<{rank}I', _read_exact(f, 4 * rank, path)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = np.frombuffer(_read_exact(f, 4 * count, path), dtype='<f4')
    return payload.reshape(dims).astype(np.float32)


def write_tensor(array: np.ndarray, path: PathLike):
    'Writes one array as an EQVX container (converted to float32).'
    with open(path, 'wb') as f:
        _write_container(f, array)


def read_tensor(path: PathLike) -> np.ndarray:
    '''
    Reads a single-tensor EQVX file.

    Raises:
        FormatError: on a bad header, truncation or trailing bytes.
    '''
    tensors = read_tensors(path)
    if len(tensors) != 1:
        raise FormatError(f'expected one tensor, found {len(tensors)}', path=str(path))
    return tensors[0]


def write_tensors(arrays: Sequence[np.ndarray], path: PathLike):
    with open(path, 'wb') as f:
        for array in arrays:
            _write_container(f, array)


def read_tensors(path: PathLike) -> List[np.ndarray]:
    'Reads every container of a concatenated EQVX file, in order.'
    tensors = []
    size = os.path.getsize(path)
    with open(path, 'rb') as f:
        while f.tell() < size:
            tensors.append(_read_container(f, str(path)))
    return tensors


def write_sparse_tensor(tensor: SparseVoxelTensor, path: PathLike):
    '''
    Writes a sparse tensor as two containers: the (K, 3) coordinates and the
    (K, C) features. Coordinates are stored as exact float32 integers.
    '''
    if len(tensor) and int(tensor.coords.max()) >= 1 << 24:
        raise InvalidArgumentError('voxel coordinates too large for exact float32 storage')
    write_tensors([tensor.coords.astype(np.float32), tensor.features], path)


def read_sparse_tensor(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    'Returns the (coords, features) pair written by :func:`write_sparse_tensor`.'
    tensors = read_tensors(path)
    if len(tensors) != 2 or tensors[0].ndim != 2 or tensors[0].shape[1:] != (3,):
        raise FormatError('not a sparse tensor file', path=str(path))
    return tensors[0].astype(np.int64), tensors[1]


_GEO_KEYS = ('origin_x', 'origin_y', 'pixel_x', 'pixel_y', 'height', 'width', 'channels')


def write_bev_map(bev: BevMap, path: PathLike):
    '''
    Writes the (H, W, C) raster as EQVX and its geometry to ``<path>.geo``.
    '''
    write_tensor(bev.data, path)
    height, width, channels = bev.data.shape
    values = (bev.origin[0], bev.origin[1], bev.pixel_size[0], bev.pixel_size[1],
              height, width, channels)
    with open(f'{path}.geo', 'w', encoding='utf-8') as f:
        for key, value in zip(_GEO_KEYS, values):
            f.write(f'{key}: {value!r}\n')


def read_bev_map(path: PathLike) -> BevMap:
    geo: Dict[str, str] = {}
    geo_path = f'{path}.geo'
    with open(geo_path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            key, sep, value = line.partition(':')
            if not sep:
                raise FormatError('expected "key: value"', path=geo_path, line=line_number)
            geo[key.strip()] = value.strip()
    missing = [k for k in _GEO_KEYS if k not in geo]
    if missing:
        raise FormatError(f'missing keys {missing}', path=geo_path)
    data = read_tensor(path)
    shape = (int(geo['height']), int(geo['width']), int(geo['channels']))
    if data.shape != shape:
        raise FormatError(f'raster shape {data.shape} does not match header {shape}', path=str(path))
    return BevMap(data.astype(np.float64),
                  (float(geo['origin_x']), float(geo['origin_y'])),
                  (float(geo['pixel_x']), float(geo['pixel_y'])))


def read_bank(directory: PathLike) -> List[Tuple[str, Box3D, PointCloud]]:
    '''
    Reads an object bank: every ``<name>.txt`` holding one box line is
    paired with ``<name>.bin``. Entries are sorted by name.

    Raises:
        FormatError: if a box file does not hold exactly one box or its
            point file is missing.
    '''
    bank = []
    for filename in sorted(os.listdir(directory)):
        name, ext = os.path.splitext(filename)
        if ext != '.txt':
            continue
        boxes = read_boxes(os.path.join(directory, filename))
        if len(boxes) != 1:
            raise FormatError(f'expected one box, found {len(boxes)}',
                              path=os.path.join(directory, filename))
        bin_path = os.path.join(directory, name + '.bin')
        if not os.path.exists(bin_path):
            raise FormatError('missing point file', path=bin_path)
        bank.append((name, boxes[0], read_point_bin(bin_path)))
    logger.info('read %d bank objects from %s', len(bank), directory)
    return bank


def write_bank(bank: Sequence[Tuple[str, Box3D, PointCloud]], directory: PathLike):
    os.makedirs(directory, exist_ok=True)
    for name, box, points in bank:
        write_boxes(ProposalSet.of([box]), os.path.join(directory, name + '.txt'))
        write_point_bin(points, os.path.join(directory, name + '.bin'))
