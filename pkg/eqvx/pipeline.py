'''
End-to-end orchestration: voxelize every transformed copy of a scan, run the
shared backbone, pool scene and instance features, and write the tensors
together with a manifest. Also runs the equivariance report.
'''
import contextlib
import dataclasses
import logging
import math
import os
import time
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from eqvx import io
from eqvx.config import PipelineConfig, resolved_beta
from eqvx.exceptions import EqvxError, InvalidArgumentError, RefusalError, StageError
from eqvx.pointcloud import PointCloud, ProposalSet
from eqvx.tebev import BevMap, interior_mask, resample_bev, tebev_pool
from eqvx.tespconv import Backbone, backbone_forward, build_backbone, load_backbone, save_backbone
from eqvx.tivoxel import (TiVoxelWeights, init_attention_weights, init_vsa_weights, load_tivoxel_weights,
                          regroup_mirrored, save_tivoxel_weights, tivoxel_pool_all)
from eqvx.utils import sha256_file
from eqvx.voxelizer import EquivariantSet, channel_residual, grid_shape, transform_and_voxelize
from eqvx.xform import TransformGroup, apply_to_box, apply_to_points, build_group

logger = logging.getLogger(__name__)

STAGES = ('voxelize', 'backbone', 'tebev', 'tivoxel')

MANIFEST_NAME = 'manifest.txt'
REPORT_NAME = 'report.txt'
BACKBONE_WEIGHTS_NAME = 'backbone.eqvx'
TIVOXEL_WEIGHTS_NAME = 'tivoxel_weights.eqvx'


@dataclasses.dataclass(frozen=True, eq=False)
class Model:
    'The group and weights that, with the config, define the detector features.'
    group: TransformGroup
    backbone: Backbone
    weights: TiVoxelWeights


def dtype_for(config: PipelineConfig):
    return np.float32 if config.run.precision == 'fast' else np.float64


def build_model(config: PipelineConfig, num_point_features: int=1) -> Model:
    '''
    Builds the group and all weights. Weights come from the files named by
    ``model.backbone_weights`` / ``model.tivoxel_weights`` when set, and are
    seeded from ``run.seed`` otherwise. The backbone takes (x, y, z,
    features) voxel means as input.

    Raises:
        FormatError: if a weight file does not fit the configured layers.
    '''
    group = build_group(config.group.n_rotations, resolved_beta(config), config.group.include_reflection)
    seed = config.run.seed
    c_in = 3 + num_point_features
    if config.model.backbone_weights:
        backbone = load_backbone(config.model.backbone_weights, config.backbone.layers, c_in)
    else:
        backbone = build_backbone(config.backbone.layers, c_in, seed)
    if config.model.tivoxel_weights:
        weights = load_tivoxel_weights(config.model.tivoxel_weights, backbone.c_out, config.vsa,
                                       config.attention.channels)
    else:
        weights = TiVoxelWeights(init_vsa_weights(backbone.c_out, config.vsa, config.attention.channels, seed + 1),
                                 init_attention_weights(config.attention.channels, seed + 2))
    return Model(group, backbone, weights)


def save_model(model: Model, out_dir: str) -> Tuple[str, str]:
    '''
    Writes the backbone and TiVoxel weights to ``backbone.eqvx`` and
    ``tivoxel_weights.eqvx``; point ``model.backbone_weights`` and
    ``model.tivoxel_weights`` at them to load the model back.

    Returns:
        The two written paths.
    '''
    os.makedirs(out_dir, exist_ok=True)
    backbone_path = os.path.join(out_dir, BACKBONE_WEIGHTS_NAME)
    tivoxel_path = os.path.join(out_dir, TIVOXEL_WEIGHTS_NAME)
    save_backbone(model.backbone, backbone_path)
    save_tivoxel_weights(model.weights, tivoxel_path)
    return backbone_path, tivoxel_path


@dataclasses.dataclass
class SceneFeatures:
    voxels: EquivariantSet
    encoded: Optional[EquivariantSet] = None
    bev: Optional[BevMap] = None
    instances: Optional[np.ndarray] = None


def encode_scene(config: PipelineConfig, model: Model, points: PointCloud, boxes: ProposalSet,
                 stop_after: str='tivoxel', timings: Optional[Dict[str, float]]=None) -> SceneFeatures:
    '''
    Runs the stages in order up to and including ``stop_after``.
    '''
    if stop_after not in STAGES:
        raise InvalidArgumentError(f'unknown stage {stop_after!r}')
    threads = config.run.threads
    dtype = dtype_for(config)
    timings = {} if timings is None else timings
    last = STAGES.index(stop_after)

    with _stage('voxelize', timings):
        features = SceneFeatures(transform_and_voxelize(
            points, model.group, config.voxel.size, config.voxel.range, dtype, threads))
    if last >= 1:
        with _stage('backbone', timings):
            features.encoded = backbone_forward(model.backbone, features.voxels, threads)
    if last >= 2:
        with _stage('tebev', timings):
            features.bev = tebev_pool(features.encoded, config.tebev.aggregate, threads)
    if last >= 3:
        with _stage('tivoxel', timings):
            features.instances = tivoxel_pool_all(boxes.boxes, features.encoded, config.vsa,
                                                  model.weights, threads, dtype)
    return features


@contextlib.contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    logger.info('stage %s: start', name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    timings[name] = time.perf_counter() - start
    logger.info('stage %s: done in %.3fs', name, timings[name])


class Manifest(object):
    '''
    Ordered ``key: value`` record of a run.
    '''

    def __init__(self):
        self.entries: Dict[str, str] = {}

    def __setitem__(self, key: str, value):
        self.entries[key] = str(value)

    def __getitem__(self, key: str) -> str:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def to_lines(self) -> List[str]:
        return [f'{key}: {value}' for key, value in self.entries.items()]

    def hashes(self) -> Dict[str, str]:
        'Every entry except the timings.'
        return {k: v for k, v in self.entries.items() if not k.startswith('time.')}

    def write(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(self.to_lines()) + '\n')

    @staticmethod
    def read(path: str) -> 'Manifest':
        manifest = Manifest()
        with open(path, encoding='utf-8') as f:
            for line in f:
                key, sep, value = line.rstrip('\n').partition(': ')
                if sep:
                    manifest[key] = value
        return manifest


def _read_inputs(scan_path: str, boxes_path: str) -> Tuple[PointCloud, ProposalSet]:
    points = io.read_point_bin(scan_path)
    boxes = io.read_boxes(boxes_path)
    logger.info('read %d points and %d boxes', len(points), len(boxes))
    return points, boxes


def _stage_outputs(stage: str, features: SceneFeatures) -> List[Tuple[str, object]]:
    if stage == 'voxelize':
        return [(f'voxels_{i}.eqvx', t) for i, t in enumerate(features.voxels.channels)]
    if stage == 'backbone':
        return [(f'backbone_{i}.eqvx', t) for i, t in enumerate(features.encoded.channels)]
    if stage == 'tebev':
        return [('tebev.eqvx', features.bev)]
    return [('tebev.eqvx', features.bev), ('tivoxel.eqvx', features.instances)]


def run_pipeline(config: PipelineConfig, scan_path: str, boxes_path: str, out_dir: str,
                 stop_after: str='tivoxel') -> Manifest:
    '''
    Runs the pipeline and writes the tensors of the last stage plus
    ``manifest.txt`` into ``out_dir``.

    Returns:
        The manifest: config and input hashes, group order, proposal count,
        one hash per output file and the wall-clock time of every stage.

    Raises:
        StageError: naming the failed stage, with the original error as
            cause. Files written by this run are removed first.
    '''
    timings: Dict[str, float] = {}
    written: List[str] = []
    try:
        with _stage('read', timings):
            points, boxes = _read_inputs(scan_path, boxes_path)
            model = build_model(config, points.num_features)
        features = encode_scene(config, model, points, boxes, stop_after, timings)

        with _stage('write', timings):
            os.makedirs(out_dir, exist_ok=True)
            manifest = Manifest()
            manifest['config_sha256'] = config.sha256()
            manifest['scan_sha256'] = sha256_file(scan_path)
            manifest['boxes_sha256'] = sha256_file(boxes_path)
            manifest['group_order'] = model.group.order
            manifest['num_proposals'] = len(boxes)
            for name, value in _stage_outputs(stop_after, features):
                path = os.path.join(out_dir, name)
                names = [name]
                if isinstance(value, BevMap):
                    written.extend([path, f'{path}.geo'])
                    io.write_bev_map(value, path)
                    names.append(f'{name}.geo')
                elif isinstance(value, np.ndarray):
                    written.append(path)
                    io.write_tensor(value, path)
                else:
                    written.append(path)
                    io.write_sparse_tensor(value, path)
                for n in names:
                    manifest[f'output.{n}_sha256'] = sha256_file(os.path.join(out_dir, n))
        for stage, seconds in timings.items():
            manifest[f'time.{stage}_s'] = f'{seconds:.6f}'
        manifest_path = os.path.join(out_dir, MANIFEST_NAME)
        written.append(manifest_path)
        manifest.write(manifest_path)
    except EqvxError:
        _remove(written)
        raise
    except OSError as e:
        _remove(written)
        raise StageError('write', e) from e
    return manifest


def _remove(paths: List[str]):
    for path in paths:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)
    if paths:
        logger.warning('removed %d partial outputs', len(paths))


class Report(object):
    '''
    Residuals of the equivariance checks, as ``key: value`` lines.
    '''

    def __init__(self):
        self.entries: Dict[str, str] = {}
        self.passed = True

    def add(self, key: str, value):
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        elif isinstance(value, float):
            value = repr(value)
        self.entries[key] = str(value)

    def add_test(self, name: str, residuals: List[float], tolerances: List[float]):
        passes = [r <= t for r, t in zip(residuals, tolerances)]
        for k, (r, t) in enumerate(zip(residuals, tolerances)):
            self.add(f'test.{name}.g{k}.residual', float(r))
            self.add(f'test.{name}.g{k}.tolerance', float(t))
        self.add(f'test.{name}.max', float(max(residuals, default=0.0)))
        self.add(f'test.{name}.tolerance', float(min(tolerances, default=0.0)))
        self.add(f'test.{name}.pass', all(passes))
        self.passed = self.passed and all(passes)

    def residual(self, name: str, g: int) -> float:
        return float(self.entries[f'test.{name}.g{g}.residual'])

    def to_lines(self) -> List[str]:
        return [f'{key}: {value}' for key, value in self.entries.items()]

    def write(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(self.to_lines()) + '\n')


def _check_symmetric_range(config: PipelineConfig):
    x_lo, y_lo, _, x_hi, y_hi, _ = config.voxel.range
    dx, dy, _ = config.voxel.size
    if not (math.isclose(x_lo, -x_hi) and math.isclose(y_lo, -y_hi) and math.isclose(x_hi, y_hi)):
        raise RefusalError(f'equivariance checks need a range symmetric about the sensor, got {config.voxel.range}')
    if dx != dy:
        raise RefusalError('equivariance checks need square voxels in x/y')
    nx, ny, _ = grid_shape(config.voxel.size, config.voxel.range)
    for spec in config.backbone.layers:
        if (nx - 1) % spec.stride:
            raise RefusalError(
                f'{nx} voxels per axis do not stay centred under stride {spec.stride}; '
                f'choose a range whose voxel count is 1 modulo the stride product'
            )
        nx = math.ceil(nx / spec.stride)


def _bev_residual(candidate: BevMap, reference: BevMap, margin: float) -> float:
    mask = interior_mask(reference, margin)
    if not np.any(mask):
        return 0.0
    diff = np.abs(candidate.data[mask].astype(np.float64) - reference.data[mask].astype(np.float64))
    scale = max(1.0, float(np.max(np.abs(reference.data[mask]))))
    return float(np.max(diff)) / scale


def _relative_norm(candidate: np.ndarray, reference: np.ndarray) -> float:
    diff = float(np.linalg.norm(candidate.astype(np.float64) - reference.astype(np.float64)))
    norm = float(np.linalg.norm(reference))
    return diff / norm if norm > 0 else diff


def check_equivariance(config: PipelineConfig, scan_path: str, boxes_path: str) -> Report:
    '''
    For every group element g, transforms the scan and boxes by g and
    measures:

      a. the largest backbone feature difference between channel i of the
         transformed run and channel pi_g(i) of the original,
      b. the A* difference between the transformed run and the original A*
         resampled by g, over the interior of the raster,
      c. the relative norm difference of the pooled proposal features, after
         reversing the lattice y order for reflecting elements.

    Raises:
        RefusalError: if the group is not closed or the range is not
            symmetric about the sensor.
    '''
    model_group = build_group(config.group.n_rotations, resolved_beta(config), config.group.include_reflection)
    if not model_group.is_closed:
        raise RefusalError(
            f'N * beta = {config.group.n_rotations} * {resolved_beta(config)} is not a multiple of 2pi; '
            f'channel permutations, and with them the equivariance checks, need a closed group'
        )
    _check_symmetric_range(config)

    points, boxes = _read_inputs(scan_path, boxes_path)
    model = build_model(config, points.num_features)
    group = model.group
    base = encode_scene(config, model, points, boxes)
    tol = config.check
    grid = config.vsa.grid_per_axis
    channels = config.attention.channels

    residuals: Dict[str, List[float]] = {'a': [], 'b': [], 'c': []}
    tolerances: Dict[str, List[float]] = {'a': [], 'b': [], 'c': []}
    for g, action in enumerate(group.actions):
        moved = encode_scene(config, model, apply_to_points(action, points),
                             ProposalSet(tuple(apply_to_box(action, b) for b in boxes), boxes.scores))
        perm = group.permutation(g)
        exact = action.maps_square_lattice()

        residuals['a'].append(max(
            (channel_residual(moved.encoded[i], base.encoded[perm[i]]) for i in range(group.order)),
            default=0.0))
        tolerances['a'].append(tol.permutation_tolerance)

        residuals['b'].append(_bev_residual(moved.bev, resample_bev(base.bev, action), tol.interior_margin))
        tolerances['b'].append(tol.bev_lattice_tolerance if exact else tol.bev_interp_tolerance)

        worst = 0.0
        for k in range(len(boxes)):
            reference = base.instances[k]
            if action.reflect:
                reference = regroup_mirrored(reference, grid, channels)
            worst = max(worst, _relative_norm(moved.instances[k], reference))
        residuals['c'].append(worst)
        tolerances['c'].append(tol.tivoxel_lattice_tolerance if exact else tol.tivoxel_interp_tolerance)
        logger.info('g%d (%s): a=%.3g b=%.3g c=%.3g', g, action,
                    residuals['a'][-1], residuals['b'][-1], residuals['c'][-1])

    report = Report()
    report.add('group_order', group.order)
    report.add('num_proposals', len(boxes))
    for name in ('a', 'b', 'c'):
        report.add_test(name, residuals[name], tolerances[name])
    report.add('overall.pass', report.passed)
    return report
