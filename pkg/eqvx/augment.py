'''
Distance-aware augmentation: objects from a bank are pushed away from the
sensor, thinned out the way a LiDAR would see them at the new range, partly
occluded and pasted into a scene.
'''
import dataclasses
import logging
import math
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from eqvx import io
from eqvx.exceptions import InvalidArgumentError
from eqvx.pointcloud import Box3D, PointCloud, ProposalSet
from eqvx.utils import wrap_angle

logger = logging.getLogger(__name__)

SAMPLERS = ('spherical', 'random', 'fps')


@dataclasses.dataclass(frozen=True)
class LidarModel:
    '''
    Angular resolution of the sensor, which sits at the origin.
    Defaults match a 64-beam sensor: 0.2 deg azimuth, 0.4 deg elevation.
    '''
    azimuth_resolution: float = math.radians(0.2)
    elevation_resolution: float = math.radians(0.4)

    def __post_init__(self):
        if self.azimuth_resolution <= 0 or self.elevation_resolution <= 0:
            raise InvalidArgumentError('LiDAR resolutions must be positive')


@dataclasses.dataclass(frozen=True)
class AugParams:
    '''
    Args:
        distance_offset_range: (min, max) meters an object is pushed away.
        occlusion_probability: Chance that an inserted object loses a sector.
        occlusion_sector_range: (min, max) width in radians of that sector.
        max_insertions: Number of insertion attempts per scene.
        seed: Seed of the generator driving all random choices.
        sampler: 'spherical', or the 'random' / 'fps' baselines.
        rotate_objects: Whether objects are also rotated about their centre.
        rotation_range: (min, max) radians for that rotation.
    '''
    distance_offset_range: Tuple[float, float] = (0.0, 20.0)
    occlusion_probability: float = 0.5
    occlusion_sector_range: Tuple[float, float] = (0.005, 0.03)
    max_insertions: int = 5
    seed: int = 0
    sampler: str = 'spherical'
    rotate_objects: bool = False
    rotation_range: Tuple[float, float] = (-math.pi / 4, math.pi / 4)

    def __post_init__(self):
        for name in ('distance_offset_range', 'occlusion_sector_range', 'rotation_range'):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgumentError(f'{name} must have min <= max, got ({lo}, {hi})')
        if self.distance_offset_range[0] < 0:
            raise InvalidArgumentError('distance offsets must be nonnegative')
        if not 0 <= self.occlusion_probability <= 1:
            raise InvalidArgumentError(f'occlusion_probability must be in [0, 1], got {self.occlusion_probability}')
        if self.max_insertions < 0:
            raise InvalidArgumentError(f'max_insertions must be nonnegative, got {self.max_insertions}')
        if self.sampler not in SAMPLERS:
            raise InvalidArgumentError(f'sampler must be one of {SAMPLERS}, got {self.sampler!r}')


def shift_object(box: Box3D, points: PointCloud, delta: float) -> Tuple[Box3D, PointCloud]:
    '''
    Moves the box and its points by ``delta`` meters along the BEV ray from
    the sensor through the box centre. Yaw and z are unchanged.

    Raises:
        InvalidArgumentError: for a negative delta or a box centred on the sensor.
    '''
    if delta < 0:
        raise InvalidArgumentError(f'delta must be nonnegative, got {delta}')
    bev_range = math.hypot(box.center[0], box.center[1])
    if bev_range == 0:
        raise InvalidArgumentError('box centre is at the sensor origin; no ray to shift along')
    if delta == 0:
        return box, points
    step = np.array([box.center[0] / bev_range * delta, box.center[1] / bev_range * delta, 0.0])
    shifted = Box3D(tuple(np.asarray(box.center) + step), box.size, box.yaw)
    return shifted, points.with_xyz(points.xyz + step)


def rotate_object(box: Box3D, points: PointCloud, angle: float) -> Tuple[Box3D, PointCloud]:
    'Rotates the box and its points about the box centre.'
    c, s = math.cos(angle), math.sin(angle)
    rel = points.xyz - np.asarray(box.center)
    xyz = points.xyz.copy()
    xyz[:, 0] = box.center[0] + c * rel[:, 0] - s * rel[:, 1]
    xyz[:, 1] = box.center[1] + s * rel[:, 0] + c * rel[:, 1]
    return Box3D(box.center, box.size, box.yaw + angle), points.with_xyz(xyz)


def spherical_resample_indices(points: PointCloud, lidar: LidarModel) -> np.ndarray:
    '''
    Bins the points by (azimuth, elevation) at the sensor resolution and
    keeps, per bin, the point nearest the bin's angular centre; ties go to
    the smaller range, then the earlier record.

    Returns:
        The kept record indices, ascending.

    Raises:
        InvalidArgumentError: if a point sits at the sensor origin.
    '''
    if not len(points):
        return np.zeros(0, dtype=np.int64)
    x, y, z = points.xyz[:, 0], points.xyz[:, 1], points.xyz[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    if np.any(rng == 0):
        raise InvalidArgumentError(f'point {int(np.flatnonzero(rng == 0)[0])} is at the sensor origin')
    azimuth = np.arctan2(y, x)
    elevation = np.arctan2(z, np.hypot(x, y))
    az_bin = np.floor(azimuth / lidar.azimuth_resolution).astype(np.int64)
    el_bin = np.floor(elevation / lidar.elevation_resolution).astype(np.int64)
    off_centre = np.hypot(azimuth - (az_bin + 0.5) * lidar.azimuth_resolution,
                          elevation - (el_bin + 0.5) * lidar.elevation_resolution)

    order = np.lexsort((np.arange(len(points)), rng, off_centre, el_bin, az_bin))
    bins = np.stack([az_bin[order], el_bin[order]], axis=1)
    first = np.r_[True, np.any(bins[1:] != bins[:-1], axis=1)]
    return np.sort(order[first])


def spherical_resample(points: PointCloud, lidar: LidarModel) -> PointCloud:
    'Keeps one point per angular bin; the output is a subset of the input records, in input order.'
    return points.select(spherical_resample_indices(points, lidar))


def random_subsample(points: PointCloud, count: int, rng: np.random.Generator) -> PointCloud:
    'Baseline sampler: ``count`` records drawn without replacement, in input order.'
    count = min(count, len(points))
    return points.select(np.sort(rng.choice(len(points), size=count, replace=False)))


def farthest_point_subsample(points: PointCloud, count: int) -> PointCloud:
    'Baseline sampler: greedy farthest point sampling from record 0, in input order.'
    count = min(count, len(points))
    if count == 0:
        return points.select(np.zeros(0, dtype=np.int64))
    chosen = [0]
    dist = np.sum((points.xyz - points.xyz[0]) ** 2, axis=1)
    for _ in range(1, count):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points.xyz - points.xyz[nxt]) ** 2, axis=1))
    return points.select(np.sort(chosen))


def simulate_occlusion(points: PointCloud, params: AugParams, rng: np.random.Generator) -> PointCloud:
    '''
    With probability ``occlusion_probability`` removes every point whose
    azimuth lies in a sector of random width centred somewhere on the
    object; otherwise returns the input.

    The centre is drawn uniformly between the smallest and largest point
    azimuth, measured relative to the bearing of the object's centroid so
    that objects straddling the -x axis do not wrap. The trigger draw is
    always consumed; the sector draws only when triggered and non-empty.
    '''
    if rng.uniform() >= params.occlusion_probability:
        return points
    if not len(points):
        return points
    azimuth = np.arctan2(points.xyz[:, 1], points.xyz[:, 0])
    centroid = points.xyz[:, :2].mean(axis=0)
    bearing = math.atan2(centroid[1], centroid[0])
    relative = wrap_angle(azimuth - bearing)
    centre = bearing + rng.uniform(relative.min(), relative.max())
    width = rng.uniform(*params.occlusion_sector_range)
    hidden = np.abs(wrap_angle(azimuth - centre)) <= width / 2
    logger.debug('occlusion sector %.4f +- %.4f rad hides %d points', centre, width / 2, int(hidden.sum()))
    return points.select(~hidden)


def _resample(points: PointCloud, params: AugParams, lidar: LidarModel,
              rng: np.random.Generator) -> PointCloud:
    kept = spherical_resample(points, lidar)
    if params.sampler == 'random':
        return random_subsample(points, len(kept), rng)
    if params.sampler == 'fps':
        return farthest_point_subsample(points, len(kept))
    return kept


def augment_scene(scene: PointCloud, scene_boxes: ProposalSet,
                  bank: Sequence[Tuple[Box3D, PointCloud]], params: AugParams,
                  lidar: LidarModel) -> Tuple[PointCloud, ProposalSet]:
    '''
    Inserts up to ``max_insertions`` bank objects into the scene.

    Each attempt draws an object, pushes it away by a random offset,
    resamples and occludes its points, and keeps it only if its footprint
    has zero BEV overlap with every box already in the scene. Scene points
    inside an inserted box are removed.

    Raises:
        InvalidArgumentError: naming the first bank object with points
            outside its box.
    '''
    for k, (box, points) in enumerate(bank):
        if len(points) and not np.all(box.contains(points.xyz)):
            raise InvalidArgumentError(f'bank object {k} has points outside its box')

    if params.max_insertions == 0 or not bank:
        return scene, scene_boxes

    rng = np.random.default_rng(params.seed)
    footprints: List[Polygon] = [Polygon(b.bev_corners()) for b in scene_boxes]
    inserted = 0
    for attempt in range(params.max_insertions):
        box, points = bank[int(rng.integers(len(bank)))]
        delta = rng.uniform(*params.distance_offset_range)
        if params.rotate_objects:
            box, points = rotate_object(box, points, rng.uniform(*params.rotation_range))
        box, points = shift_object(box, points, delta)
        points = simulate_occlusion(_resample(points, params, lidar, rng), params, rng)

        footprint = Polygon(box.bev_corners())
        if any(footprint.intersection(other).area > 0 for other in footprints):
            logger.debug('insertion %d rejected: overlaps an existing box', attempt)
            continue

        scene = scene.select(~box.contains(scene.xyz)).concat(points)
        scene_boxes = scene_boxes.append(box)
        footprints.append(footprint)
        inserted += 1

    logger.info('augment_scene: inserted %d of %d attempts', inserted, params.max_insertions)
    return scene, scene_boxes


def augment_directory(scan_path: str, boxes_path: str, bank_dir: str, out_dir: str,
                      params: AugParams, lidar: LidarModel) -> Tuple[str, str]:
    '''
    Augments one scan with objects from a bank directory and writes
    ``scan.bin`` and ``boxes.txt`` to ``out_dir``.

    Returns:
        The paths of the written scan and box files.
    '''
    scene = io.read_point_bin(scan_path)
    boxes = io.read_boxes(boxes_path)
    bank = [(box, points) for _, box, points in io.read_bank(bank_dir)]
    scene, boxes = augment_scene(scene, boxes, bank, params, lidar)
    os.makedirs(out_dir, exist_ok=True)
    scan_out = os.path.join(out_dir, 'scan.bin')
    boxes_out = os.path.join(out_dir, 'boxes.txt')
    io.write_point_bin(scene, scan_out)
    io.write_boxes(boxes, boxes_out)
    return scan_out, boxes_out


def retained_counts(box: Box3D, points: PointCloud, offsets: Sequence[float], lidar: LidarModel,
                    params: Optional[AugParams]=None, seeds: Sequence[int]=(0,)) -> List[float]:
    '''
    Mean number of points kept after shifting the object by each offset,
    resampling and occluding, averaged over ``seeds``.
    '''
    params = params or AugParams()
    means = []
    for offset in offsets:
        counts = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            _, shifted = shift_object(box, points, offset)
            counts.append(len(simulate_occlusion(_resample(shifted, params, lidar, rng), params, rng)))
        means.append(float(np.mean(counts)))
    return means
