'''
A deterministic synthetic street scene: ground, three car-sized boxes and
some clutter, all inside the default detection range.
'''
import logging
import math
import os
from typing import List, Tuple

import numpy as np

from eqvx import io
from eqvx.pointcloud import Box3D, PointCloud, ProposalSet

logger = logging.getLogger(__name__)

GROUND_Z = -1.6

SCENE_BOXES = (
    Box3D((5.0, 2.0, GROUND_Z + 0.85), (3.9, 1.6, 1.5), 0.3),
    Box3D((-4.0, -5.0, GROUND_Z + 0.85), (4.1, 1.7, 1.5), -1.2),
    Box3D((2.0, -7.0, GROUND_Z + 0.9), (4.2, 1.7, 1.6), 2.0),
)


def sample_box_surface(box: Box3D, count: int, rng: np.random.Generator,
                       intensity: Tuple[float, float]=(0.5, 0.9)) -> PointCloud:
    '''
    Draws points on the four sides and the top of a box, as a LiDAR would
    see a car body.
    '''
    half = np.asarray(box.size) / 2
    face = rng.integers(0, 5, size=count)
    local = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    local[face == 0, 0] = half[0]
    local[face == 1, 0] = -half[0]
    local[face == 2, 1] = half[1]
    local[face == 3, 1] = -half[1]
    local[face == 4, 2] = half[2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.empty_like(local)
    xyz[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    xyz[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    xyz[:, 2] = local[:, 2] + box.center[2]
    return PointCloud(xyz, rng.uniform(*intensity, size=count))


def make_mini_scene(seed: int=0, num_points: int=20000,
                    half_extent: float=9.5) -> Tuple[PointCloud, ProposalSet]:
    '''
    Returns the synthetic scene and its boxes. Coordinates are rounded to
    float32 so the scene survives a round trip through a ``.bin`` file.
    '''
    rng = np.random.default_rng(seed)
    per_object = num_points // 10
    num_clutter = num_points // 6
    num_ground = num_points - per_object * len(SCENE_BOXES) - num_clutter

    ground_xy = rng.uniform(-half_extent, half_extent, size=(num_ground, 2))
    ground = PointCloud(
        np.column_stack([ground_xy, GROUND_Z + rng.normal(0.0, 0.02, size=num_ground)]),
        rng.uniform(0.05, 0.3, size=num_ground),
    )
    # clutter keeps clear of the sensor so no point sits at the origin
    clutter_xy = rng.uniform(-half_extent, half_extent, size=(num_clutter, 2))
    clutter_xy[np.hypot(clutter_xy[:, 0], clutter_xy[:, 1]) < 1.0] += 1.0
    clutter = PointCloud(
        np.column_stack([clutter_xy, rng.uniform(GROUND_Z, 1.0, size=num_clutter)]),
        rng.uniform(0.0, 1.0, size=num_clutter),
    )

    scene = ground.concat(clutter)
    for box in SCENE_BOXES:
        scene = scene.select(~box.contains(scene.xyz))
        scene = scene.concat(sample_box_surface(box, per_object, rng))

    scene = PointCloud(scene.xyz.astype(np.float32).astype(np.float64),
                       scene.features.astype(np.float32).astype(np.float64))
    return scene, ProposalSet.of(SCENE_BOXES)


def write_mini_scene(out_dir: str, seed: int=0, num_points: int=20000) -> List[str]:
    '''
    Writes ``scan.bin``, ``boxes.txt`` and a ``bank/`` directory holding the
    three objects, for the augmentation command.
    '''
    scene, boxes = make_mini_scene(seed, num_points)
    os.makedirs(out_dir, exist_ok=True)
    scan_path = os.path.join(out_dir, 'scan.bin')
    boxes_path = os.path.join(out_dir, 'boxes.txt')
    io.write_point_bin(scene, scan_path)
    io.write_boxes(boxes, boxes_path)

    bank_dir = os.path.join(out_dir, 'bank')
    bank = [(f'car_{k:03d}', box, scene.select(box.contains(scene.xyz)))
            for k, box in enumerate(boxes)]
    io.write_bank(bank, bank_dir)
    logger.info('wrote %d-point scene with %d boxes to %s', len(scene), len(boxes), out_dir)
    return [scan_path, boxes_path, bank_dir]
