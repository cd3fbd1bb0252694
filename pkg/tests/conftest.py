import numpy as np
import pytest

from eqvx.config import parse_config
from eqvx.pointcloud import PointCloud
from eqvx.scene import make_mini_scene, write_mini_scene

# 41 cells per axis; after the stride, pixel centres sit on integers
SMALL_CONFIG = '''
# quarter turns with reflections
group.n_rotations = 4
voxel.size = 0.5, 0.5, 0.5
voxel.range = -10.25, -10.25, -2.0, 10.25, 10.25, 1.5
backbone.layers = subm:3:8, spconv:3:2:8
vsa.radii = 1.0, 2.0
vsa.max_neighbors = 8, 16
vsa.mlp_widths = 8
vsa.grid_per_axis = 2
attention.channels = 4
'''

SMALL_SCENE_POINTS = 4000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return parse_config(SMALL_CONFIG, source='small')


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / 'small.cfg'
    path.write_text(SMALL_CONFIG, encoding='utf-8')
    return str(path)


@pytest.fixture
def mini_scene():
    return make_mini_scene(seed=0, num_points=SMALL_SCENE_POINTS)


@pytest.fixture
def scene_dir(tmp_path):
    'scan.bin, boxes.txt and bank/ of the mini scene.'
    out = tmp_path / 'scene'
    write_mini_scene(str(out), seed=0, num_points=SMALL_SCENE_POINTS)
    return out


@pytest.fixture
def random_cloud(rng):
    'Factory for uniform clouds with one intensity channel.'
    def make(count, half_extent, z_range=(-0.9, 0.9)):
        xy = rng.uniform(-half_extent, half_extent, size=(count, 2))
        z = rng.uniform(*z_range, size=(count, 1))
        return PointCloud(np.hstack([xy, z]), rng.uniform(0.0, 1.0, size=count))
    return make
