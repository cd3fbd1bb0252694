import dataclasses
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from eqvx.exceptions import InvalidArgumentError
from eqvx.utils import wrap_angle

Vec3 = Tuple[float, float, float]

# corner signs in box-local (l, w, h) units; bottom face first, clockwise from above
_CORNER_SIGNS = np.array([
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
    [-0.5, -0.5, -0.5],
    [-0.5, 0.5, -0.5],
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [-0.5, -0.5, 0.5],
    [-0.5, 0.5, 0.5],
])


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class PointCloud:
    '''
    LiDAR points with per-point feature channels.

    Args:
        xyz: (n, 3) coordinates in meters.
        features: (n, f) feature channels, f >= 0. Defaults to no features.
    '''
    xyz: np.ndarray
    features: np.ndarray = dataclasses.field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.features is None:
            features = np.zeros((len(xyz), 0), dtype=np.float64)
        else:
            features = np.array(self.features, dtype=np.float64)
            if features.ndim == 1:
                features = features.reshape(-1, 1)
        if features.ndim != 2 or features.shape[0] != xyz.shape[0]:
            raise InvalidArgumentError(
                f'features shape {features.shape} does not match {xyz.shape[0]} points'
            )
        if not np.all(np.isfinite(xyz)) or not np.all(np.isfinite(features)):
            raise InvalidArgumentError('point coordinates and features must be finite')
        object.__setattr__(self, 'xyz', _frozen(xyz))
        object.__setattr__(self, 'features', _frozen(features))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def select(self, index) -> 'PointCloud':
        'Returns the points picked by a boolean mask or integer index array, in that order.'
        return PointCloud(self.xyz[index], self.features[index])

    def with_xyz(self, xyz: np.ndarray) -> 'PointCloud':
        return PointCloud(xyz, self.features)

    def concat(self, other: 'PointCloud') -> 'PointCloud':
        if len(self) and len(other) and other.num_features != self.num_features:
            raise InvalidArgumentError(
                f'cannot concatenate clouds with {self.num_features} and {other.num_features} features'
            )
        if not len(self):
            return other
        if not len(other):
            return self
        return PointCloud(np.vstack([self.xyz, other.xyz]),
                          np.vstack([self.features, other.features]))

    def equals(self, other: 'PointCloud') -> bool:
        'Bitwise equality of coordinates and features.'
        return (self.xyz.shape == other.xyz.shape
                and self.features.shape == other.features.shape
                and self.xyz.tobytes() == other.xyz.tobytes()
                and self.features.tobytes() == other.features.tobytes())

    @staticmethod
    def empty(num_features: int=1) -> 'PointCloud':
        return PointCloud(np.zeros((0, 3)), np.zeros((0, num_features)))


@dataclasses.dataclass(frozen=True)
class Box3D:
    '''
    An oriented 3D box in the LiDAR frame.

    Args:
        center: (x, y, z) of the box center in meters.
        size: (l, w, h) in meters, all strictly positive. l runs along the heading.
        yaw: Heading about the vertical axis, reduced into [-pi, pi).
    '''
    center: Vec3
    size: Vec3
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise InvalidArgumentError('box center and size must have three components')
        if not all(np.isfinite(center)) or not all(np.isfinite(size)) or not np.isfinite(self.yaw):
            raise InvalidArgumentError('box parameters must be finite')
        if min(size) <= 0:
            raise InvalidArgumentError(f'box size must be strictly positive, got {size}')
        object.__setattr__(self, 'center', center)
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'yaw', float(wrap_angle(self.yaw)))

    def corners(self) -> np.ndarray:
        '''
        Returns the (8, 3) corners: bottom face then top face, each starting
        at the front-left corner and going clockwise seen from above.
        '''
        local = _CORNER_SIGNS * np.asarray(self.size)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center)

    def bev_corners(self) -> np.ndarray:
        'Returns the (4, 2) footprint corners in BEV, in polygon order.'
        return self.corners()[:4, :2]

    def contains(self, xyz: np.ndarray, tolerance: float=1e-6) -> np.ndarray:
        '''
        Returns a boolean mask of the points lying inside the box, faces
        included up to ``tolerance`` meters.
        '''
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        rel = xyz - np.asarray(self.center)
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local_x = rel[:, 0] * c + rel[:, 1] * s
        local_y = -rel[:, 0] * s + rel[:, 1] * c
        half = np.asarray(self.size) / 2 + tolerance
        return ((np.abs(local_x) <= half[0])
                & (np.abs(local_y) <= half[1])
                & (np.abs(rel[:, 2]) <= half[2]))


@dataclasses.dataclass(frozen=True)
class ProposalSet:
    '''
    An ordered list of boxes with an optional score per box.
    '''
    boxes: Tuple[Box3D, ...] = ()
    scores: Tuple[Optional[float], ...] = ()

    def __post_init__(self):
        boxes = tuple(self.boxes)
        scores = tuple(self.scores) if self.scores else (None,) * len(boxes)
        if len(scores) != len(boxes):
            raise InvalidArgumentError(f'{len(scores)} scores given for {len(boxes)} boxes')
        for score in scores:
            if score is not None and not np.isfinite(score):
                raise InvalidArgumentError(f'scores must be finite, got {score}')
        object.__setattr__(self, 'boxes', boxes)
        object.__setattr__(self, 'scores', scores)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box3D]:
        return iter(self.boxes)

    def __getitem__(self, index: int) -> Box3D:
        return self.boxes[index]

    def append(self, box: Box3D, score: Optional[float]=None) -> 'ProposalSet':
        return ProposalSet(self.boxes + (box,), self.scores + (score,))

    @staticmethod
    def of(boxes: Sequence[Box3D]) -> 'ProposalSet':
        return ProposalSet(tuple(boxes))
