'''
The discrete rotation-reflection group acting on the BEV plane.

An action is "reflect, then rotate": a point (x, y, z) is first mirrored
across the x-axis (y -> -y) when ``reflect`` is set, then rotated about the
z-axis by ``rotation_angle``. z and point features are never touched.
'''
import dataclasses
import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from eqvx.exceptions import InvalidArgumentError
from eqvx.pointcloud import Box3D, PointCloud

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# angles closer than this are the same group element
ANGLE_TOLERANCE = 1e-9

_SNAP = 1e-15


def _reduce_angle(angle: float) -> float:
    reduced = math.fmod(float(angle), TWO_PI)
    if reduced < 0:
        reduced += TWO_PI
    if reduced >= TWO_PI:
        reduced = 0.0
    return reduced


def _snap(value: float) -> float:
    for exact in (-1.0, 0.0, 1.0):
        if abs(value - exact) < _SNAP:
            return exact
    return value


def _same_angle(a: float, b: float) -> bool:
    diff = _reduce_angle(a - b)
    return min(diff, TWO_PI - diff) < ANGLE_TOLERANCE


@dataclasses.dataclass(frozen=True)
class TransformAction:
    '''
    One element of the group.

    Args:
        rotation_angle: Rotation about the z-axis in radians, reduced into [0, 2pi).
        reflect: Whether y is mirrored before rotating.
    '''
    rotation_angle: float = 0.0
    reflect: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'rotation_angle', _reduce_angle(self.rotation_angle))
        object.__setattr__(self, 'reflect', bool(self.reflect))

    def matrix2(self) -> np.ndarray:
        'The 2x2 BEV matrix R(angle) @ diag(1, -1 if reflect else 1).'
        c = _snap(math.cos(self.rotation_angle))
        s = _snap(math.sin(self.rotation_angle))
        rot = np.array([[c, -s], [s, c]])
        if self.reflect:
            rot = rot * np.array([1.0, -1.0])
        return rot

    def matrix3(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.matrix2()
        return m

    def is_identity(self) -> bool:
        return not self.reflect and _same_angle(self.rotation_angle, 0.0)

    def maps_square_lattice(self) -> bool:
        'Whether the action maps a centred square lattice onto itself (quarter turns).'
        return _same_angle(4 * self.rotation_angle, 0.0)

    def same_as(self, other: 'TransformAction') -> bool:
        return self.reflect == other.reflect and _same_angle(self.rotation_angle, other.rotation_angle)

    def __str__(self) -> str:
        return f'{"reflect+" if self.reflect else ""}rot({math.degrees(self.rotation_angle):.6g}deg)'


IDENTITY = TransformAction(0.0, False)


def compose(a: TransformAction, b: TransformAction) -> TransformAction:
    '''
    Returns a o b, the action that applies ``b`` first and then ``a``.
    '''
    sign = -1.0 if a.reflect else 1.0
    return TransformAction(a.rotation_angle + sign * b.rotation_angle, a.reflect != b.reflect)


def inverse(a: TransformAction) -> TransformAction:
    'Returns the inverse action; reflections are involutions.'
    if a.reflect:
        return a
    return TransformAction(-a.rotation_angle, False)


def apply_to_xy(action: TransformAction, xy: np.ndarray) -> np.ndarray:
    '''
    Applies the action to an (n, 2) array of BEV coordinates.
    '''
    xy = np.asarray(xy, dtype=np.float64)
    if not action.reflect and action.rotation_angle == 0.0:
        return xy.copy()
    m = action.matrix2()
    out = np.empty_like(xy)
    out[..., 0] = m[0, 0] * xy[..., 0] + m[0, 1] * xy[..., 1]
    out[..., 1] = m[1, 0] * xy[..., 0] + m[1, 1] * xy[..., 1]
    return out


def apply_to_xyz(action: TransformAction, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    out = xyz.copy()
    out[..., :2] = apply_to_xy(action, xyz[..., :2])
    return out


def apply_to_points(action: TransformAction, points: PointCloud) -> PointCloud:
    '''
    Transforms every point of the cloud; z, features and order are preserved.
    The identity action returns the input unchanged.
    '''
    if action.rotation_angle == 0.0 and not action.reflect:
        return points
    return points.with_xyz(apply_to_xyz(action, points.xyz))


def apply_to_box(action: TransformAction, box: Box3D) -> Box3D:
    '''
    Transforms a box: its center as a point, its heading as a direction.

    Raises:
        InvalidArgumentError: if the box size is not strictly positive.
    '''
    if min(box.size) <= 0:
        raise InvalidArgumentError(f'box size must be strictly positive, got {box.size}')
    center = apply_to_xyz(action, np.asarray(box.center))
    if action.reflect:
        yaw = action.rotation_angle - box.yaw
    else:
        yaw = action.rotation_angle + box.yaw
    return Box3D(tuple(center), box.size, yaw)


@dataclasses.dataclass(frozen=True)
class TransformGroup:
    '''
    The discrete group K: N rotations by multiples of ``beta``, optionally
    combined with the x-axis reflection. Built with :func:`build_group`.

    ``actions`` lists the N rotations first and then their reflected
    counterparts; index 0 is always the identity. ``table[i][j]`` is the
    index of actions[i] o actions[j] and is only present for closed groups.
    '''
    n_rotations: int
    beta: float
    include_reflection: bool
    actions: Tuple[TransformAction, ...]
    table: Optional[Tuple[Tuple[int, ...], ...]] = None

    @property
    def order(self) -> int:
        return len(self.actions)

    @property
    def is_closed(self) -> bool:
        return self.table is not None

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> TransformAction:
        return self.actions[index]

    def index_of(self, action: TransformAction) -> int:
        for i, candidate in enumerate(self.actions):
            if candidate.same_as(action):
                return i
        raise InvalidArgumentError(f'action {action} is not an element of the group')

    def compose_index(self, i: int, j: int) -> int:
        'Index of actions[i] o actions[j].'
        if self.table is None:
            raise InvalidArgumentError('group is not closed; no composition table')
        return self.table[i][j]

    def inverse_index(self, i: int) -> int:
        return self.index_of(inverse(self.actions[i]))

    def permutation(self, g: int) -> List[int]:
        '''
        Returns pi_g with T_{pi_g(i)} = T_i o T_g for every channel i.

        Transforming the input by T_g moves channel pi_g(i) of the original
        equivariant set into channel i.
        '''
        if self.table is None:
            raise InvalidArgumentError('group is not closed; channel permutation undefined')
        perm = [self.table[i][g] for i in range(self.order)]
        if sorted(perm) != list(range(self.order)):
            raise InvalidArgumentError('group actions are not distinct; channel permutation undefined')
        return perm


def build_group(n_rotations: int, beta: Optional[float]=None,
                include_reflection: bool=True) -> TransformGroup:
    '''
    Builds the rotation-reflection group.

    Args:
        n_rotations: Number of rotations N >= 1.
        beta: Angle resolution in radians; defaults to 2pi/N.
        include_reflection: Whether the N reflected actions are included.

    Returns:
        The group with 2N actions (N without reflection), identity first.
        The composition table is filled iff N*beta is a multiple of 2pi.

    Raises:
        InvalidArgumentError: for non-positive N or beta.
    '''
    if isinstance(n_rotations, bool) or int(n_rotations) != n_rotations or n_rotations < 1:
        raise InvalidArgumentError(f'n_rotations must be a positive integer, got {n_rotations}')
    n_rotations = int(n_rotations)
    if beta is None:
        beta = TWO_PI / n_rotations
    if not np.isfinite(beta) or beta <= 0:
        raise InvalidArgumentError(f'beta must be positive, got {beta}')

    reflections = (False, True) if include_reflection else (False,)
    actions = tuple(
        TransformAction(i * beta, r)
        for r in reflections
        for i in range(n_rotations)
    )

    table = None
    if _same_angle(n_rotations * beta, 0.0):
        rows = []
        for a in actions:
            row = []
            for b in actions:
                composed = compose(a, b)
                row.append(next(k for k, c in enumerate(actions) if c.same_as(composed)))
            rows.append(tuple(row))
        table = tuple(rows)
    else:
        logger.warning('group with N=%d, beta=%g is not closed; closure-dependent checks unavailable',
                       n_rotations, beta)

    return TransformGroup(n_rotations, float(beta), bool(include_reflection), actions, table)
