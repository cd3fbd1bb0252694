'''
Brute-force reference implementations used by the test suite.

Nothing here calls into the module it checks: convolution goes through
scipy.ndimage, interpolation and neighbour search are plain loops, and box
geometry is recomputed from centre, size and yaw.
'''
import dataclasses
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from eqvx.exceptions import InvalidArgumentError, OracleError, RefusalError

logger = logging.getLogger(__name__)

# largest dense grid the convolution oracle materialises, in voxels
MAX_DENSE_VOXELS = 64 ** 3


@dataclasses.dataclass(frozen=True)
class FiniteDiffSpec:
    '''
    Args:
        step: Perturbation applied to each input entry.
        scheme: Only 'central' is supported.
        relative_tolerance: Pass threshold for the reported error.
        abs_floor: Lower bound of the relative-error denominator, so that
            gradients near zero are judged absolutely.
    '''
    step: float = 1e-5
    scheme: str = 'central'
    relative_tolerance: float = 1e-4
    abs_floor: float = 1e-3

    def __post_init__(self):
        if self.step <= 0:
            raise InvalidArgumentError(f'step must be positive, got {self.step}')
        if self.scheme != 'central':
            raise InvalidArgumentError(f'unsupported scheme {self.scheme!r}')


@dataclasses.dataclass
class FiniteDiffReport:
    numeric: Dict[str, np.ndarray]
    max_relative_error: Dict[str, float]
    worst_index: Dict[str, Tuple[int, ...]]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def densify(coords: np.ndarray, features: np.ndarray, spatial_shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Returns the (nx, ny, nz, C) dense grid and (nx, ny, nz) occupancy of a
    coordinate list.
    '''
    nx, ny, nz = spatial_shape
    features = np.asarray(features, dtype=np.float64)
    dense = np.zeros((nx, ny, nz, features.shape[1]))
    occupied = np.zeros((nx, ny, nz), dtype=bool)
    for (ix, iy, iz), value in zip(np.asarray(coords, dtype=np.int64), features):
        dense[ix, iy, iz] = value
        occupied[ix, iy, iz] = True
    return dense, occupied


def dense_conv_oracle(dense_grid: np.ndarray, kernel: np.ndarray, stride: int=1, mode: str='subm',
                      occupied: Optional[np.ndarray]=None) -> np.ndarray:
    '''
    Zero-padded 3D convolution of an (nx, ny, nz, C_in) grid with a
    (k, k, k, C_in, C_out) kernel, without bias or activation. Output voxel o
    sees input voxels o * stride + offset.

    Args:
        dense_grid: The input grid.
        kernel: The weights.
        stride: Stride on every axis.
        mode: 'subm' masks the output to ``occupied`` (default: nonzero input
            voxels); any other mode returns the full strided grid.
        occupied: Boolean (nx, ny, nz) occupancy for 'subm'.

    Raises:
        RefusalError: if the grid exceeds MAX_DENSE_VOXELS.
    '''
    grid = np.asarray(dense_grid, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if int(np.prod(grid.shape[:3])) > MAX_DENSE_VOXELS:
        raise RefusalError(f'grid {grid.shape[:3]} exceeds the dense oracle cap of {MAX_DENSE_VOXELS} voxels')
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    out = np.zeros(grid.shape[:3] + (c_out,))
    for co in range(c_out):
        for ci in range(c_in):
            out[..., co] += ndimage.correlate(grid[..., ci], kernel[..., ci, co], mode='constant', cval=0.0)
    if mode == 'subm':
        if occupied is None:
            occupied = np.any(grid != 0, axis=-1)
        return out * occupied[..., None]
    return out[::stride, ::stride, ::stride]


def naive_bilinear(data: np.ndarray, origin: Tuple[float, float], pixel_size: Tuple[float, float],
                   x: float, y: float) -> np.ndarray:
    'Textbook bilinear interpolation of an (H, W, C) raster, zero outside.'
    height, width, channels = data.shape
    gx = (x - origin[0]) / pixel_size[0] - 0.5
    gy = (y - origin[1]) / pixel_size[1] - 0.5
    left = int(math.floor(gx))
    bottom = int(math.floor(gy))
    tx = gx - left
    ty = gy - bottom
    result = np.zeros(channels)
    for dv, wy in ((0, 1 - ty), (1, ty)):
        for du, wx in ((0, 1 - tx), (1, tx)):
            u, v = left + du, bottom + dv
            if 0 <= u < width and 0 <= v < height:
                result += wx * wy * data[v, u]
    return result


def exhaustive_vsa(grid_points: np.ndarray, coords: np.ndarray, centres: np.ndarray, features: np.ndarray,
                   radii: Sequence[float], max_neighbors: Sequence[int],
                   mlps: Sequence[Sequence[Tuple[np.ndarray, np.ndarray]]],
                   projection: np.ndarray) -> np.ndarray:
    '''
    Voxel set abstraction by scanning every voxel for every grid point.
    Neighbours are ranked by distance, then by (ix, iy, iz).
    '''
    grid_points = np.asarray(grid_points, dtype=np.float64)
    width = len(mlps[0][-1][1])
    rows = []
    for point in grid_points:
        per_radius = []
        for radius, cap, mlp in zip(radii, max_neighbors, mlps):
            ranked = []
            for k in range(len(centres)):
                d = math.sqrt(sum((centres[k][a] - point[a]) ** 2 for a in range(3)))
                if d <= radius:
                    ranked.append((d, tuple(int(c) for c in coords[k]), k))
            ranked.sort()
            best = np.zeros(width)
            for _, _, k in ranked[:cap]:
                h = np.concatenate([features[k], centres[k] - point])
                for w, b in mlp:
                    h = np.maximum(h @ w + b, 0.0)
                best = np.maximum(best, h)
            per_radius.append(best)
        rows.append(np.concatenate(per_radius) @ projection)
    return np.array(rows)


def spherical_binning_oracle(xyz: np.ndarray, azimuth_resolution: float,
                             elevation_resolution: float) -> List[int]:
    'Record indices kept by angular binning, one per occupied bin, ascending.'
    best: Dict[Tuple[int, int], Tuple[float, float, int]] = {}
    for i, (x, y, z) in enumerate(np.asarray(xyz, dtype=np.float64)):
        az = math.atan2(y, x)
        el = math.atan2(z, math.hypot(x, y))
        a = math.floor(az / azimuth_resolution)
        e = math.floor(el / elevation_resolution)
        off = math.hypot(az - (a + 0.5) * azimuth_resolution, el - (e + 0.5) * elevation_resolution)
        candidate = (off, math.sqrt(x * x + y * y + z * z), i)
        if (a, e) not in best or candidate < best[(a, e)]:
            best[(a, e)] = candidate
    return sorted(v[2] for v in best.values())


def rectangle(center: Sequence[float], size: Sequence[float], yaw: float) -> List[Tuple[float, float]]:
    'Counter-clockwise BEV corners of an oriented box.'
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = size[0] / 2, size[1] / 2
    corners = []
    for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        corners.append((center[0] + c * lx - s * ly, center[1] + s * lx + c * ly))
    return corners


def point_in_oriented_box(point: Sequence[float], center: Sequence[float], size: Sequence[float],
                          yaw: float, tolerance: float=1e-9) -> bool:
    'Half-plane test against the four footprint edges plus a z-interval test.'
    if abs(point[2] - center[2]) > size[2] / 2 + tolerance:
        return False
    corners = rectangle(center, size, yaw)
    for i in range(4):
        (x0, y0), (x1, y1) = corners[i], corners[(i + 1) % 4]
        edge_len = math.hypot(x1 - x0, y1 - y0)
        cross = (x1 - x0) * (point[1] - y0) - (y1 - y0) * (point[0] - x0)
        if cross / edge_len < -tolerance:
            return False
    return True


def polygon_area(polygon: Sequence[Tuple[float, float]]) -> float:
    'Shoelace area; positive for counter-clockwise polygons.'
    area = 0.0
    for i in range(len(polygon)):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % len(polygon)]
        area += x0 * y1 - x1 * y0
    return area / 2


def clip_convex_polygon(subject: Sequence[Tuple[float, float]],
                        clip: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    'Sutherland-Hodgman clipping of ``subject`` by the counter-clockwise convex ``clip``.'
    output = list(subject)
    for i in range(len(clip)):
        if not output:
            break
        (cx0, cy0), (cx1, cy1) = clip[i], clip[(i + 1) % len(clip)]

        def side(p):
            return (cx1 - cx0) * (p[1] - cy0) - (cy1 - cy0) * (p[0] - cx0)

        def crossing(p, q):
            sp, sq = side(p), side(q)
            t = sp / (sp - sq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        inputs, output = output, []
        for j in range(len(inputs)):
            current, previous = inputs[j], inputs[j - 1]
            if side(current) >= 0:
                if side(previous) < 0:
                    output.append(crossing(previous, current))
                output.append(current)
            elif side(previous) >= 0:
                output.append(crossing(previous, current))
    return output


def bev_iou(a, b) -> float:
    '''
    Intersection over union of the BEV footprints of two boxes (anything
    with ``center``, ``size`` and ``yaw``).
    '''
    pa = rectangle(a.center, a.size, a.yaw)
    pb = rectangle(b.center, b.size, b.yaw)
    clipped = clip_convex_polygon(pa, pb)
    inter = abs(polygon_area(clipped)) if len(clipped) >= 3 else 0.0
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return min(1.0, max(0.0, inter / union))


def finite_diff_check(fn: Callable[..., float], inputs: Dict[str, np.ndarray],
                      spec: FiniteDiffSpec=FiniteDiffSpec(),
                      analytic: Optional[Dict[str, np.ndarray]]=None) -> FiniteDiffReport:
    '''
    Central-difference gradient of the scalar ``fn(**inputs)`` with respect
    to every entry of every input.

    Args:
        fn: A pure scalar function of the named arrays.
        inputs: Named float64 arrays; they are not modified.
        spec: Step and tolerance.
        analytic: Optional gradients to compare against, keyed like ``inputs``.
            Without it, errors are reported as zero.

    Raises:
        OracleError: if ``fn`` returns a non-finite value.
    '''
    base = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}

    def evaluate(values):
        result = float(fn(**values))
        if not math.isfinite(result):
            raise OracleError(f'function returned non-finite value {result}')
        return result

    evaluate(base)
    numeric: Dict[str, np.ndarray] = {}
    errors: Dict[str, float] = {}
    worst: Dict[str, Tuple[int, ...]] = {}
    for name, value in base.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + spec.step
            plus = evaluate(base)
            value[index] = original - spec.step
            minus = evaluate(base)
            value[index] = original
            grad[index] = (plus - minus) / (2 * spec.step)
        numeric[name] = grad
        if analytic is None or not grad.size:
            errors[name], worst[name] = 0.0, ()
            continue
        expected = np.asarray(analytic[name], dtype=np.float64).reshape(grad.shape)
        denom = np.maximum(np.maximum(np.abs(expected), np.abs(grad)), spec.abs_floor)
        relative = np.abs(expected - grad) / denom
        flat = int(np.argmax(relative))
        errors[name] = float(relative.flat[flat])
        worst[name] = tuple(int(i) for i in np.unravel_index(flat, grad.shape))
    return FiniteDiffReport(numeric, errors, worst, spec.relative_tolerance)
