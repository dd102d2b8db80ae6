"""Analytic primitive solids voxelized on a cubic grid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, OccupancyError

GRID = 32
MIN_OCCUPANCY = 0.01
MAX_OCCUPANCY = 0.60
PRIMITIVES = ("box", "sphere", "cylinder", "l_shape", "two_box")

# Number of size parameters each primitive expects.
_SIZE_ARITY = {"box": 3, "sphere": 1, "cylinder": 2, "l_shape": 4, "two_box": 7}


@dataclass(frozen=True)
class ShapeSpec:
    """A primitive placed in the unit cube.

    ``size`` holds half-extents / radii as unit-cube fractions:

    - box: (hx, hy, hz)
    - sphere: (r,)
    - cylinder: (r, half_height) along the local z axis
    - l_shape: (hx, hy, hz, thickness), an L in the local xy plane
    - two_box: (hx1, hy1, hz1, hx2, hy2, hz2, gap_offset)

    ``quarter_turns`` rotates by 90 degree steps about x, y, z (applied in
    that order), then ``yaw`` (radians) about z. ``translation`` offsets the
    center from (0.5, 0.5, 0.5).
    """

    primitive: str
    size: tuple
    quarter_turns: tuple = (0, 0, 0)
    yaw: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ConfigError(f"unknown primitive {self.primitive!r}")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "quarter_turns", tuple(int(q) % 4 for q in self.quarter_turns))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if len(self.size) != _SIZE_ARITY[self.primitive]:
            raise ConfigError(f"{self.primitive} needs {_SIZE_ARITY[self.primitive]} size values, got {self.size}")
        if min(self.size) <= 0:
            raise ConfigError(f"sizes must be positive, got {self.size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["quarter_turns"] = list(self.quarter_turns)
        d["translation"] = list(self.translation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(**d)

    @classmethod
    def random(cls, seed: int) -> "ShapeSpec":
        """Sample a spec whose solid stays well inside the unit cube."""
        rng = np.random.default_rng(seed)
        primitive = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
        u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
        if primitive == "box":
            size = (u(0.1, 0.3), u(0.1, 0.3), u(0.1, 0.3))
        elif primitive == "sphere":
            size = (u(0.15, 0.35),)
        elif primitive == "cylinder":
            size = (u(0.1, 0.25), u(0.12, 0.3))
        elif primitive == "l_shape":
            size = (u(0.15, 0.3), u(0.15, 0.3), u(0.08, 0.25), u(0.06, 0.12))
        else:
            size = (u(0.08, 0.16), u(0.1, 0.25), u(0.1, 0.25),
                    u(0.08, 0.16), u(0.1, 0.25), u(0.1, 0.25), u(0.1, 0.16))
        turns = tuple(int(q) for q in rng.integers(0, 4, size=3))
        yaw = u(-0.3, 0.3)
        reach = bounding_radius(primitive, size)
        slack = max(0.0, 0.5 - reach)
        translation = tuple(u(-slack, slack) * 0.5 for _ in range(3))
        return cls(primitive, size, turns, yaw, translation, seed)


def bounding_radius(primitive: str, size) -> float:
    """Radius of a sphere around the local origin that contains the solid."""
    if primitive == "sphere":
        return size[0]
    if primitive == "cylinder":
        return math.hypot(size[0], size[1])
    if primitive == "two_box":
        hx1, hy1, hz1, hx2, hy2, hz2, off = size
        return max(math.sqrt((off + hx1) ** 2 + hy1 ** 2 + hz1 ** 2),
                   math.sqrt((off + hx2) ** 2 + hy2 ** 2 + hz2 ** 2))
    return math.sqrt(size[0] ** 2 + size[1] ** 2 + size[2] ** 2)


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    # Quarter turns must be exact so axis-aligned shapes stay axis-aligned.
    c, s = round(c, 12), round(s, 12)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def rotation_matrix(spec: ShapeSpec) -> np.ndarray:
    r = np.eye(3)
    for axis, q in enumerate(spec.quarter_turns):
        r = _axis_rotation(axis, q * math.pi / 2) @ r
    if spec.yaw:
        c, s = math.cos(spec.yaw), math.sin(spec.yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ r
    return r


def _inside(primitive: str, size, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if primitive == "box":
        hx, hy, hz = size
        return (np.abs(x) <= hx) & (np.abs(y) <= hy) & (np.abs(z) <= hz)
    if primitive == "sphere":
        return x * x + y * y + z * z <= size[0] ** 2
    if primitive == "cylinder":
        r, hh = size
        return (x * x + y * y <= r * r) & (np.abs(z) <= hh)
    if primitive == "l_shape":
        hx, hy, hz, t = size
        zin = np.abs(z) <= hz
        foot = (np.abs(x) <= hx) & (y >= -hy) & (y <= -hy + t)
        stem = (x >= -hx) & (x <= -hx + t) & (np.abs(y) <= hy)
        return zin & (foot | stem)
    hx1, hy1, hz1, hx2, hy2, hz2, off = size
    a = (np.abs(x + off) <= hx1) & (np.abs(y) <= hy1) & (np.abs(z) <= hz1)
    b = (np.abs(x - off) <= hx2) & (np.abs(y) <= hy2) & (np.abs(z - 0.5 * hz1) <= hz2)
    return a | b


def voxel_centers(side: int = GRID) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def gen_shape(spec: ShapeSpec, side: int = GRID, check: bool = True) -> np.ndarray:
    """Binary occupancy grid ``v[x, y, z]`` from the analytic inside-test at voxel centers.

    Raises :class:`OccupancyError` (a regenerate signal) when the occupied
    fraction falls outside [1%, 60%] and ``check`` is set.
    """
    centers = voxel_centers(side)
    origin = 0.5 + np.asarray(spec.translation)
    local = (centers - origin) @ rotation_matrix(spec)  # row-vector form of R^T (c - o)
    grid = _inside(spec.primitive, spec.size, local)
    if check:
        frac = float(grid.mean())
        if not MIN_OCCUPANCY <= frac <= MAX_OCCUPANCY:
            raise OccupancyError(
                f"occupancy {frac:.3%} outside [{MIN_OCCUPANCY:.0%}, {MAX_OCCUPANCY:.0%}] for {spec}", frac)
    return grid
