"""Georeferenced evidential grids: the cell data model, local and
collective grid geometry, overlap detection, and sub-map extraction.

Grids live in a planar east-north world frame (x east, y north).  Local
grids anchor their pose at the grid center and rotate with the vehicle;
collective grids anchor at the south-west corner and are world-axis
aligned.  A published grid is treated as an immutable snapshot; mutation
happens only inside the fusion pipeline on the single thread that owns a
traffic area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import AlreadyInitialized, NoOverlap
from .evidence import BeliefMass

__all__ = [
    "DEFAULT_CELL_SIDE",
    "DEFAULT_PRIOR_VELOCITY_VAR",
    "LOCAL",
    "COLLECTIVE",
    "Pose",
    "CellState",
    "Dogma",
    "TrafficArea",
    "overlap",
    "convex_overlap",
    "init_collective",
    "extract_submap",
]

#: Grid cell side length in meters used throughout the pipeline.
DEFAULT_CELL_SIDE = 0.15

#: Velocity variance of cells nobody has observed yet: one second of
#: worst-case acceleration, squared.
DEFAULT_PRIOR_VELOCITY_VAR = (9.81 * 1.0) ** 2

LOCAL = "local"
COLLECTIVE = "collective"

_COV_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """Planar pose: meters east, meters north, heading in radians.

    Yaw is normalized to (-pi, pi]; zero faces east, positive turns
    counter-clockwise (toward north).
    """

    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        yaw = math.remainder(self.yaw, math.tau)
        if yaw <= -math.pi:
            yaw += math.tau
        object.__setattr__(self, "yaw", yaw)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def to_world(self, points) -> np.ndarray:
        """Map grid-frame points (..., 2) into the world frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation().T + np.array([self.x, self.y])

    def to_local(self, points) -> np.ndarray:
        """Map world-frame points (..., 2) into this pose's frame."""
        points = np.asarray(points, dtype=float)
        return (points - np.array([self.x, self.y])) @ self.rotation()


@dataclass(frozen=True)
class CellState:
    """Full record of one grid cell: evidence plus velocity statistics.

    Velocities are world-frame north/east components in m/s; the three
    covariance entries form a valid 2x2 matrix.  Cells without occupied
    mass carry zero velocity by convention.
    """

    mass: BeliefMass
    v_north: float = 0.0
    v_east: float = 0.0
    var_v_north: float = 0.0
    var_v_east: float = 0.0
    cov_v: float = 0.0

    def __post_init__(self):
        if self.var_v_north < -_COV_TOL or self.var_v_east < -_COV_TOL:
            raise ValueError("velocity variances must be non-negative")
        bound = self.var_v_north * self.var_v_east
        if self.cov_v * self.cov_v > bound + _COV_TOL:
            raise ValueError("velocity covariance exceeds its variance bound")


_CHANNELS = (
    "occupied",
    "free",
    "v_north",
    "v_east",
    "var_v_north",
    "var_v_east",
    "cov_v",
)


class Dogma:
    """Square georeferenced grid of evidential cell states.

    The seven per-cell features are stored as (size, size) float arrays in
    row-major order: row indexes the grid's local north axis, column the
    local east axis.  ``kind`` selects the anchor convention: ``local``
    grids anchor the pose at the grid center, ``collective`` grids at the
    south-west corner with yaw fixed to zero.
    """

    __slots__ = _CHANNELS + (
        "size",
        "cell_size",
        "pose",
        "timestamp",
        "kind",
        "source_id",
        "_centers",
    )

    def __init__(
        self,
        size: int,
        cell_size: float,
        pose: Pose,
        timestamp: float,
        kind: str,
        source_id: str,
        channels: dict[str, np.ndarray] | None = None,
    ):
        if size <= 0:
            raise ValueError("grid size must be positive")
        if cell_size <= 0:
            raise ValueError("cell side length must be positive")
        if kind not in (LOCAL, COLLECTIVE):
            raise ValueError(f"unknown grid kind {kind!r}")
        if kind == COLLECTIVE and abs(pose.yaw) > 1e-12:
            raise ValueError("collective grids are world-axis aligned (yaw 0)")
        self.size = int(size)
        self.cell_size = float(cell_size)
        self.pose = pose
        self.timestamp = float(timestamp)
        self.kind = kind
        self.source_id = str(source_id)
        self._centers = None
        for name in _CHANNELS:
            arr = None if channels is None else channels.get(name)
            if arr is None:
                arr = np.zeros((size, size))
            else:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != (size, size):
                    raise ValueError(f"channel {name} has shape {arr.shape}")
            setattr(self, name, arr)

    @classmethod
    def unknown(
        cls,
        size: int,
        cell_size: float,
        pose: Pose,
        timestamp: float,
        kind: str,
        source_id: str,
        prior_velocity_var: float = DEFAULT_PRIOR_VELOCITY_VAR,
    ) -> "Dogma":
        """All-ignorance grid with the default velocity prior."""
        g = cls(size, cell_size, pose, timestamp, kind, source_id)
        g.var_v_north.fill(prior_velocity_var)
        g.var_v_east.fill(prior_velocity_var)
        return g

    @property
    def span(self) -> float:
        """Side length of the grid in meters."""
        return self.size * self.cell_size

    def anchor_shift(self) -> float:
        """Offset from pose to the grid's south-west corner along each
        local axis."""
        return 0.0 if self.kind == COLLECTIVE else -0.5 * self.span

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        """World coordinates of one cell center.

        Raises:
            IndexError: row or col outside the grid.
        """
        if not (0 <= row < self.size and 0 <= col < self.size):
            raise IndexError(f"cell ({row}, {col}) outside {self.size}x{self.size} grid")
        shift = self.anchor_shift()
        local = np.array(
            [(col + 0.5) * self.cell_size + shift, (row + 0.5) * self.cell_size + shift]
        )
        x, y = self.pose.to_world(local)
        return float(x), float(y)

    def cell_centers(self) -> np.ndarray:
        """World coordinates of all cell centers, shape (size*size, 2),
        flattened row-major.  Cached; grids must not be re-posed."""
        if self._centers is None:
            shift = self.anchor_shift()
            axis = (np.arange(self.size) + 0.5) * self.cell_size + shift
            cols, rows = np.meshgrid(axis, axis)  # row-major: y varies on axis 0
            local = np.column_stack([cols.ravel(), rows.ravel()])
            self._centers = self.pose.to_world(local)
        return self._centers

    def world_to_index(self, points):
        """Map world points (..., 2) to (rows, cols, inside_mask)."""
        local = self.pose.to_local(points)
        shift = self.anchor_shift()
        cols = np.floor((local[..., 0] - shift) / self.cell_size).astype(np.int64)
        rows = np.floor((local[..., 1] - shift) / self.cell_size).astype(np.int64)
        inside = (rows >= 0) & (rows < self.size) & (cols >= 0) & (cols < self.size)
        return rows, cols, inside

    def footprint_corners(self) -> np.ndarray:
        """World coordinates of the grid's four corners, shape (4, 2)."""
        shift = self.anchor_shift()
        lo, hi = shift, shift + self.span
        corners = np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])
        return self.pose.to_world(corners)

    def cell_state(self, row: int, col: int) -> CellState:
        return CellState(
            mass=BeliefMass(float(self.occupied[row, col]), float(self.free[row, col])),
            v_north=float(self.v_north[row, col]),
            v_east=float(self.v_east[row, col]),
            var_v_north=float(self.var_v_north[row, col]),
            var_v_east=float(self.var_v_east[row, col]),
            cov_v=float(self.cov_v[row, col]),
        )

    def set_cell(self, row: int, col: int, state: CellState) -> None:
        self.occupied[row, col] = state.mass.occupied
        self.free[row, col] = state.mass.free
        self.v_north[row, col] = state.v_north
        self.v_east[row, col] = state.v_east
        self.var_v_north[row, col] = state.var_v_north
        self.var_v_east[row, col] = state.var_v_east
        self.cov_v[row, col] = state.cov_v

    def channels(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _CHANNELS}

    def copy(self, **overrides) -> "Dogma":
        kwargs = dict(
            size=self.size,
            cell_size=self.cell_size,
            pose=self.pose,
            timestamp=self.timestamp,
            kind=self.kind,
            source_id=self.source_id,
        )
        kwargs.update(overrides)
        return Dogma(
            channels={name: getattr(self, name).copy() for name in _CHANNELS},
            **kwargs,
        )


@dataclass
class TrafficArea:
    """World-aligned rectangle that may own one collective grid.

    ``latency`` is the area's transmission-latency tracker (owned by the
    fusion pipeline); ``last_overlap_time`` is the virtual time at which a
    local grid last overlapped the area.
    """

    name: str
    origin: Pose
    width: float
    height: float
    collective: Optional[Dogma] = None
    latency: Any = None
    last_overlap_time: Optional[float] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("traffic area must have positive extent")
        if abs(self.origin.yaw) > 1e-12:
            raise ValueError("traffic areas are world-axis aligned")

    def footprint_corners(self) -> np.ndarray:
        x, y = self.origin.x, self.origin.y
        return np.array(
            [[x, y], [x + self.width, y], [x + self.width, y + self.height], [x, y + self.height]]
        )


def _axes_of(corners: np.ndarray) -> np.ndarray:
    edges = np.roll(corners, -1, axis=0) - corners
    normals = np.column_stack([-edges[:, 1], edges[:, 0]])
    lengths = np.linalg.norm(normals, axis=1)
    return normals[lengths > 1e-12] / lengths[lengths > 1e-12, None]

def convex_overlap(corners_a: np.ndarray, corners_b: np.ndarray, eps: float = 1e-12) -> bool:
    """Separating-axis test for two convex polygons.

    True only for intersections with positive area: polygons sharing just
    an edge or a corner do not overlap.
    """
    for axes in (_axes_of(corners_a), _axes_of(corners_b)):
        for axis in axes:
            pa = corners_a @ axis
            pb = corners_b @ axis
            if min(pa.max(), pb.max()) - max(pa.min(), pb.min()) <= eps:
                return False
    return True


def overlap(a, b) -> bool:
    """Whether two footprints (Dogma, TrafficArea, or (4, 2) corner
    arrays) intersect with positive area.  Symmetric."""
    ca = a.footprint_corners() if hasattr(a, "footprint_corners") else np.asarray(a, dtype=float)
    cb = b.footprint_corners() if hasattr(b, "footprint_corners") else np.asarray(b, dtype=float)
    return convex_overlap(ca, cb)


def init_collective(
    area: TrafficArea,
    cell_size: float,
    timestamp: float = 0.0,
    prior_velocity_var: float = DEFAULT_PRIOR_VELOCITY_VAR,
) -> Dogma:
    """Create the area's collective grid, every cell unknown.

    The grid must tile the area exactly at the requested resolution, so the
    area has to be square with a side divisible by ``cell_size``.

    Raises:
        AlreadyInitialized: the area already owns a collective grid.
    """
    if area.collective is not None:
        raise AlreadyInitialized(f"area {area.name!r} already has a collective grid")
    if abs(area.width - area.height) > 1e-9:
        raise ValueError("collective grids are square; area must be too")
    cells = area.width / cell_size
    size = round(cells)
    if size < 1 or abs(cells - size) > 1e-6:
        raise ValueError(
            f"area side {area.width} is not a multiple of cell size {cell_size}"
        )
    grid = Dogma.unknown(
        size=size,
        cell_size=cell_size,
        pose=Pose(area.origin.x, area.origin.y, 0.0),
        timestamp=timestamp,
        kind=COLLECTIVE,
        source_id=area.name,
        prior_velocity_var=prior_velocity_var,
    )
    area.collective = grid
    return grid


def extract_submap(
    collective: Dogma,
    target_pose: Pose,
    size: int,
    cell_size: float,
    timestamp: float | None = None,
    source_id: str | None = None,
    prior_velocity_var: float = DEFAULT_PRIOR_VELOCITY_VAR,
) -> Dogma:
    """Resample the collective grid onto a vehicle-conformant local grid.

    Each target cell copies the collective cell containing its center
    (nearest-cell resampling); target cells outside the collective grid
    stay unknown.

    Raises:
        NoOverlap: no target cell center lies inside the collective grid.
    """
    out = Dogma.unknown(
        size=size,
        cell_size=cell_size,
        pose=target_pose,
        timestamp=collective.timestamp if timestamp is None else timestamp,
        kind=LOCAL,
        source_id=collective.source_id if source_id is None else source_id,
        prior_velocity_var=prior_velocity_var,
    )
    centers = out.cell_centers()
    rows, cols, inside = collective.world_to_index(centers)
    if not inside.any():
        raise NoOverlap("no target cell center lies inside the collective grid")
    flat_src = rows[inside] * collective.size + cols[inside]
    flat_dst = np.flatnonzero(inside)
    for name in _CHANNELS:
        getattr(out, name).ravel()[flat_dst] = getattr(collective, name).ravel()[flat_src]
    return out
