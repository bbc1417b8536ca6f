"""Synthetic 2D world: silhouette lidar, ground-truth grids, a T-junction
occlusion scenario, and a deterministic network link.

The world is planar: roads are convex polygons flush with the ground,
vehicles and obstacles are oriented rectangles that occlude lidar beams.
A beam reports the nearest silhouette intersection; where no silhouette
blocks it, it reports ground returns sampled densely along its visible
extent inside road polygons (the 2.5D reading of a high-resolution
scanner: ground is seen wherever it is visible).  Ground-truth grids label
cells from these returns: road returns mark free space, everything else
occupied with the object's listed velocity, and the ego footprint is
stamped from self-reported data.

Scenario stepping is single-threaded and deterministic; emitted grids are
immutable snapshots handed to the fusion pipeline.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fusion import VELOCITY_VARIANCE_FLOOR, stamp_self_report
from .grid import LOCAL, Dogma, Pose

__all__ = [
    "ROAD_SURFACE",
    "VEHICLE",
    "OBSTACLE",
    "WorldObject",
    "LidarHit",
    "LidarScan",
    "NetLink",
    "raycast",
    "ground_truth_dogma",
    "VehicleSpec",
    "ScenarioConfig",
    "Scenario",
    "build_t_junction_scenario",
    "default_config_text",
]

ROAD_SURFACE = "road_surface"
VEHICLE = "vehicle"
OBSTACLE = "obstacle"

_KIND_CODES = {ROAD_SURFACE: 0, VEHICLE: 1, OBSTACLE: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class WorldObject:
    """One world entity: a road polygon or an oriented rectangle.

    Rectangles carry ``pose`` plus ``length`` (along heading) and
    ``width``; road surfaces carry a convex ``polygon`` and are static.
    """

    object_id: str
    kind: str
    pose: Pose | None = None
    length: float = 0.0
    width: float = 0.0
    polygon: np.ndarray | None = None
    velocity: tuple[float, float] = (0.0, 0.0)  # (v_east, v_north)
    connected: bool = False

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.kind == ROAD_SURFACE:
            if self.polygon is None:
                raise ValueError("road surfaces need a polygon")
            if any(self.velocity):
                raise ValueError("road surfaces are static")
        elif self.pose is None or self.length <= 0.0 or self.width <= 0.0:
            raise ValueError(f"{self.object_id!r} needs a pose and positive dims")

    def corners(self) -> np.ndarray:
        if self.polygon is not None:
            return np.asarray(self.polygon, dtype=float)
        half_l, half_w = self.length / 2.0, self.width / 2.0
        local = np.array(
            [[-half_l, -half_w], [half_l, -half_w], [half_l, half_w], [-half_l, half_w]]
        )
        return self.pose.to_world(local)


def road_rectangle(object_id: str, x0: float, y0: float, x1: float, y1: float) -> WorldObject:
    polygon = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    return WorldObject(object_id=object_id, kind=ROAD_SURFACE, polygon=polygon)


@dataclass(frozen=True)
class LidarHit:
    """One labeled return: range and sensor-frame azimuth."""

    range: float
    azimuth: float
    kind: str
    object_id: str


class LidarScan:
    """Array-backed sequence of :class:`LidarHit`.

    ``object_index`` refers into ``id_table`` (the scanned world's object
    order), keeping per-hit bookkeeping integer-only.
    """

    def __init__(self, sensor_pose: Pose, ranges, azimuths, kind_codes, object_index, id_table):
        self.sensor_pose = sensor_pose
        self.ranges = np.asarray(ranges, dtype=float)
        self.azimuths = np.asarray(azimuths, dtype=float)
        self.kind_codes = np.asarray(kind_codes, dtype=np.int8)
        self.object_index = np.asarray(object_index, dtype=np.int64)
        self.id_table = list(id_table)

    def __len__(self) -> int:
        return int(self.ranges.size)

    def __getitem__(self, i: int) -> LidarHit:
        return LidarHit(
            range=float(self.ranges[i]),
            azimuth=float(self.azimuths[i]),
            kind=_KIND_NAMES[int(self.kind_codes[i])],
            object_id=self.id_table[int(self.object_index[i])],
        )

    def points(self) -> np.ndarray:
        """World coordinates of all returns, shape (n, 2)."""
        theta = self.sensor_pose.yaw + self.azimuths
        return np.column_stack(
            [
                self.sensor_pose.x + self.ranges * np.cos(theta),
                self.sensor_pose.y + self.ranges * np.sin(theta),
            ]
        )


def _ray_rectangle(origin, dirs, obj: WorldObject) -> np.ndarray:
    """Per-beam distance to an oriented rectangle (inf where missed)."""
    rot = obj.pose.rotation()
    rel = np.array([origin[0] - obj.pose.x, origin[1] - obj.pose.y]) @ rot
    d = dirs @ rot
    half = np.array([obj.length / 2.0, obj.width / 2.0])
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    for axis in range(2):
        dk = d[:, axis]
        ok = rel[axis]
        parallel = np.abs(dk) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - ok) / dk
            t2 = (half[axis] - ok) / dk
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside = abs(ok) <= half[axis]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_far > 1e-9)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, t, np.inf)


def _inside_convex(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Point-in-convex-polygon mask; boundary counts as inside."""
    verts = np.asarray(polygon, dtype=float)
    n = len(verts)
    area2 = 0.0
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        area2 += ax * by - bx * ay
    sign = 1.0 if area2 >= 0.0 else -1.0
    inside = np.ones(points.shape[:-1], dtype=bool)
    for i in range(n):
        a = verts[i]
        b = verts[(i + 1) % n]
        cross = (b[0] - a[0]) * (points[..., 1] - a[1]) - (b[1] - a[1]) * (
            points[..., 0] - a[0]
        )
        inside &= sign * cross >= -1e-12
    return inside


def raycast(
    objects,
    sensor_pose: Pose,
    n_beams: int = 3600,
    max_range: float = 50.0,
    exclude_id: str | None = None,
    ground_sample_step: float = 0.075,
) -> LidarScan:
    """Scan the world with equally spaced beams over 360 degrees.

    Each beam reports the nearest silhouette intersection within
    ``max_range`` (the excluded object, normally the ego vehicle, casts no
    return).  Along its unobstructed extent the beam also reports ground
    returns every ``ground_sample_step`` meters wherever the sample point
    lies on a road polygon, so visible road surface is densely labeled.
    """
    if n_beams < 1:
        raise ValueError("need at least one beam")
    azimuths = np.arange(n_beams) * (2.0 * math.pi / n_beams)
    theta = sensor_pose.yaw + azimuths
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    origin = (sensor_pose.x, sensor_pose.y)

    nearest = np.full(n_beams, np.inf)
    nearest_obj = np.full(n_beams, -1, dtype=np.int64)
    roads = []
    for index, obj in enumerate(objects):
        if obj.kind == ROAD_SURFACE:
            roads.append((index, obj))
            continue
        if obj.object_id == exclude_id:
            continue
        t = _ray_rectangle(origin, dirs, obj)
        closer = t < nearest
        nearest[closer] = t[closer]
        nearest_obj[closer] = index

    out_ranges = []
    out_azimuths = []
    out_kinds = []
    out_index = []

    # Ground returns along the visible extent of each beam.
    if roads:
        samples = np.arange(ground_sample_step / 2.0, max_range, ground_sample_step)
        limit = np.minimum(nearest, max_range)
        visible = samples[None, :] < limit[:, None]
        pts = origin + samples[None, :, None] * dirs[:, None, :]
        on_road = np.zeros(visible.shape, dtype=bool)
        road_of = np.full(visible.shape, -1, dtype=np.int64)
        for index, obj in roads:
            mask = _inside_convex(pts, obj.polygon) & ~on_road
            on_road |= mask
            road_of[mask] = index
        keep = visible & on_road
        beam_idx, sample_idx = np.nonzero(keep)
        out_ranges.append(samples[sample_idx])
        out_azimuths.append(azimuths[beam_idx])
        out_kinds.append(np.zeros(beam_idx.size, dtype=np.int8))
        out_index.append(road_of[keep])

    kind_by_index = np.array([_KIND_CODES[o.kind] for o in objects], dtype=np.int8)
    beam_idx = np.nonzero(nearest <= max_range)[0]
    obstacle_index = nearest_obj[beam_idx]
    out_ranges.append(nearest[beam_idx])
    out_azimuths.append(azimuths[beam_idx])
    out_kinds.append(kind_by_index[obstacle_index])
    out_index.append(obstacle_index)

    return LidarScan(
        sensor_pose,
        np.concatenate(out_ranges),
        np.concatenate(out_azimuths),
        np.concatenate(out_kinds),
        np.concatenate(out_index),
        [o.object_id for o in objects],
    )


def ground_truth_dogma(
    scan: LidarScan,
    ego: WorldObject,
    objects,
    size: int,
    cell_size: float,
    timestamp: float,
) -> Dogma:
    """Build the labeled ground-truth grid of one vehicle.

    Cells holding a road return become certainly free; cells holding any
    other return become certainly occupied with the velocity of the object
    that produced it (occupied labels win over road labels in the same
    cell).  Cells without returns stay unknown.  Finally the ego footprint
    is stamped from the self-report.
    """
    grid = Dogma.unknown(
        size=size,
        cell_size=cell_size,
        pose=ego.pose,
        timestamp=timestamp,
        kind=LOCAL,
        source_id=ego.object_id,
    )
    if len(scan):
        rows, cols, inside = grid.world_to_index(scan.points())
        road = scan.kind_codes == _KIND_CODES[ROAD_SURFACE]

        sel = inside & road
        grid.free[rows[sel], cols[sel]] = 1.0
        grid.occupied[rows[sel], cols[sel]] = 0.0

        sel = inside & ~road
        grid.occupied[rows[sel], cols[sel]] = 1.0
        grid.free[rows[sel], cols[sel]] = 0.0

        if sel.any():
            # Velocities follow object-list order so overlapping labels
            # resolve deterministically.
            for index, obj in enumerate(objects):
                if obj.kind == ROAD_SURFACE:
                    continue
                mask = sel & (scan.object_index == index)
                if not mask.any():
                    continue
                rr, cc = rows[mask], cols[mask]
                grid.v_east[rr, cc] = obj.velocity[0]
                grid.v_north[rr, cc] = obj.velocity[1]
                grid.var_v_east[rr, cc] = VELOCITY_VARIANCE_FLOOR
                grid.var_v_north[rr, cc] = VELOCITY_VARIANCE_FLOOR
                grid.cov_v[rr, cc] = 0.0

    stamp_self_report(
        grid, ego.pose, (ego.length, ego.width), ego.velocity
    )
    return grid


class NetLink:
    """Deterministic one-way message link with latency and jitter.

    Arrival times are clamped to be non-decreasing so per-sender order is
    preserved regardless of jitter.
    """

    def __init__(self, base_latency: float = 0.05, jitter_std: float = 0.0, seed: int = 0):
        if base_latency < 0.0:
            raise ValueError("base latency must be non-negative")
        if jitter_std < 0.0:
            raise ValueError("jitter deviation must be non-negative")
        self.base_latency = base_latency
        self.jitter_std = jitter_std
        self._rng = np.random.default_rng(seed)
        self._last_arrival = -math.inf

    def deliver(self, send_ts: float) -> float:
        jitter = self._rng.normal(0.0, self.jitter_std) if self.jitter_std > 0.0 else 0.0
        arrival = send_ts + max(0.0, self.base_latency + jitter)
        arrival = max(arrival, self._last_arrival)
        self._last_arrival = arrival
        return arrival


# ---------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class VehicleSpec:
    """Initial state of one scenario vehicle (constant velocity)."""

    vehicle_id: str
    x: float
    y: float
    yaw: float
    v_east: float
    v_north: float
    length: float = 4.5
    width: float = 1.8
    connected: bool = False

    def pose_at(self, t: float) -> Pose:
        return Pose(self.x + self.v_east * t, self.y + self.v_north * t, self.yaw)


def _default_vehicles() -> tuple[VehicleSpec, ...]:
    return (
        VehicleSpec("vehicle1", 1.75, -16.55, math.pi / 2.0, 0.0, 3.0, connected=True),
        VehicleSpec("vehicle2", -6.5, -1.75, 0.0, 4.0, 0.0, connected=True),
        VehicleSpec("vehicle3", 10.5, 7.5, -math.pi / 2.0, 0.0, -1.0, connected=False),
    )


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one scenario run."""

    seed: int = 42
    steps: int = 60
    period: float = 0.1
    cell_size: float = 0.15
    local_cells: int = 134
    area_x: float = -15.0
    area_y: float = -15.0
    area_size: float = 30.0
    beams: int = 1440
    lidar_range: float = 18.0
    ground_sample_step: float = 0.075
    base_latency: float = 0.05
    jitter_std: float = 0.0
    decay_half_life: float = 4.0
    coverage: float = 0.9545
    max_acceleration: float = 9.81
    mode: str = "integrate"
    latency_window: int = 20
    road_half_width: float = 3.5
    misalign_vehicle: str = ""
    misalign_east: float = 0.0
    misalign_north: float = 0.0
    vehicles: tuple[VehicleSpec, ...] = field(default_factory=_default_vehicles)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        """Parse a ``key = value`` config file.

        Raises:
            ConfigError: unreadable file, unknown key, or bad value.
        """
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls()
        vehicle_fields: dict[int, dict[str, object]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            m = re.fullmatch(r"vehicle(\d+)_(\w+)", key)
            if m:
                vehicle_fields.setdefault(int(m.group(1)), {})[m.group(2)] = _parse_value(
                    value
                )
                continue
            if not hasattr(cfg, key) or key == "vehicles":
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            default = getattr(cfg, key)
            try:
                setattr(cfg, key, _coerce(value, type(default)))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if vehicle_fields:
            vehicles = []
            for number in sorted(vehicle_fields):
                fields_ = vehicle_fields[number]
                try:
                    vehicles.append(
                        VehicleSpec(vehicle_id=f"vehicle{number}", **fields_)
                    )
                except TypeError as exc:
                    raise ConfigError(f"{path}: vehicle{number}: {exc}") from exc
            cfg.vehicles = tuple(vehicles)
        return cfg


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _coerce(text: str, kind: type):
    if kind is bool:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        raise ValueError(f"expected true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def default_config_text() -> str:
    """A commented config file reproducing the built-in scenario."""
    cfg = ScenarioConfig()
    lines = [
        "# T-junction scenario configuration (key = value)",
        f"seed = {cfg.seed}",
        f"steps = {cfg.steps}",
        f"period = {cfg.period}",
        f"cell_size = {cfg.cell_size}",
        f"local_cells = {cfg.local_cells}",
        f"area_x = {cfg.area_x}",
        f"area_y = {cfg.area_y}",
        f"area_size = {cfg.area_size}",
        f"beams = {cfg.beams}",
        f"lidar_range = {cfg.lidar_range}",
        f"ground_sample_step = {cfg.ground_sample_step}",
        f"base_latency = {cfg.base_latency}",
        f"jitter_std = {cfg.jitter_std}",
        f"decay_half_life = {cfg.decay_half_life}",
        f"coverage = {cfg.coverage}",
        f"max_acceleration = {cfg.max_acceleration}",
        f"mode = {cfg.mode}",
        f"latency_window = {cfg.latency_window}",
        f"road_half_width = {cfg.road_half_width}",
        "",
        "# vehicles: pose, constant velocity, dims, connectivity",
    ]
    for i, v in enumerate(cfg.vehicles, 1):
        lines.append(f"vehicle{i}_x = {v.x}")
        lines.append(f"vehicle{i}_y = {v.y}")
        lines.append(f"vehicle{i}_yaw = {v.yaw!r}")
        lines.append(f"vehicle{i}_v_east = {v.v_east}")
        lines.append(f"vehicle{i}_v_north = {v.v_north}")
        lines.append(f"vehicle{i}_length = {v.length}")
        lines.append(f"vehicle{i}_width = {v.width}")
        lines.append(f"vehicle{i}_connected = {str(v.connected).lower()}")
    return "\n".join(lines) + "\n"


class Scenario:
    """A fully specified, deterministic scenario run."""

    def __init__(self, cfg: ScenarioConfig, static_objects: list[WorldObject]):
        self.cfg = cfg
        self.static_objects = static_objects
        self.links = {
            spec.vehicle_id: NetLink(
                cfg.base_latency, cfg.jitter_std, seed=cfg.seed + 1000 + i
            )
            for i, spec in enumerate(cfg.vehicles)
            if spec.connected
        }

    @property
    def connected(self) -> list[VehicleSpec]:
        return [v for v in self.cfg.vehicles if v.connected]

    def emission_times(self) -> list[float]:
        return [k * self.cfg.period for k in range(self.cfg.steps)]

    def vehicle_object(self, spec: VehicleSpec, t: float) -> WorldObject:
        return WorldObject(
            object_id=spec.vehicle_id,
            kind=VEHICLE,
            pose=spec.pose_at(t),
            length=spec.length,
            width=spec.width,
            velocity=(spec.v_east, spec.v_north),
            connected=spec.connected,
        )

    def world_at(self, t: float) -> list[WorldObject]:
        return self.static_objects + [
            self.vehicle_object(spec, t) for spec in self.cfg.vehicles
        ]

    def _misalignment(self, vehicle_id: str) -> tuple[float, float]:
        if vehicle_id == self.cfg.misalign_vehicle:
            return (self.cfg.misalign_east, self.cfg.misalign_north)
        return (0.0, 0.0)

    def reported_pose(self, spec: VehicleSpec, t: float) -> Pose:
        """Pose the vehicle believes it has (misalignment applied)."""
        true = spec.pose_at(t)
        dx, dy = self._misalignment(spec.vehicle_id)
        return Pose(true.x + dx, true.y + dy, true.yaw)

    def ground_truth(self, vehicle_id: str, t: float) -> Dogma:
        """The labeled grid a vehicle emits at time t.

        The sensor scans from the true pose; a misaligned vehicle then
        registers the grid at its erroneous self-reported pose.
        """
        spec = next(v for v in self.cfg.vehicles if v.vehicle_id == vehicle_id)
        world = self.world_at(t)
        ego = next(o for o in world if o.object_id == vehicle_id)
        scan = raycast(
            world,
            ego.pose,
            n_beams=self.cfg.beams,
            max_range=self.cfg.lidar_range,
            exclude_id=vehicle_id,
            ground_sample_step=self.cfg.ground_sample_step,
        )
        grid = ground_truth_dogma(
            scan, ego, world, self.cfg.local_cells, self.cfg.cell_size, timestamp=t
        )
        dx, dy = self._misalignment(vehicle_id)
        if dx or dy:
            grid = grid.copy(pose=Pose(grid.pose.x + dx, grid.pose.y + dy, grid.pose.yaw))
        return grid


def build_t_junction_scenario(cfg: ScenarioConfig) -> Scenario:
    """Construct the occluded T-junction world.

    A side road joins a main road from the south; buildings fill the four
    corner blocks except for an alley east of the north-east block.  The
    first connected vehicle approaches from the south to turn left, the
    second crosses eastbound, and an unconnected third vehicle creeps south
    out of the alley, initially hidden from both.

    Raises:
        ConfigError: geometrically impossible parameters.
    """
    if cfg.steps < 1:
        raise ConfigError("need at least one emission step")
    if cfg.period <= 0.0:
        raise ConfigError("emission period must be positive")
    if cfg.cell_size <= 0.0 or cfg.local_cells < 1:
        raise ConfigError("local grid geometry must be positive")
    if cfg.area_size <= 0.0:
        raise ConfigError("traffic area must have positive extent")
    cells = cfg.area_size / cfg.cell_size
    if abs(cells - round(cells)) > 1e-6:
        raise ConfigError("area side must be a whole number of cells")
    if cfg.lidar_range <= 0.0 or cfg.beams < 1:
        raise ConfigError("lidar needs positive range and at least one beam")
    hw = cfg.road_half_width
    if hw <= 0.0 or 2.0 * hw >= cfg.area_size:
        raise ConfigError("road width must be positive and fit the traffic area")
    if not cfg.vehicles:
        raise ConfigError("scenario needs at least one vehicle")
    for spec in cfg.vehicles:
        if spec.length <= 0.0 or spec.width <= 0.0:
            raise ConfigError(f"{spec.vehicle_id}: dims must be positive")

    reach = cfg.area_size / 2.0 + 10.0
    near = hw + 1.0
    far = near + 9.0
    alley_w = 3.5
    statics = [
        road_rectangle("road_main", -reach, -hw, reach, hw),
        road_rectangle("road_side", -hw, -reach, hw, 0.0),
        road_rectangle("road_alley", far - 4.5, hw, far - 4.5 + alley_w, 15.0),
        _building("block_sw", -far, -far, -near, -near),
        _building("block_se", near, -far, far, -near),
        _building("block_nw", -far, near, -near, far),
        _building("block_ne", near, near, far - 4.5, far),
    ]
    return Scenario(cfg, statics)


def _building(object_id: str, x0: float, y0: float, x1: float, y1: float) -> WorldObject:
    return WorldObject(
        object_id=object_id,
        kind=OBSTACLE,
        pose=Pose((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0),
        length=x1 - x0,
        width=y1 - y0,
    )
