"""Cloud-side fusion pipeline.

A fusion node owns traffic areas, receives vehicle self-reports and local
grids, keeps each area's collective grid synchronized in virtual time, and
serves latency-compensated sub-maps back to vehicles.

Per ingest (forward-moving triggers only): the collective is predicted
from its virtual time to the incoming grid's timestamp (occupied mass is
transported by the per-cell motion model and both masses decay toward
ignorance), then every collective cell covered by the incoming grid is
updated (masses by evidential combination, velocities by the per-cell
estimator).  Sub-map production extracts at the vehicle's dead-reckoned
pose and predicts forward by the measured transmission latency so the map
describes the moment it arrives in the vehicle; this delivery prediction
transports mass but does not decay evidence (decay models information
aging in the collective between observations, not transport to the
vehicle).

Each area is owned by a single execution context; ingests for one area
must be applied sequentially in arrival order.  Produced sub-maps are
fresh snapshots and may be consumed concurrently.
"""

from __future__ import annotations

import collections
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .dynamics import NoiseConfig
from .errors import NegativeLatency, NoOverlap, NoPose, NotInitialized, OutOfOrder
from .evidence import combine_arrays
from .grid import (
    DEFAULT_PRIOR_VELOCITY_VAR,
    LOCAL,
    Dogma,
    Pose,
    TrafficArea,
    extract_submap,
    init_collective,
    overlap,
)

__all__ = [
    "VELOCITY_VARIANCE_FLOOR",
    "LatencyTracker",
    "observe_latency",
    "FusionConfig",
    "VehicleReport",
    "IngestStats",
    "FusionNode",
    "stamp_self_report",
    "fuse_measurement",
    "decay_factor",
]

log = logging.getLogger(__name__)

#: Variance assigned to velocities known exactly (self-reports, ground truth).
VELOCITY_VARIANCE_FLOOR = 1e-4

_MASS_EPS = 1e-12


class LatencyTracker:
    """Running mean of vehicle-to-cloud transmission latency.

    Keeps the most recent ``window`` (creation, arrival) samples in a ring
    buffer; the estimate is their arithmetic mean, 0 before any sample.
    """

    def __init__(self, window: int = 20):
        if window < 1:
            raise ValueError("latency window must hold at least one sample")
        self.samples = collections.deque(maxlen=window)

    def observe(self, creation_ts: float, arrival_ts: float) -> float:
        if arrival_ts < creation_ts:
            raise NegativeLatency(
                f"arrival {arrival_ts} precedes creation {creation_ts}"
            )
        self.samples.append((creation_ts, arrival_ts))
        return self.estimate

    @property
    def estimate(self) -> float:
        if not self.samples:
            return 0.0
        return sum(a - c for c, a in self.samples) / len(self.samples)


def observe_latency(tracker: LatencyTracker, creation_ts: float, arrival_ts: float) -> float:
    """Record one transmission-latency sample; returns the new estimate."""
    return tracker.observe(creation_ts, arrival_ts)


def decay_factor(dt: float, half_life: float) -> float:
    """Multiplier applied to both masses after dt seconds of aging."""
    return 2.0 ** (-dt / half_life)


@dataclass(frozen=True)
class FusionConfig:
    """Pipeline tuning knobs.

    ``max_reorder`` is the tolerated lateness of an incoming grid against
    the collective's virtual time (one emission period by default); older
    grids are dropped.  ``velocity_gate`` is the occupied-mass threshold
    both sides must pass before velocities are fused.
    """

    noise: NoiseConfig = NoiseConfig()
    decay_half_life: float = 2.0
    latency_window: int = 20
    mode: str = "integrate"
    max_reorder: float = 0.1
    velocity_gate: float = 0.1

    def __post_init__(self):
        if self.decay_half_life <= 0.0:
            raise ValueError("decay half-life must be positive")
        if self.latency_window < 1:
            raise ValueError("latency window must hold at least one sample")
        if self.mode not in ("integrate", "center_approx"):
            raise ValueError(f"unknown redistribution mode {self.mode!r}")
        if self.max_reorder < 0.0:
            raise ValueError("max_reorder must be non-negative")


@dataclass(frozen=True)
class VehicleReport:
    """Latest self-report of one connected vehicle."""

    pose: Pose
    dims: tuple[float, float]
    velocity: tuple[float, float]  # (v_east, v_north)
    timestamp: float

    def dead_reckoned_pose(self, at_time: float) -> Pose:
        dt = at_time - self.timestamp
        return Pose(
            self.pose.x + self.velocity[0] * dt,
            self.pose.y + self.velocity[1] * dt,
            self.pose.yaw,
        )


@dataclass(frozen=True)
class IngestStats:
    """Diagnostics of one ingest, one line in the pipeline log."""

    timestamp: float
    area: str
    vehicle: str
    dt: float
    mean_conflict: float
    cells_fused: int
    cells_conflict: int
    latency_estimate: float

    def log_line(self) -> str:
        return " ".join(
            [
                "%.9g" % self.timestamp,
                self.area,
                self.vehicle,
                "%.9g" % self.dt,
                "%.9g" % self.mean_conflict,
                str(self.cells_fused),
                str(self.cells_conflict),
                "%.9g" % self.latency_estimate,
            ]
        )


def stamp_self_report(dogma: Dogma, pose: Pose, dims, velocity) -> Dogma:
    """Mark the cells under a vehicle's footprint as certainly occupied.

    ``dims`` is (length, width) along/across the heading; ``velocity`` is
    (v_east, v_north).  Cells whose center lies inside the oriented
    rectangle get full occupied mass and the reported velocity with the
    exact-knowledge variance floor.  A footprint outside the grid changes
    nothing.  Mutates and returns ``dogma``.
    """
    length, width = dims
    if length <= 0.0 or width <= 0.0:
        return dogma
    local = pose.to_local(dogma.cell_centers())
    inside = (np.abs(local[:, 0]) <= length / 2.0) & (
        np.abs(local[:, 1]) <= width / 2.0
    )
    if not inside.any():
        return dogma
    idx = np.flatnonzero(inside)
    v_east, v_north = velocity
    dogma.occupied.ravel()[idx] = 1.0
    dogma.free.ravel()[idx] = 0.0
    dogma.v_east.ravel()[idx] = v_east
    dogma.v_north.ravel()[idx] = v_north
    dogma.var_v_east.ravel()[idx] = VELOCITY_VARIANCE_FLOOR
    dogma.var_v_north.ravel()[idx] = VELOCITY_VARIANCE_FLOOR
    dogma.cov_v.ravel()[idx] = 0.0
    return dogma


@dataclass
class FuseStats:
    cells_fused: int = 0
    cells_conflict: int = 0
    mean_conflict: float = 0.0


def fuse_measurement(target: Dogma, measurement: Dogma, cfg: FusionConfig) -> FuseStats:
    """Update every target cell covered by the measurement grid, in place.

    Masses combine evidentially; totally conflicting cells reset to
    unknown.  Velocities run the per-cell estimator where both sides carry
    occupied mass above the gate; newly observed cells adopt the measured
    velocity outright.
    """
    centers = target.cell_centers()
    rows, cols, inside = measurement.world_to_index(centers)
    if not inside.any():
        return FuseStats()
    tgt_idx = np.flatnonzero(inside)
    src_idx = rows[inside] * measurement.size + cols[inside]

    occ_t = target.occupied.ravel()
    free_t = target.free.ravel()
    pred_occ = occ_t[tgt_idx].copy()
    meas_occ = measurement.occupied.ravel()[src_idx]
    meas_free = measurement.free.ravel()[src_idx]

    fused_occ, fused_free, conflict, dead = combine_arrays(
        pred_occ, free_t[tgt_idx], meas_occ, meas_free
    )
    occ_t[tgt_idx] = fused_occ
    free_t[tgt_idx] = fused_free

    gate = cfg.velocity_gate
    fuse_vel = (pred_occ > gate) & (meas_occ > gate) & ~dead
    adopt_vel = (meas_occ > gate) & ~fuse_vel & ~dead

    meas_ve = measurement.v_east.ravel()[src_idx]
    meas_vn = measurement.v_north.ravel()[src_idx]
    meas_var_ve = measurement.var_v_east.ravel()[src_idx]
    meas_var_vn = measurement.var_v_north.ravel()[src_idx]
    meas_cov = measurement.cov_v.ravel()[src_idx]

    if fuse_vel.any():
        sel = np.flatnonzero(fuse_vel)
        ti = tgt_idx[sel]
        n = sel.size
        z = dynamics.z_score(cfg.noise.coverage)
        pos_var = cfg.noise.cell_size**2 / (4.0 * z * z)

        states = np.empty((n, 4))
        states[:, 0:2] = centers[ti]
        states[:, 2] = target.v_east.ravel()[ti]
        states[:, 3] = target.v_north.ravel()[ti]
        covs = np.zeros((n, 4, 4))
        covs[:, 0, 0] = pos_var
        covs[:, 1, 1] = pos_var
        covs[:, 2, 2] = target.var_v_east.ravel()[ti]
        covs[:, 3, 3] = target.var_v_north.ravel()[ti]
        covs[:, 2, 3] = covs[:, 3, 2] = target.cov_v.ravel()[ti]

        meas_states = np.empty((n, 4))
        meas_states[:, 0:2] = measurement.cell_centers()[src_idx[sel]]
        meas_states[:, 2] = meas_ve[sel]
        meas_states[:, 3] = meas_vn[sel]
        obs = dynamics.observation_noise_batch(
            cfg.noise, meas_var_vn[sel], meas_var_ve[sel], meas_cov[sel]
        )
        new_states, new_covs = dynamics.correct_batch(states, covs, meas_states, obs)

        var_e = np.maximum(new_covs[:, 2, 2], 0.0)
        var_n = np.maximum(new_covs[:, 3, 3], 0.0)
        bound = np.sqrt(var_e * var_n)
        cov_en = np.clip(new_covs[:, 2, 3], -bound, bound)
        target.v_east.ravel()[ti] = new_states[:, 2]
        target.v_north.ravel()[ti] = new_states[:, 3]
        target.var_v_east.ravel()[ti] = var_e
        target.var_v_north.ravel()[ti] = var_n
        target.cov_v.ravel()[ti] = cov_en

    if adopt_vel.any():
        sel = np.flatnonzero(adopt_vel)
        ti = tgt_idx[sel]
        target.v_east.ravel()[ti] = meas_ve[sel]
        target.v_north.ravel()[ti] = meas_vn[sel]
        target.var_v_east.ravel()[ti] = meas_var_ve[sel]
        target.var_v_north.ravel()[ti] = meas_var_vn[sel]
        target.cov_v.ravel()[ti] = meas_cov[sel]

    if dead.any():
        ti = tgt_idx[np.flatnonzero(dead)]
        target.v_east.ravel()[ti] = 0.0
        target.v_north.ravel()[ti] = 0.0
        target.var_v_east.ravel()[ti] = DEFAULT_PRIOR_VELOCITY_VAR
        target.var_v_north.ravel()[ti] = DEFAULT_PRIOR_VELOCITY_VAR
        target.cov_v.ravel()[ti] = 0.0

    return FuseStats(
        cells_fused=int(tgt_idx.size),
        cells_conflict=int(dead.sum()),
        mean_conflict=float(conflict.mean()),
    )


class FusionNode:
    """One fusion service instance.

    Holds the vehicle registry, per-vehicle grid geometry, and diagnostics.
    All grid mutation runs on the caller's thread; drive each traffic area
    from a single ordered queue.
    """

    def __init__(self, config: FusionConfig | None = None):
        self.config = config or FusionConfig()
        self.vehicles: dict[str, VehicleReport] = {}
        self.grid_geometry: dict[str, tuple[int, float]] = {}
        self.diagnostics: list[IngestStats] = []

    # -- self reports -------------------------------------------------

    def report_pose(
        self,
        vehicle_id: str,
        pose: Pose,
        dims: tuple[float, float],
        timestamp: float,
        velocity: tuple[float, float] = (0.0, 0.0),
    ) -> bool:
        """Store a vehicle's latest self-report.

        Stale reports (older than the stored one) are ignored and logged;
        returns whether the report was accepted.
        """
        stored = self.vehicles.get(vehicle_id)
        if stored is not None and timestamp < stored.timestamp:
            log.warning(
                "stale report for %s at %.3f (have %.3f)",
                vehicle_id,
                timestamp,
                stored.timestamp,
            )
            return False
        self.vehicles[vehicle_id] = VehicleReport(
            pose=pose, dims=tuple(dims), velocity=tuple(velocity), timestamp=timestamp
        )
        return True

    # -- ingest -------------------------------------------------------

    def ingest_local(self, area: TrafficArea, local: Dogma) -> Dogma:
        """Fuse one local grid into the area's collective grid.

        Raises:
            NoOverlap: the grid does not touch the area (grid ignored).
            OutOfOrder: the grid is older than the collective's virtual
                time by more than the reorder tolerance (grid dropped).
        """
        if local.kind != LOCAL:
            raise ValueError("only local grids can be ingested")
        if not overlap(area, local):
            raise NoOverlap(
                f"grid from {local.source_id!r} does not overlap area {area.name!r}"
            )
        area.last_overlap_time = (
            local.timestamp
            if area.last_overlap_time is None
            else max(area.last_overlap_time, local.timestamp)
        )
        if area.collective is None:
            init_collective(
                area, self.config.noise.cell_size, timestamp=local.timestamp
            )
        collective = area.collective

        dt = local.timestamp - collective.timestamp
        if dt < -self.config.max_reorder:
            raise OutOfOrder(
                f"grid at {local.timestamp} behind collective time"
                f" {collective.timestamp} by more than {self.config.max_reorder}"
            )
        dt = max(0.0, dt)
        if dt > 0.0:
            self._advance(collective, dt, decay=True)

        stats = fuse_measurement(collective, local, self.config)
        collective.timestamp = max(collective.timestamp, local.timestamp)
        self.grid_geometry[local.source_id] = (local.size, local.cell_size)

        entry = IngestStats(
            timestamp=collective.timestamp,
            area=area.name,
            vehicle=local.source_id,
            dt=dt,
            mean_conflict=stats.mean_conflict,
            cells_fused=stats.cells_fused,
            cells_conflict=stats.cells_conflict,
            latency_estimate=area.latency.estimate if area.latency else 0.0,
        )
        self.diagnostics.append(entry)
        log.debug("%s", entry.log_line())
        return collective

    # -- sub-map service ----------------------------------------------

    def produce_submap(self, area: TrafficArea, vehicle_id: str, now: float) -> Dogma:
        """Extract and forward-predict the map a vehicle is about to
        receive.

        The extraction pose is the vehicle's self-report dead-reckoned to
        the arrival time ``now + latency``; the map is predicted to that
        virtual time (mass transport without evidence decay).

        Raises:
            NotInitialized: the area has no collective grid.
            NoPose: the vehicle never reported a pose.
        """
        if area.collective is None:
            raise NotInitialized(f"area {area.name!r} has no collective grid")
        report = self.vehicles.get(vehicle_id)
        if report is None:
            raise NoPose(f"no pose report for vehicle {vehicle_id!r}")
        horizon_end = now + (area.latency.estimate if area.latency else 0.0)
        geometry = self.grid_geometry.get(vehicle_id)
        if geometry is None:
            size = area.collective.size
            cell = area.collective.cell_size
        else:
            size, cell = geometry
        sub = extract_submap(
            area.collective,
            report.dead_reckoned_pose(horizon_end),
            size=size,
            cell_size=cell,
            timestamp=area.collective.timestamp,
            source_id=vehicle_id,
        )
        horizon = max(0.0, horizon_end - sub.timestamp)
        if horizon > 0.0:
            self._advance(sub, horizon, decay=False)
        sub.timestamp = horizon_end
        return sub

    # -- lifecycle ----------------------------------------------------

    def remove_collective(self, area: TrafficArea, now: float, grace: float) -> None:
        """Drop the collective once no grid overlapped the area for
        ``grace`` seconds."""
        if area.collective is None:
            return
        last = area.last_overlap_time
        if last is None or now - last > grace:
            log.info("removing collective grid of area %s", area.name)
            area.collective = None

    # -- prediction ---------------------------------------------------

    def _advance(self, grid: Dogma, dt: float, decay: bool) -> None:
        """Predict a grid forward by dt seconds, in place.

        Occupied mass is transported cell by cell through the motion
        model; free mass stays put.  With ``decay`` both masses age toward
        ignorance at the configured half-life.
        """
        cfg = self.config
        occ = grid.occupied
        src_rows, src_cols = np.nonzero(occ > _MASS_EPS)
        n = src_rows.size

        acc_mass = np.zeros_like(occ)
        acc_ve = np.zeros_like(occ)
        acc_vn = np.zeros_like(occ)
        acc_ee = np.zeros_like(occ)
        acc_nn = np.zeros_like(occ)
        acc_en = np.zeros_like(occ)

        if n:
            z = dynamics.z_score(cfg.noise.coverage)
            pos_prior = cfg.noise.cell_size**2 / (4.0 * z * z)
            q = dynamics.process_noise(cfg.noise, dt)
            q_pos = q[0, 0]
            q_vel = q[2, 2]
            dt2 = dt * dt

            flat = src_rows * grid.size + src_cols
            centers = grid.cell_centers()[flat]
            masses = occ[src_rows, src_cols]
            ve = grid.v_east[src_rows, src_cols]
            vn = grid.v_north[src_rows, src_cols]
            var_e = grid.var_v_east[src_rows, src_cols]
            var_n = grid.var_v_north[src_rows, src_cols]
            cov_en = grid.cov_v[src_rows, src_cols]

            base = pos_prior + q_pos
            out_rows: list[np.ndarray] = []
            out_cols: list[np.ndarray] = []
            out_amounts: list[np.ndarray] = []
            out_src: list[np.ndarray] = []
            sigma = np.empty((2, 2))
            for i in range(n):
                mu = (centers[i, 0] + ve[i] * dt, centers[i, 1] + vn[i] * dt)
                sigma[0, 0] = base + dt2 * var_e[i]
                sigma[1, 1] = base + dt2 * var_n[i]
                sigma[0, 1] = sigma[1, 0] = dt2 * cov_en[i]
                r_, c_, a_ = dynamics.redistribute_mass(
                    masses[i], mu, sigma, grid, cfg.mode
                )
                if r_.size:
                    out_rows.append(r_)
                    out_cols.append(c_)
                    out_amounts.append(a_)
                    out_src.append(np.full(r_.size, i, dtype=np.int64))

            if out_rows:
                rr = np.concatenate(out_rows)
                cc = np.concatenate(out_cols)
                aa = np.concatenate(out_amounts)
                si = np.concatenate(out_src)
                vel_e = ve[si] + 0.0
                vel_n = vn[si]
                pvar_e = var_e[si] + q_vel
                pvar_n = var_n[si] + q_vel
                pcov = cov_en[si]
                np.add.at(acc_mass, (rr, cc), aa)
                np.add.at(acc_ve, (rr, cc), aa * vel_e)
                np.add.at(acc_vn, (rr, cc), aa * vel_n)
                np.add.at(acc_ee, (rr, cc), aa * (pvar_e + vel_e * vel_e))
                np.add.at(acc_nn, (rr, cc), aa * (pvar_n + vel_n * vel_n))
                np.add.at(acc_en, (rr, cc), aa * (pcov + vel_e * vel_n))

        lam = decay_factor(dt, cfg.decay_half_life) if decay else 1.0
        new_free = grid.free * lam
        new_occ = acc_mass * lam
        # Additively accumulated mass is capped so the cell stays a valid
        # mass assignment; only the occupied side can overflow.
        np.minimum(new_occ, 1.0 - new_free, out=new_occ)
        np.maximum(new_occ, 0.0, out=new_occ)

        grid.occupied[...] = new_occ
        grid.free[...] = new_free

        carried = acc_mass > _MASS_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            mean_ve = np.where(carried, acc_ve / acc_mass, 0.0)
            mean_vn = np.where(carried, acc_vn / acc_mass, 0.0)
            m2_ee = np.where(carried, acc_ee / acc_mass, 0.0)
            m2_nn = np.where(carried, acc_nn / acc_mass, 0.0)
            m2_en = np.where(carried, acc_en / acc_mass, 0.0)
        mix_var_e = np.maximum(m2_ee - mean_ve**2, 0.0)
        mix_var_n = np.maximum(m2_nn - mean_vn**2, 0.0)
        bound = np.sqrt(mix_var_e * mix_var_n)
        mix_cov = np.clip(m2_en - mean_ve * mean_vn, -bound, bound)

        grid.v_east[...] = mean_ve
        grid.v_north[...] = mean_vn
        grid.var_v_east[...] = np.where(carried, mix_var_e, DEFAULT_PRIOR_VELOCITY_VAR)
        grid.var_v_north[...] = np.where(carried, mix_var_n, DEFAULT_PRIOR_VELOCITY_VAR)
        grid.cov_v[...] = np.where(carried, mix_cov, 0.0)
