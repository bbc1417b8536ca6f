"""Per-cell linear-quadratic estimation and belief-mass transport.

Each occupied cell is modeled as a constant-velocity point state
``[x, y, v_x, v_y]`` (x east, y north, so grid velocities map as
v_east -> v_x and v_north -> v_y).  Process noise comes from a worst-case
constant-acceleration bound, observation noise from the grid
discretization plus the velocity covariances carried by the measuring
grid.  After prediction, a cell's occupied mass is spread over the cells
covered by its position distribution.

All functions are pure; redistribution returns additive contributions for
a caller-owned accumulator, so callers may shard sources and merge their
accumulators in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import SingularMatrix
from .grid import CellState, Dogma

__all__ = [
    "NoiseConfig",
    "KalmanCell",
    "z_score",
    "transition_matrix",
    "process_noise",
    "observation_noise",
    "observation_noise_batch",
    "predict",
    "correct",
    "correct_batch",
    "redistribute_mass",
]

#: Mahalanobis radius of the transport kernel window.
KERNEL_RADIUS = 3.0

#: Below this determinant the position distribution is treated as a point.
DEGENERATE_DET = 1e-18

_COND_LIMIT = 1e12

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True)
class NoiseConfig:
    """Noise model parameters.

    ``coverage`` is the probability mass that the worst-case acceleration
    interval (process noise) and the cell interval (observation noise) are
    meant to contain; it is the main tuning knob.
    """

    max_acceleration: float = 9.81
    coverage: float = 0.9545
    cell_size: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.coverage < 1.0:
            raise ValueError(f"coverage must be in (0, 1), got {self.coverage}")
        if self.max_acceleration <= 0.0:
            raise ValueError("max_acceleration must be positive")
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")


@dataclass
class KalmanCell:
    """Point state [x, y, v_x, v_y] with its 4x4 covariance."""

    state: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).reshape(4)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(4, 4)


def z_score(coverage: float) -> float:
    """Half-width, in standard deviations, of the symmetric normal
    interval containing ``coverage`` probability mass.

    Raises:
        ValueError: coverage outside (0, 1).
    """
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must be in (0, 1), got {coverage}")
    return float(math.sqrt(2.0) * special.erfinv(coverage))


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = dt
    f[1, 3] = dt
    return f


def process_noise(cfg: NoiseConfig, dt: float) -> np.ndarray:
    """Constant-acceleration worst-case process noise for one step of dt
    seconds."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    z = z_score(cfg.coverage)
    scale = dt * dt * cfg.max_acceleration**2 / (z * z)
    return np.diag([dt * dt / 4.0, dt * dt / 4.0, 1.0, 1.0]) * scale


def observation_noise(cfg: NoiseConfig, cell: CellState) -> np.ndarray:
    """Observation noise for one measured cell.

    Position variance models the grid discretization (the measured point
    lies somewhere in a cell of side ``cell_size``); the velocity block is
    taken verbatim from the measuring cell's covariance.
    """
    z = z_score(cfg.coverage)
    pos = cfg.cell_size**2 / (4.0 * z * z)
    r = np.zeros((4, 4))
    r[0, 0] = pos
    r[1, 1] = pos
    r[2, 2] = cell.var_v_east
    r[3, 3] = cell.var_v_north
    r[2, 3] = r[3, 2] = cell.cov_v
    return r


def observation_noise_batch(cfg: NoiseConfig, var_v_north, var_v_east, cov_v) -> np.ndarray:
    """(N, 4, 4) observation noise from per-cell velocity covariances."""
    var_v_north = np.asarray(var_v_north, dtype=float)
    z = z_score(cfg.coverage)
    pos = cfg.cell_size**2 / (4.0 * z * z)
    n = var_v_north.shape[0]
    r = np.zeros((n, 4, 4))
    r[:, 0, 0] = pos
    r[:, 1, 1] = pos
    r[:, 2, 2] = var_v_east
    r[:, 3, 3] = var_v_north
    r[:, 2, 3] = cov_v
    r[:, 3, 2] = cov_v
    return r


def predict(cell: KalmanCell, dt: float, process_cov: np.ndarray) -> KalmanCell:
    """Constant-velocity prediction over dt seconds."""
    f = transition_matrix(dt)
    state = f @ cell.state
    cov = f @ cell.covariance @ f.T + process_cov
    cov = 0.5 * (cov + cov.T)
    return KalmanCell(state, cov)


def correct(cell: KalmanCell, measurement, observation_cov) -> KalmanCell:
    """Measurement update with identity observation matrix.

    Raises:
        SingularMatrix: the innovation covariance is numerically singular.
    """
    measurement = np.asarray(measurement, dtype=float).reshape(4)
    r = np.asarray(observation_cov, dtype=float).reshape(4, 4)
    s = cell.covariance + r
    if np.linalg.cond(s) > _COND_LIMIT:
        raise SingularMatrix("innovation covariance is numerically singular")
    gain = cell.covariance @ np.linalg.inv(s)
    state = cell.state + gain @ (measurement - cell.state)
    cov = (np.eye(4) - gain) @ cell.covariance
    cov = 0.5 * (cov + cov.T)
    return KalmanCell(state, cov)


def correct_batch(states, covariances, measurements, observation_covs):
    """Vectorized measurement update over N cells.

    The innovation covariances must be well-conditioned (the pipeline
    guarantees strictly positive position noise); no per-entry singularity
    check is performed.

    Returns:
        (states (N, 4), covariances (N, 4, 4))
    """
    states = np.asarray(states, dtype=float)
    covariances = np.asarray(covariances, dtype=float)
    measurements = np.asarray(measurements, dtype=float)
    observation_covs = np.asarray(observation_covs, dtype=float)
    s = covariances + observation_covs
    # K = P S^-1; both symmetric, so K^T = solve(S, P).
    gains = np.linalg.solve(s, covariances).transpose(0, 2, 1)
    new_states = states + np.einsum("nij,nj->ni", gains, measurements - states)
    eye = np.eye(4)
    new_covs = np.einsum("nij,njk->nik", eye - gains, covariances)
    new_covs = 0.5 * (new_covs + new_covs.transpose(0, 2, 1))
    return new_states, new_covs


def _window_weights(mean_g, cov_g, cell_size, mode):
    """Transport kernel weights in grid coordinates.

    ``mean_g``/``cov_g`` are expressed in the grid frame with the origin at
    the grid's south-west corner.  Candidate cells span the kernel's
    bounding box; a cell is kept when its center lies within Mahalanobis
    radius ``KERNEL_RADIUS`` inflated by the cell half-diagonal, so a
    near-degenerate kernel still reaches every cell it touches.

    Returns:
        (rows, cols, weights, total) with unclipped integer indices;
        ``total`` sums the weights of all kept cells, inside the grid
        or not.
    """
    mx, my = float(mean_g[0]), float(mean_g[1])
    sxx = float(cov_g[0, 0])
    syy = float(cov_g[1, 1])
    sxy = float(cov_g[0, 1])
    det = sxx * syy - sxy * sxy
    sx = math.sqrt(sxx)
    sy = math.sqrt(syy)

    col_lo = math.floor((mx - KERNEL_RADIUS * sx) / cell_size)
    col_hi = math.floor((mx + KERNEL_RADIUS * sx) / cell_size)
    row_lo = math.floor((my - KERNEL_RADIUS * sy) / cell_size)
    row_hi = math.floor((my + KERNEL_RADIUS * sy) / cell_size)
    cols = np.arange(col_lo, col_hi + 1)
    rows = np.arange(row_lo, row_hi + 1)
    cx = (cols + 0.5) * cell_size - mx
    cy = (rows + 0.5) * cell_size - my

    # Elliptical truncation, inflated so cells touching the kernel stay in.
    half_trace = 0.5 * (sxx + syy)
    lam_min = max(half_trace - math.sqrt(max(half_trace**2 - det, 0.0)), 1e-300)
    radius = KERNEL_RADIUS + (cell_size * math.sqrt(0.5)) / math.sqrt(lam_min)
    inv_xx = syy / det
    inv_yy = sxx / det
    inv_xy = -sxy / det
    d2 = (
        inv_xx * cx[None, :] ** 2
        + 2.0 * inv_xy * cy[:, None] * cx[None, :]
        + inv_yy * cy[:, None] ** 2
    )
    keep = d2 <= radius * radius

    diagonal = abs(sxy) < 1e-15 * sx * sy
    if mode == "integrate" and diagonal:
        edges_x = cols * cell_size
        edges_x = np.append(edges_x, (col_hi + 1) * cell_size)
        edges_y = rows * cell_size
        edges_y = np.append(edges_y, (row_hi + 1) * cell_size)
        wx = np.diff(special.ndtr((edges_x - mx) / sx))
        wy = np.diff(special.ndtr((edges_y - my) / sy))
        weights = wy[:, None] * wx[None, :]
    elif mode == "integrate":
        # 5x5 Gauss-Legendre per cell handles the correlated case.
        norm = 1.0 / (2.0 * math.pi * math.sqrt(det))
        half = cell_size / 2.0
        ox = _GL_NODES * half
        gx = cx[None, :, None] + ox[None, None, :]
        gy = cy[:, None, None] + ox[None, None, :]
        px = gx[:, :, None, :]
        py = gy[:, :, :, None]
        q = inv_xx * px * px + 2.0 * inv_xy * px * py + inv_yy * py * py
        dens = norm * np.exp(-0.5 * q)
        w2 = _GL_WEIGHTS * half
        weights = np.einsum("rcij,i,j->rc", dens, w2, w2)
    elif mode == "center_approx":
        norm = 1.0 / (2.0 * math.pi * math.sqrt(det))
        q = (
            inv_xx * cx[None, :] ** 2
            + 2.0 * inv_xy * cy[:, None] * cx[None, :]
            + inv_yy * cy[:, None] ** 2
        )
        weights = norm * np.exp(-0.5 * q) * cell_size * cell_size
    else:
        raise ValueError(f"unknown redistribution mode {mode!r}")

    weights = np.where(keep, weights, 0.0)
    total = float(weights.sum())
    rr, cc = np.nonzero(keep)
    return rows[rr], cols[cc], weights[rr, cc], total


def redistribute_mass(mass, mean, covariance, target: Dogma, mode: str = "integrate"):
    """Spread a cell's occupied mass over the target cells covered by its
    predicted position distribution.

    ``mean`` (world frame, meters) and ``covariance`` (2x2, m^2) describe
    the predicted position.  Weights are renormalized over the whole
    kernel window so that a source whose window lies fully inside the grid
    conserves its mass exactly; mass reaching past the boundary is lost
    proportionally (open-world edge).  A degenerate covariance
    (det < DEGENERATE_DET) collapses to a delta on the cell containing the
    mean.

    Returns:
        (rows, cols, amounts): additive contributions for the caller's
        occupied-mass accumulator; empty arrays when nothing lands inside.
    """
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))
    if mass <= 0.0:
        return empty
    mean = np.asarray(mean, dtype=float).reshape(2)
    cov = np.asarray(covariance, dtype=float).reshape(2, 2)

    pose = target.pose
    shift = target.anchor_shift()
    if abs(pose.yaw) > 1e-12:
        rot = pose.rotation()
        mean_g = pose.to_local(mean) - shift
        cov_g = rot.T @ cov @ rot
    else:
        mean_g = mean - np.array([pose.x, pose.y]) - shift
        cov_g = cov

    det = cov_g[0, 0] * cov_g[1, 1] - cov_g[0, 1] * cov_g[1, 0]
    if det < DEGENERATE_DET:
        col = math.floor(mean_g[0] / target.cell_size)
        row = math.floor(mean_g[1] / target.cell_size)
        if 0 <= row < target.size and 0 <= col < target.size:
            return (
                np.array([row], dtype=np.int64),
                np.array([col], dtype=np.int64),
                np.array([float(mass)]),
            )
        return empty

    rows, cols, weights, total = _window_weights(mean_g, cov_g, target.cell_size, mode)
    if total <= 0.0:
        return empty
    inside = (rows >= 0) & (rows < target.size) & (cols >= 0) & (cols < target.size)
    return rows[inside], cols[inside], mass * weights[inside] / total
