"""Evidential occupancy-grid fusion for connected vehicles.

A cloud-style fusion node combines the non-synchronized dynamic occupancy
grids of multiple vehicles into a collective grid per traffic area,
compensates transmission latency by per-cell constant-velocity
prediction, and hands each vehicle back a sub-map with measurably less
uncertainty than its own perception.  A built-in 2D simulator provides
labeled lidar ground truth and the occluded T-junction scenario used by
the evaluation suite.
"""

__version__ = "0.1.0"

from .errors import (
    AlreadyInitialized,
    ConfigError,
    GeometryMismatch,
    GridFusionError,
    NegativeLatency,
    NoOverlap,
    NoPose,
    NotInitialized,
    OutOfOrder,
    SingularMatrix,
    TotalConflict,
)
from .evidence import (
    UNKNOWN,
    BeliefMass,
    CombinationResult,
    belief_plausibility,
    combine,
    non_specificity,
    pignistic_probability,
    shannon_entropy,
)
from .grid import (
    DEFAULT_CELL_SIDE,
    CellState,
    Dogma,
    Pose,
    TrafficArea,
    extract_submap,
    init_collective,
    overlap,
)
from .dynamics import (
    KalmanCell,
    NoiseConfig,
    correct,
    observation_noise,
    predict,
    process_noise,
    redistribute_mass,
    z_score,
)
from .fusion import (
    FusionConfig,
    FusionNode,
    LatencyTracker,
    observe_latency,
    stamp_self_report,
)
from .gridio import read_dogma, write_dogma, write_pgm
from .metrics import MetricsRow, compare_grids, grid_metrics
from .simworld import (
    LidarHit,
    NetLink,
    Scenario,
    ScenarioConfig,
    WorldObject,
    build_t_junction_scenario,
    ground_truth_dogma,
    raycast,
)
from .runner import run_scenario, simulate
