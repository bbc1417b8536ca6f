"""Uncertainty metrics over grids and the per-step evaluation table."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import GeometryMismatch
from .evidence import binary_entropy, pignistic_array
from .grid import Dogma

__all__ = [
    "MetricsRow",
    "CSV_HEADER",
    "grid_metrics",
    "compare_grids",
    "MassDifference",
    "write_metrics_csv",
    "read_metrics_csv",
]

_FMT = "%.9g"


@dataclass(frozen=True)
class MetricsRow:
    """Per-step comparison of a vehicle's own grid against the fused map.

    Entropy columns are in bits; every metric lies in [0, 1].
    ``mean_conflict`` averages the per-ingest mean conflict of the ingests
    feeding this step (0 when none).
    """

    step: int
    virtual_time: float
    mean_h_local: float
    mean_h_fused: float
    mean_ns_local: float
    mean_ns_fused: float
    mean_mf_local: float
    mean_mf_fused: float
    mean_conflict: float


CSV_HEADER = (
    "step,virtual_time,mean_H_local,mean_H_fused,mean_NS_local,mean_NS_fused,"
    "mean_mF_local,mean_mF_fused,mean_conflict_K"
)


def grid_metrics(dogma: Dogma) -> tuple[float, float, float]:
    """Arithmetic means over all cells: (entropy bits, non-specificity,
    free mass)."""
    p_occ = pignistic_array(dogma.occupied, dogma.free)
    mean_h = float(binary_entropy(p_occ).mean())
    ignorance = np.clip(1.0 - dogma.occupied - dogma.free, 0.0, 1.0)
    return mean_h, float(ignorance.mean()), float(dogma.free.mean())


@dataclass(frozen=True)
class MassDifference:
    """Cell-wise absolute mass difference summary."""

    max: float
    mean: float


def compare_grids(a: Dogma, b: Dogma) -> MassDifference:
    """Summarize |mass(a) - mass(b)| over both channels.

    ``max`` is the largest single-channel difference; ``mean`` averages the
    per-cell sum of both channel differences.

    Raises:
        GeometryMismatch: the grids do not share size, resolution, pose,
            and kind.
    """
    same = (
        a.size == b.size
        and abs(a.cell_size - b.cell_size) < 1e-12
        and abs(a.pose.x - b.pose.x) < 1e-9
        and abs(a.pose.y - b.pose.y) < 1e-9
        and abs(a.pose.yaw - b.pose.yaw) < 1e-12
        and a.kind == b.kind
    )
    if not same:
        raise GeometryMismatch("grids do not share geometry")
    d_occ = np.abs(a.occupied - b.occupied)
    d_free = np.abs(a.free - b.free)
    return MassDifference(
        max=float(max(d_occ.max(), d_free.max())),
        mean=float((d_occ + d_free).mean()),
    )


def write_metrics_csv(rows, path) -> None:
    lines = [CSV_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                [str(row.step)]
                + [
                    _FMT % v
                    for v in (
                        row.virtual_time,
                        row.mean_h_local,
                        row.mean_h_fused,
                        row.mean_ns_local,
                        row.mean_ns_fused,
                        row.mean_mf_local,
                        row.mean_mf_fused,
                        row.mean_conflict,
                    )
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 9:
            raise ValueError(f"{path}: malformed row {line!r}")
        rows.append(
            MetricsRow(
                step=int(parts[0]),
                **{
                    f.name: float(v)
                    for f, v in zip(fields(MetricsRow)[1:], parts[1:])
                },
            )
        )
    return rows
