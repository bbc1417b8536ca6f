"""Grid snapshot files and raster dumps.

Snapshot format (one grid per file): a header line

    DOGMA1 d c pose_x pose_y yaw timestamp kind source_id

followed by d*d data lines ``m_O m_F v_N v_E var_vN var_vE cov`` in
row-major cell order.  All numbers are decimal text with 9 significant
digits.  Rasters are ASCII portable graymaps (PGM, P2), one per mass
channel, 0-255 linear in mass value, written north-up.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .grid import Dogma, Pose

__all__ = ["format_dogma", "write_dogma", "read_dogma", "write_pgm"]

_FMT = "%.9g"

_COLUMNS = ("occupied", "free", "v_north", "v_east", "var_v_north", "var_v_east", "cov_v")


def format_dogma(dogma: Dogma) -> str:
    header = " ".join(
        [
            "DOGMA1",
            str(dogma.size),
            _FMT % dogma.cell_size,
            _FMT % dogma.pose.x,
            _FMT % dogma.pose.y,
            _FMT % dogma.pose.yaw,
            _FMT % dogma.timestamp,
            dogma.kind,
            dogma.source_id,
        ]
    )
    table = np.column_stack([getattr(dogma, name).ravel() for name in _COLUMNS])
    buf = io.StringIO()
    buf.write(header + "\n")
    np.savetxt(buf, table, fmt=_FMT, delimiter=" ")
    return buf.getvalue()


def write_dogma(dogma: Dogma, path) -> None:
    Path(path).write_text(format_dogma(dogma))


def read_dogma(path) -> Dogma:
    """Parse a snapshot file written by :func:`write_dogma`.

    Raises:
        ValueError: malformed header or wrong number of data lines.
    """
    text = Path(path).read_text()
    newline = text.find("\n")
    if newline < 0:
        raise ValueError(f"{path}: missing snapshot header")
    fields = text[:newline].split()
    if len(fields) != 9 or fields[0] != "DOGMA1":
        raise ValueError(f"{path}: not a DOGMA1 snapshot")
    size = int(fields[1])
    cell_size = float(fields[2])
    pose = Pose(float(fields[3]), float(fields[4]), float(fields[5]))
    timestamp = float(fields[6])
    kind = fields[7]
    source_id = fields[8]
    table = np.loadtxt(io.StringIO(text[newline + 1 :]), ndmin=2)
    if table.shape != (size * size, len(_COLUMNS)):
        raise ValueError(
            f"{path}: expected {size * size} data lines of {len(_COLUMNS)} values,"
            f" got shape {table.shape}"
        )
    channels = {
        name: table[:, i].reshape(size, size) for i, name in enumerate(_COLUMNS)
    }
    return Dogma(
        size=size,
        cell_size=cell_size,
        pose=pose,
        timestamp=timestamp,
        kind=kind,
        source_id=source_id,
        channels=channels,
    )


def write_pgm(values: np.ndarray, path, comment: str | None = None) -> None:
    """Write a mass channel as an ASCII graymap, 0-255 linear in value.

    Row 0 of ``values`` is the grid's southernmost row; the image is
    flipped so north is up.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("raster input must be 2-D")
    levels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(int)
    levels = levels[::-1]  # north-up
    lines = ["P2"]
    if comment:
        lines.append("# " + comment)
    lines.append(f"{values.shape[1]} {values.shape[0]}")
    lines.append("255")
    lines.extend(" ".join(str(v) for v in row) for row in levels)
    Path(path).write_text("\n".join(lines) + "\n")
