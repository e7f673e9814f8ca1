"""Per-frame traverse records and their versioned CSV schema.

Schema v1, one row per processed frame:

    t, mode, true_x, true_y, true_z, est_lateral, true_lateral,
    vo_matches, map_matches

Floats are written with repr precision, so a load(save(log)) round trip is
bit-exact. The first line is a version sentinel; a wrong sentinel raises
SchemaVersionMismatch and malformed rows raise CorruptFile.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFile, SchemaVersionMismatch
from .repeat import RepeatMode

SCHEMA_LINE = "# monovtr-traverse-log v1"
_COLUMNS = [
    "t",
    "mode",
    "true_x",
    "true_y",
    "true_z",
    "est_lateral",
    "true_lateral",
    "vo_matches",
    "map_matches",
]


@dataclass
class TraverseLog:
    t: list[float] = field(default_factory=list)
    mode: list[RepeatMode] = field(default_factory=list)
    true_xyz: list[np.ndarray] = field(default_factory=list)
    est_lateral: list[float] = field(default_factory=list)
    true_lateral: list[float] = field(default_factory=list)
    vo_matches: list[int] = field(default_factory=list)
    map_matches: list[int] = field(default_factory=list)

    def append(self, t, mode, true_xyz, est_lateral, true_lateral, vo_matches, map_matches):
        if self.t and t <= self.t[-1]:
            raise ValueError("timestamps must be strictly increasing")
        self.t.append(float(t))
        self.mode.append(mode)
        self.true_xyz.append(np.asarray(true_xyz, dtype=np.float64))
        self.est_lateral.append(float(est_lateral))
        self.true_lateral.append(float(true_lateral))
        self.vo_matches.append(int(vo_matches))
        self.map_matches.append(int(map_matches))

    def __len__(self) -> int:
        return len(self.t)

    def distances(self) -> np.ndarray:
        """Cumulative true distance travelled, one entry per frame."""
        if not self.t:
            return np.zeros(0)
        xyz = np.stack(self.true_xyz)
        steps = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def save_log(log: TraverseLog, path) -> None:
    lines = [SCHEMA_LINE, ",".join(_COLUMNS)]
    for i in range(len(log)):
        x, y, z = log.true_xyz[i]
        lines.append(
            ",".join(
                [
                    repr(log.t[i]),
                    log.mode[i].value,
                    repr(float(x)),
                    repr(float(y)),
                    repr(float(z)),
                    repr(log.est_lateral[i]),
                    repr(log.true_lateral[i]),
                    str(log.vo_matches[i]),
                    str(log.map_matches[i]),
                ]
            )
        )
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_log(path) -> TraverseLog:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SCHEMA_LINE:
        found = lines[0] if lines else "<empty>"
        raise SchemaVersionMismatch(f"{path}: expected {SCHEMA_LINE!r}, found {found!r}")
    if len(lines) < 2 or lines[1] != ",".join(_COLUMNS):
        raise CorruptFile(f"{path}: bad column header")
    log = TraverseLog()
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(_COLUMNS):
            raise CorruptFile(f"{path}:{lineno}: expected {len(_COLUMNS)} columns")
        try:
            log.append(
                float(parts[0]),
                RepeatMode(parts[1]),
                np.array([float(parts[2]), float(parts[3]), float(parts[4])]),
                float(parts[5]),
                float(parts[6]),
                int(parts[7]),
                int(parts[8]),
            )
        except (ValueError, KeyError) as exc:
            raise CorruptFile(f"{path}:{lineno}: {exc}") from exc
    return log


def sliding_mean(values, window: int) -> np.ndarray:
    """Centred sliding-window mean; shrinking windows at the edges."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(values)
    out = np.empty(n)
    half_lo = (window - 1) // 2
    half_hi = window - half_lo
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(n):
        lo = max(0, i - half_lo)
        hi = min(n, i + half_hi)
        out[i] = (csum[hi] - csum[lo]) / (hi - lo)
    return out
