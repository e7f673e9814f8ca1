"""Metrics over traverse logs: lateral statistics, autonomy rate, episodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .repeat import RepeatMode
from .traverselog import TraverseLog


@dataclass(frozen=True)
class FailureEpisode:
    """Contiguous run of frames with fewer map matches than the threshold."""

    start_frame: int
    end_frame: int  # inclusive
    start_distance: float
    end_distance: float


@dataclass(frozen=True)
class EvalReport:
    frames: int
    total_distance: float
    lateral_rms: float
    lateral_max: float
    estimated_vs_true_rms: float  # over LOCALIZED frames
    autonomy_rate: float  # % of distance outside SEARCH/HALTED
    non_autonomous_distance: float  # reported separately as well
    vo_matches_mean: float
    vo_matches_min: int
    map_matches_mean: float
    map_matches_min: int
    failure_episodes: tuple[FailureEpisode, ...]

    def lines(self) -> list[str]:
        out = [
            f"frames                     {self.frames}",
            f"total distance [m]         {self.total_distance:.3f}",
            f"lateral RMS [m]            {self.lateral_rms:.4f}",
            f"lateral max [m]            {self.lateral_max:.4f}",
            f"est-vs-true lateral RMS    {self.estimated_vs_true_rms:.4f}",
            f"autonomy rate [%]          {self.autonomy_rate:.2f}",
            f"non-autonomous dist [m]    {self.non_autonomous_distance:.3f}",
            f"VO matches mean/min        {self.vo_matches_mean:.1f} / {self.vo_matches_min}",
            f"map matches mean/min       {self.map_matches_mean:.1f} / {self.map_matches_min}",
            f"localization failures      {len(self.failure_episodes)}",
        ]
        for ep in self.failure_episodes:
            out.append(
                f"  frames {ep.start_frame}-{ep.end_frame}"
                f" ({ep.start_distance:.2f} m to {ep.end_distance:.2f} m)"
            )
        return out

    def csv_header(self) -> str:
        return (
            "frames,total_distance,lateral_rms,lateral_max,est_vs_true_rms,"
            "autonomy_rate,non_autonomous_distance,vo_matches_mean,map_matches_mean,"
            "failure_episodes"
        )

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.frames),
                repr(self.total_distance),
                repr(self.lateral_rms),
                repr(self.lateral_max),
                repr(self.estimated_vs_true_rms),
                repr(self.autonomy_rate),
                repr(self.non_autonomous_distance),
                repr(self.vo_matches_mean),
                repr(self.map_matches_mean),
                str(len(self.failure_episodes)),
            ]
        )


def evaluate_log(log: TraverseLog, failure_threshold: int = 10) -> EvalReport:
    n = len(log)
    distances = log.distances()
    total = float(distances[-1]) if n else 0.0
    lat = np.asarray(log.true_lateral)
    est = np.asarray(log.est_lateral)
    modes = log.mode

    # distance-weighted autonomy: a step is attributed to the mode it ended in
    if n >= 2:
        steps = np.diff(distances)
        bad = np.array([m in (RepeatMode.SEARCH, RepeatMode.HALTED) for m in modes[1:]])
        non_autonomous = float(np.sum(steps[bad]))
        autonomy = 100.0 if total == 0 else 100.0 * (total - non_autonomous) / total
    else:
        non_autonomous = 0.0
        autonomy = 100.0

    localized = np.array([m == RepeatMode.LOCALIZED for m in modes])
    if np.any(localized):
        gap = float(np.sqrt(np.mean((est[localized] - lat[localized]) ** 2)))
    else:
        gap = float("nan")

    map_matches = np.asarray(log.map_matches)
    vo_matches = np.asarray(log.vo_matches)
    episodes = []
    in_episode = False
    start = 0
    for i in range(n):
        failing = map_matches[i] < failure_threshold
        if failing and not in_episode:
            in_episode, start = True, i
        elif not failing and in_episode:
            episodes.append(
                FailureEpisode(start, i - 1, float(distances[start]), float(distances[i - 1]))
            )
            in_episode = False
    if in_episode:
        episodes.append(
            FailureEpisode(start, n - 1, float(distances[start]), float(distances[n - 1]))
        )

    return EvalReport(
        frames=n,
        total_distance=total,
        lateral_rms=float(np.sqrt(np.mean(lat**2))) if n else 0.0,
        lateral_max=float(np.max(np.abs(lat))) if n else 0.0,
        estimated_vs_true_rms=gap,
        autonomy_rate=autonomy,
        non_autonomous_distance=non_autonomous,
        vo_matches_mean=float(np.mean(vo_matches)) if n else 0.0,
        vo_matches_min=int(np.min(vo_matches)) if n else 0,
        map_matches_mean=float(np.mean(map_matches)) if n else 0.0,
        map_matches_min=int(np.min(map_matches)) if n else 0,
        failure_episodes=tuple(episodes),
    )


def comparison_lines(labels: list[str], reports: list[EvalReport]) -> list[str]:
    """Side-by-side text table for multi-log evaluation."""
    rows = [
        ("lateral RMS [m]", [f"{r.lateral_rms:.4f}" for r in reports]),
        ("lateral max [m]", [f"{r.lateral_max:.4f}" for r in reports]),
        ("autonomy rate [%]", [f"{r.autonomy_rate:.2f}" for r in reports]),
        ("map matches mean", [f"{r.map_matches_mean:.1f}" for r in reports]),
        ("VO matches mean", [f"{r.vo_matches_mean:.1f}" for r in reports]),
        ("failure episodes", [str(len(r.failure_episodes)) for r in reports]),
    ]
    width = max(len(label) for label, _ in rows) + 2
    col = max(max(len(v) for v in vals) for _, vals in rows)
    col = max(col, max(len(lbl) for lbl in labels)) + 2
    lines = [" " * width + "".join(lbl.rjust(col) for lbl in labels)]
    for label, vals in rows:
        lines.append(label.ljust(width) + "".join(v.rjust(col) for v in vals))
    return lines
