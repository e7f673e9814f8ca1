"""Command-line entry point: teach, repeat, eval, export-plots.

Exit codes: 0 success, 1 traverse halted, 2 config or input error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .config import RunConfig, dump_config, load_config, with_seed
from .errors import (
    ConfigError,
    CorruptFile,
    FormatVersionMismatch,
    MapRigMismatch,
    MonoVtrError,
    SchemaVersionMismatch,
    VOFailure,
)
from .evaluate import comparison_lines, evaluate_log
from .pipeline import RepeatMode, build_world, run_repeat, run_teach
from .teach import load_path, save_path
from .traverselog import load_log, save_log, sliding_mean

EXIT_OK = 0
EXIT_HALTED = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = with_seed(config, args.seed)
    return config


def cmd_teach(args) -> int:
    config = _load_run_config(args)
    path, summary = run_teach(config)
    save_path(path, args.map)
    if summary.path_length == 0.0:
        print("warning: zero-length route; map holds a single keyframe")
    print(f"taught {summary.keyframes} keyframes over {summary.path_length:.2f} m "
          f"({summary.frames} frames)")
    print(f"map written to {args.map}")
    return EXIT_OK


def cmd_repeat(args) -> int:
    config = _load_run_config(args)
    path = load_path(args.map)
    if path.config_fingerprint != config.rig_fingerprint():
        raise MapRigMismatch(
            f"map rig fingerprint {path.config_fingerprint} != config {config.rig_fingerprint()}"
        )
    log, summary = run_repeat(config, path)
    save_log(log, args.log)
    print(f"repeat finished in mode {summary.final_mode.value} after {summary.frames} frames")
    print(f"autonomy rate: {summary.autonomy_rate:.2f} %")
    print(f"lateral RMS: {summary.lateral_rms:.4f} m (max {summary.lateral_max:.4f} m)")
    if summary.intervention_distance > 0:
        print(f"operator intervention: {summary.intervention_distance:.2f} m (excluded from autonomy)")
    print(f"log written to {args.log}")
    return EXIT_HALTED if summary.final_mode == RepeatMode.HALTED else EXIT_OK


def cmd_eval(args) -> int:
    logs = [load_log(p) for p in args.logs]
    reports = [evaluate_log(log, args.failure_threshold) for log in logs]
    if len(reports) == 1:
        for line in reports[0].lines():
            print(line)
    else:
        labels = [os.path.basename(p) for p in args.logs]
        for line in comparison_lines(labels, reports):
            print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "eval.csv")
        lines = [reports[0].csv_header()]
        lines += [r.csv_row() for r in reports]
        _atomic_write(out_path, "\n".join(lines) + "\n")
        print(f"report written to {out_path}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    log = load_log(args.log)
    os.makedirs(args.out, exist_ok=True)
    distance = log.distances()

    lateral = ["distance,est_lateral,true_lateral"]
    for i in range(len(log)):
        lateral.append(f"{distance[i]!r},{log.est_lateral[i]!r},{log.true_lateral[i]!r}")
    _atomic_write(os.path.join(args.out, "lateral_error.csv"), "\n".join(lateral) + "\n")

    vo = np.asarray(log.vo_matches, dtype=np.float64)
    mp = np.asarray(log.map_matches, dtype=np.float64)
    vo_f = sliding_mean(vo, args.window)
    mp_f = sliding_mean(mp, args.window)
    counts = ["distance,vo_raw,vo_filtered,map_raw,map_filtered"]
    for i in range(len(log)):
        counts.append(f"{distance[i]!r},{int(vo[i])},{vo_f[i]!r},{int(mp[i])},{mp_f[i]!r}")
    _atomic_write(os.path.join(args.out, "match_counts.csv"), "\n".join(counts) + "\n")

    print(f"wrote lateral_error.csv and match_counts.csv to {args.out}")
    return EXIT_OK


def cmd_dump_config(args) -> int:
    sys.stdout.write(dump_config(_load_run_config(args)))
    return EXIT_OK


def _atomic_write(path: str, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monovtr",
        description="Monocular visual teach & repeat in a synthetic world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    teach = sub.add_parser("teach", help="drive the scripted route and build a map")
    teach.add_argument("--config", help="run configuration file")
    teach.add_argument("--seed", type=int, help="override the config seed")
    teach.add_argument("--map", required=True, help="output map file")
    teach.set_defaults(func=cmd_teach)

    repeat = sub.add_parser("repeat", help="autonomously repeat a taught route")
    repeat.add_argument("--config", help="run configuration file")
    repeat.add_argument("--seed", type=int, help="override the config seed")
    repeat.add_argument("--map", required=True, help="input map file")
    repeat.add_argument("--log", required=True, help="output traverse log CSV")
    repeat.set_defaults(func=cmd_repeat)

    ev = sub.add_parser("eval", help="compute metrics from traverse logs")
    ev.add_argument("logs", nargs="+", help="traverse log CSVs; several compare side by side")
    ev.add_argument("--out", help="directory for the CSV report")
    ev.add_argument("--failure-threshold", type=int, default=10)
    ev.set_defaults(func=cmd_eval)

    plots = sub.add_parser("export-plots", help="write plot-ready CSV series from a log")
    plots.add_argument("--log", required=True)
    plots.add_argument("--out", required=True, help="output directory")
    plots.add_argument("--window", type=int, default=20, help="sliding mean window")
    plots.set_defaults(func=cmd_export_plots)

    dump = sub.add_parser("dump-config", help="print the effective configuration")
    dump.add_argument("--config", help="run configuration file")
    dump.add_argument("--seed", type=int)
    dump.set_defaults(func=cmd_dump_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, CorruptFile, FormatVersionMismatch,
            SchemaVersionMismatch, MapRigMismatch, VOFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MonoVtrError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
