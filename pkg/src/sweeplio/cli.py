"""Command line: ``sweeplio simulate | run | eval-ate``.

Failures print one line ``error: <Class>: <message>`` to stderr and exit 1;
usage mistakes exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .io import InputFileError
from .pipeline import AlignmentError, ConfigError, PipelineConfig, PipelineError, config_help, eval_ate, run
from .simulator import PRESETS, Scenario, export_scenario, preset

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fail(exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return EXIT_FAIL


def scenario_config(scenario: Scenario) -> PipelineConfig:
    """Pipeline configuration matching a simulated scenario's calibration."""
    ex = scenario.sensor.extrinsics.lidar_to_imu
    return PipelineConfig(extrinsic_rotation=tuple(float(x) for x in ex.rotation),
                          extrinsic_translation=tuple(float(x) for x in ex.translation),
                          gravity=scenario.gravity)


def cmd_simulate(args) -> int:
    name = args.scenario
    if name in PRESETS:
        sc = preset(name, seed=args.seed, duration=args.duration)
    else:
        path = Path(name)
        if not path.is_file():
            raise InputFileError(f"unknown preset and no manifest file: {name} (presets: {', '.join(PRESETS)})")
        try:
            sc = Scenario.from_manifest(json.loads(path.read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario manifest {path}: {exc}") from exc
    out = Path(args.out)
    manifest = export_scenario(sc, out)
    (out / "config.cfg").write_text(scenario_config(sc).dumps())
    print(f"wrote scenario {manifest['name']} (seed {manifest['seed']}) to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    result = run(cfg, args.out)
    rep = result.report
    if result.error is not None:
        print(f"wrote partial trajectory ({rep['trajectory_states']} states) to {args.out}", file=sys.stderr)
        return _fail(result.error)
    t = rep["time_per_sweep_ms"]
    print(f"{rep['trajectory_states']} states, {rep['windows']} windows, "
          f"{t['Total']:.1f} ms per reconstructed sweep; wrote {Path(args.out) / 'trajectory.tum'}")
    return EXIT_OK


def cmd_eval_ate(args) -> int:
    value, err = eval_ate(args.est, args.gt, args.tol)
    print(f"ATE {value:.6f} m over {len(err)} poses (max {err.max():.6f} m)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sweeplio",
        description="Sweep-reconstructing LiDAR-inertial odometry.",
        epilog="configuration keys (flat 'key = value' file, '#' starts a comment):\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset, ground truth and a matching config")
    s.add_argument("--scenario", required=True, help=f"preset ({', '.join(PRESETS)}) or scenario.json manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="noise seed for presets")
    s.add_argument("--duration", type=float, default=None, help="override the preset duration (s)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="estimate a trajectory",
                       epilog="configuration keys:\n" + config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    r.add_argument("--config", required=True, help="config file")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval-ate", help="absolute translational error of a TUM trajectory")
    e.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    e.add_argument("--gt", required=True, help="ground truth (TUM)")
    e.add_argument("--tol", type=float, default=0.01, help="timestamp matching tolerance (s)")
    e.set_defaults(func=cmd_eval_ate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputFileError, PipelineError, AlignmentError, OSError, ValueError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
