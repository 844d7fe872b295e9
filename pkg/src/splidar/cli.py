"""Command-line entry point.

Exit status: 0 on success, 2 for bad arguments, 3 for malformed input data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (CalibrationError, CubeFormatError, parse_keyvalue, read_calibration,
                   read_cube, read_ply, write_calibration, write_cube, write_ply)
from .reconstruct import ReconConfig, reconstruct

EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _csv_list(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _sidecar(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


def _load_config(path, overrides):
    mapping = {}
    if path:
        try:
            top, sections = parse_keyvalue(Path(path).read_text())
        except ValueError as exc:
            raise DataError(f"{path}: {exc}")
        if sections:
            raise DataError(f"{path}: config files have no sections")
        mapping.update(top)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        mapping[key.strip()] = value.strip()
    try:
        return ReconConfig.from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}")


def format_config(config):
    return "".join(f"{k} = {v}\n" for k, v in config.to_mapping().items())


def _load_cube(args):
    cube = read_cube(args.cube)
    calib = args.calib or _sidecar(args.cube, ".cal")
    if not Path(calib).exists():
        raise UsageError(f"calibration file {calib} not found (use --calib)")
    sensor = read_calibration(calib, cube.n_rows, cube.n_cols, cube.n_bins)
    return cube, sensor


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args):
    from .simulate import read_scene, simulate_cube

    try:
        spec = read_scene(args.scene)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{args.scene}: {exc}")
    sensor = spec.sensor()
    cube, report = simulate_cube(spec, sensor, args.seed)
    out = Path(args.output)
    write_cube(cube, out)
    write_calibration(sensor, _sidecar(out, ".cal"))
    write_ply(report.truth, _sidecar(out, ".truth.ply"))
    t = report.truth
    np.savetxt(_sidecar(out, ".truth.csv"), np.column_stack([t.positions, t.intensities]),
               delimiter=",", header="x,y,z,intensity", comments="", fmt="%.17g")
    _dump_json(report.to_mapping() | {"seed": args.seed}, _sidecar(out, ".sim.json"))
    return 0


def cmd_reconstruct(args):
    cube, sensor = _load_cube(args)
    config = _load_config(args.config, args.set)
    if args.workers:
        config = dataclasses.replace(config, workers=args.workers)
    cloud, background, report = reconstruct(cube, sensor, config)
    write_ply(cloud, args.output)
    if args.background:
        np.savetxt(args.background, background.b, delimiter=",", fmt="%.17g")
    if args.report:
        if not args.with_timing:
            report.pop("timing")
        report["config"] = config.to_mapping()
        report["background_mean"] = float(background.b.mean())
        _dump_json(report, args.report)
    if args.figure:
        from .plotting import depth_figure
        depth_figure(cloud, sensor, args.figure)
    return 0


def cmd_baseline(args):
    from .evaluate import baseline_xcorr

    cube, sensor = _load_cube(args)
    write_ply(baseline_xcorr(cube, sensor, args.k), args.output)
    return 0


def cmd_eval(args):
    from .evaluate import evaluate

    if not args.tau > 0:
        raise UsageError("--tau must be positive")
    res = evaluate(read_ply(args.estimate), read_ply(args.truth), args.tau, args.pitch)
    _dump_json(res.to_mapping() | {"tau": args.tau}, args.output)
    return 0


def _write_table(rows, columns, path, footer=""):
    from .simulate import table_to_csv

    text = table_to_csv(rows, columns) + footer
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args):
    from .evaluate import BENCH_COLUMNS, bench_scaling

    cube, sensor = _load_cube(args)
    config = _load_config(args.config, args.set)
    rows, fit = bench_scaling(cube, sensor, args.axis, args.levels, config,
                              iterations=args.iterations, repeats=args.repeats)
    footer = f"# slope={fit['slope']!r},intercept={fit['intercept']!r},r2={fit['r2']!r}\n"
    _write_table(rows, BENCH_COLUMNS, args.output, footer)
    if args.output:
        from .plotting import bench_figure
        bench_figure(rows, fit, _sidecar(args.output, ".png"))
    return 0


def cmd_sweep(args):
    from .simulate import SWEEP_COLUMNS, read_scene, sweep_operating_conditions

    try:
        spec = read_scene(args.scene)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{args.scene}: {exc}")
    config = _load_config(args.config, args.set)
    rows = sweep_operating_conditions(spec, args.ppp, args.sbr, config,
                                      seeds=range(args.seed, args.seed + args.seeds), tau=args.tau)
    _write_table(rows, SWEEP_COLUMNS, args.output)
    if args.output:
        from .plotting import sweep_figure
        sweep_figure(rows, _sidecar(args.output, ".png"))
    return 0


def cmd_preset(args):
    from .presets import PRESETS
    from .simulate import format_scene

    scene, config = PRESETS[args.name]
    Path(args.output).write_text(format_scene(scene()))
    if args.config:
        Path(args.config).write_text(format_config(config()))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="splidar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def cube_args(sp):
        sp.add_argument("cube", help="photon cube (.spcb)")
        sp.add_argument("--calib", help="calibration file (default: <cube>.cal)")

    def config_args(sp):
        sp.add_argument("-c", "--config", help="key = value solver configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration value")

    sp = sub.add_parser("simulate", help="draw a photon cube from a scene file")
    sp.add_argument("scene")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="estimate a point cloud from a cube")
    cube_args(sp)
    config_args(sp)
    sp.add_argument("-o", "--output", required=True, help="output PLY")
    sp.add_argument("--report", help="JSON report")
    sp.add_argument("--with-timing", action="store_true",
                    help="include wall-clock times in the report")
    sp.add_argument("--background", help="CSV of the background image")
    sp.add_argument("--figure", help="PNG depth map")
    sp.add_argument("--workers", type=int, default=0)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("baseline", help="cross-correlation estimate")
    cube_args(sp)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("-k", type=int, default=1, help="returns per pixel")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("eval", help="compare an estimate with ground truth")
    sp.add_argument("estimate")
    sp.add_argument("truth")
    sp.add_argument("--tau", type=float, default=0.04, help="depth tolerance (m)")
    sp.add_argument("--pitch", type=float, help="fine pixel pitch (default: from truth)")
    sp.add_argument("-o", "--output", help="JSON output (default: stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time reconstruction against problem size")
    cube_args(sp)
    config_args(sp)
    sp.add_argument("--axis", choices=("pixels", "active_bins"), default="active_bins")
    sp.add_argument("--levels", type=lambda s: _csv_list(s, int), default=[1, 2, 4, 8])
    sp.add_argument("--iterations", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("-o", "--output", help="CSV output; a PNG is written alongside")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("sweep", help="recall over photons per pixel and SBR")
    sp.add_argument("scene")
    config_args(sp)
    sp.add_argument("--ppp", type=_csv_list, required=True, help="total photons per pixel")
    sp.add_argument("--sbr", type=_csv_list, required=True)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--tau", type=float, default=0.04)
    sp.add_argument("-o", "--output", help="CSV output; a PNG is written alongside")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("preset", help="write a built-in scene (and solver config)")
    sp.add_argument("name", choices=("mannequin", "superres"))
    sp.add_argument("-o", "--output", required=True, help="scene file")
    sp.add_argument("-c", "--config", help="also write the matching solver config")
    sp.set_defaults(func=cmd_preset)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"splidar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"splidar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CubeFormatError, CalibrationError) as exc:
        print(f"splidar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
