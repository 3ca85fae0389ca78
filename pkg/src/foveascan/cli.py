"""Command-line entry point: ``foveascan {calibrate,mission,extract,render-scene}``."""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .calibration import (CalibrationRecord, DegenerateConfigurationError, InsufficientFiducialsError,
                          InsufficientPointsError, build_calibration_mosaic, estimate_homography,
                          load_calibration, save_calibration)
from .geometry import RobotPose
from .mission import (IllegalTransitionError, aggregate_metrics, named_seed, run_mission, seed_int,
                      write_metrics_csv, write_spectrum_csv)
from .optics import _threads, render_scene
from .perception import (GridMismatchError, ResonanceParams, detect_resonance, match_resonance,
                         reflectance_correct, with_match)
from .scenario import ScenarioError, load_scenario
from .spectral import MalformedHeaderError, OutOfRangeError, EmptyWindowError, read_cube, roi_mean_spectrum, write_cube

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


class InvariantViolation(RuntimeError):
    pass


def _int_list(text: str, n: int | None = None) -> tuple[int, ...]:
    vals = tuple(int(x) for x in text.split(",") if x.strip())
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _calibrate(scenario, seed: int) -> CalibrationRecord:
    b = scenario.base
    corrs = build_calibration_mosaic(scenario.calibration_scene(), b.camera, b.grid, b.rgb, b.rig,
                                     seed=seed_int(named_seed(seed, "calibration")))
    H = estimate_homography(corrs)
    c = scenario.calibration
    geometry = {"board_distance_m": c.board_distance_m, "board_height_m": c.board_height_m,
                "fiducials": [list(f) for f in c.fiducials], "scenario": scenario.name}
    return CalibrationRecord(H, corrs, geometry)


# --- subcommands -------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    scenario = load_scenario(args.scenario)
    record = _calibrate(scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(record, out / "calibration.json")
    print(f"residual_rms_deg {record.homography.residual_rms:.3e}")
    print(f"wrote {out / 'calibration.json'}")
    return EXIT_OK


def _one_run(scenario, H, run_seed: int, run_dir: Path):
    scene = scenario.realize(run_seed)
    log = run_mission(scene, scenario.mission_config(run_seed, H))
    bad = [sid for sid, r in log.records.items() if not r.chain_holds()]
    if bad:
        raise InvariantViolation(f"outcome implication chain broken for {bad}")
    log.write(run_dir)
    plotting.plot_trajectory(log, run_dir / "trajectory.png", scene, scenario.base.waypoints)
    for a in log.acquisitions:
        plotting.plot_spectrum(a.spectrum, run_dir / f"acq{a.index:02d}_spectrum.png", a.report,
                               scenario.base.reference_nm, title=f"{a.sensor_id or 'unknown'}")
    return log


def cmd_mission(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.calibration:
        H = load_calibration(args.calibration).homography
    else:
        H = _calibrate(scenario, args.seed).homography
    if args.n_runs < 1:
        raise ScenarioError("--n-runs must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed_int(named_seed(args.seed, "run", i)) for i in range(args.n_runs)]
    dirs = [out / f"run_{i:03d}" for i in range(args.n_runs)]
    workers = min(_threads(None), args.n_runs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(lambda i: _one_run(scenario, H, seeds[i], dirs[i]), range(args.n_runs)))
    else:
        logs = [_one_run(scenario, H, seeds[i], dirs[i]) for i in range(args.n_runs)]

    metrics = aggregate_metrics(logs)
    write_metrics_csv(metrics, out / "metrics.csv")
    with open(out / "sensors.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "sensor_id", "detected", "verified", "gate_passed", "cube_acquired",
                    "resonance_accepted"])
        for i, log in enumerate(logs):
            for sid, r in sorted(log.records.items()):
                w.writerow([i, sid, int(r.detected), int(r.verified), int(r.gate_passed),
                            int(r.cube_acquired), int(r.resonance_accepted)])
    plotting.plot_metrics(metrics, out / "metrics.png")
    print(f"runs {metrics.runs}  sensors {metrics.sensors}  detection {metrics.detection_rate:.3f}  "
          f"capture {metrics.capture_rate:.3f}  resonance {metrics.resonance_rate:.3f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    raw, white, dark = read_cube(args.cube), read_cube(args.white), read_cube(args.dark)
    if not (raw.grid == white.grid == dark.grid):
        raise GridMismatchError("cube, white and dark references use different wavelength grids")
    roi = args.roi or (0, raw.lines, 0, raw.samples)
    spectra = [roi_mean_spectrum(c, roi) for c in (raw, white, dark)]
    spec = reflectance_correct(*spectra)
    report = detect_resonance(spec, ResonanceParams(snr_threshold=args.snr_threshold))
    if report.accepted and args.reference_nm:
        report = with_match(report, match_resonance(report, args.reference_nm, args.match_tol_nm))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_spectrum_csv(spec, out / "spectrum.csv")
    plotting.plot_spectrum(spec, out / "spectrum.png", report, args.reference_nm or ())
    best = report.best
    status = "accepted" if report.accepted else "not accepted"
    peak = f"peak {best.wavelength_nm:.2f} nm snr {best.snr:.2f}" if best else "no peak"
    match = ""
    if report.reference_match is not None:
        m = report.reference_match
        match = f"  match {'yes' if m.matched else 'no'} offset {m.offset_nm:+.2f} nm"
    print(f"{status}: {peak}{match}")
    return EXIT_OK


def cmd_render_scene(args) -> int:
    scenario = load_scenario(args.scenario)
    scene = scenario.realize(args.seed)
    b = scenario.base
    if args.x is not None:
        x = args.x
    elif scene.sensors:
        x = float(scene.sensors[0].center[0])
    else:
        x = b.waypoints[0][0]
    y = b.waypoints[0][1]
    pose = RobotPose(x, y, float(np.arctan2(b.waypoints[1][1] - y, b.waypoints[1][0] - b.waypoints[0][0])))
    lit = scene.with_illuminant(scene.illuminant.with_halogen(args.halogen))
    cam = b.camera if args.noise else replace(b.camera, noise_floor=0.0)
    res = render_scene(lit, cam, b.grid, tuple(args.tilt_x_range), args.step, args.columns,
                       b.rig.hyperspectral_placement(pose), seed=seed_int(named_seed(args.seed, "render")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cube(res.mosaic, out / "scene")
    np.save(out / "tilt_map.npy", res.tilt_map)
    plotting.plot_cube(res.mosaic, out / "scene.png")
    print(f"wrote {res.mosaic.lines} x {res.mosaic.samples} x {res.mosaic.grid.bands} cube to {out / 'scene'}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foveascan", description="Foveated hyperspectral leaf-sensor scanning.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit the RGB-pixel to mirror-tilt homography")
    c.add_argument("--scenario", required=True, help="scenario file or preset name")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    m = sub.add_parser("mission", help="run seeded missions and tabulate success rates")
    m.add_argument("--scenario", required=True)
    m.add_argument("--calibration", help="calibration.json; fitted on the fly when omitted")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--n-runs", type=int, default=1)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mission)

    e = sub.add_parser("extract", help="reflectance-correct a cube and report its resonance")
    e.add_argument("cube")
    e.add_argument("white")
    e.add_argument("dark")
    e.add_argument("--roi", type=lambda s: _int_list(s, 4), help="line0,line1,sample0,sample1 (half-open)")
    e.add_argument("--reference-nm", type=_float_list, default=(650.0,))
    e.add_argument("--match-tol-nm", type=float, default=20.0)
    e.add_argument("--snr-threshold", type=float, default=3.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("render-scene", help="brute-force scan of the whole field of regard")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--x", type=float, help="robot position along the row (default: first sensor)")
    r.add_argument("--tilt-x-range", type=_float_list, default=(-3.0, 3.0))
    r.add_argument("--step", type=float, default=0.1)
    r.add_argument("--columns", type=_float_list, default=(-4.0, 0.0, 4.0))
    r.add_argument("--halogen", action="store_true")
    r.add_argument("--noise", action="store_true", help="keep detector noise (off by default)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_scene)
    return p


CONFIG_ERRORS = (ScenarioError, InsufficientFiducialsError, DegenerateConfigurationError, InsufficientPointsError,
                 GridMismatchError, MalformedHeaderError, OutOfRangeError, EmptyWindowError, FileNotFoundError,
                 ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IllegalTransitionError, InvariantViolation) as exc:
        print(f"error: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
