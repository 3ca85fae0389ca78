"""Waypoint navigation, the detect-verify-stop-illuminate-acquire-extract loop and run metrics."""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .calibration import Homography, bbox_corners, plan_sweep
from .geometry import Rig, RgbCamera, RobotPose, angle_between_deg, unit
from .optics import MirrorState, PushbroomCamera, ScanPlan, acquire_patch, dark_patch, sample_toward
from .perception import (CaptureGate, Detection, DetectorNoiseModel, GateResult, ResonanceParams,
                         ResonanceReport, TrackResult, TrackStatus, VerifiedTarget, capture_gate,
                         detect_resonance, match_resonance, reflectance_correct, simulate_detections,
                         verify_track, with_match)
from .scene import Panel, Scene
from .spectral import SpectralCube, Spectrum, WavelengthGrid, default_grid, roi_mean_spectrum, write_cube


class IllegalTransitionError(RuntimeError):
    """The pipeline was fed inputs that cannot occur in its current phase."""


def named_seed(seed: int, *keys: int | str) -> np.random.SeedSequence:
    """Independent stream for a named consumer; string keys hash with CRC-32."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.SeedSequence(int(seed), spawn_key=spawn)


def seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class MissionConfig:
    waypoints: tuple[tuple[float, float], ...]
    cruise_speed: float = 0.1
    slow_speed: float = 0.015
    control_rate_hz: float = 10.0
    gate: CaptureGate = CaptureGate()
    detector_noise: DetectorNoiseModel = DetectorNoiseModel()
    calibration: Homography | None = None
    seed: int = 0
    max_turn_rate_deg_s: float = 45.0
    lookahead_m: float = 0.3
    waypoint_tol_m: float = 0.05
    heading_noise_deg: float = 0.0
    track_loss_frames: int = 5
    verify_k: int = 3
    verify_var_px2: float = 9.0
    association_radius_px: float = 40.0
    detection_range_mm: float = 1200.0
    rig: Rig = Rig()
    rgb: RgbCamera = RgbCamera()
    camera: PushbroomCamera = PushbroomCamera()
    grid: WavelengthGrid = field(default_factory=default_grid)
    scan_step_deg: float = 0.04
    scan_margin_frac: float = 0.25
    roi_fraction: float = 0.5
    white_distance_m: float = 0.914
    white_reflectance: float = 1.0
    reference_nm: tuple[float, ...] = (650.0,)
    match_tol_nm: float = 20.0
    resonance: ResonanceParams = ResonanceParams()
    min_sensor_fraction: float = 0.5
    max_time_s: float = 3600.0

    def __post_init__(self):
        wps = tuple((float(x), float(y)) for x, y in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        if len(wps) < 2:
            raise ValueError("a mission needs at least two waypoints")
        if not 0 < self.slow_speed < self.cruise_speed:
            raise ValueError("need 0 < slow_speed < cruise_speed")
        if self.control_rate_hz <= 0 or self.max_turn_rate_deg_s <= 0:
            raise ValueError("control rate and turn rate must be positive")
        if not 0 < self.roi_fraction <= 1:
            raise ValueError("roi_fraction must lie in (0, 1]")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate_hz


# --- kinematics --------------------------------------------------------------------


class Phase(str, Enum):
    NAVIGATE = "NAVIGATE"
    TRACKING = "TRACKING"
    GATED_STOP = "GATED_STOP"
    ILLUMINATE = "ILLUMINATE"
    ACQUIRE = "ACQUIRE"
    EXTRACT = "EXTRACT"
    RESUME = "RESUME"
    DONE = "DONE"


STATIONARY = frozenset({Phase.GATED_STOP, Phase.ILLUMINATE, Phase.ACQUIRE, Phase.EXTRACT, Phase.DONE})


def speed_for_phase(phase: Phase, config: MissionConfig) -> float:
    if phase in STATIONARY:
        return 0.0
    if phase is Phase.TRACKING:
        return config.slow_speed
    return config.cruise_speed


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def initial_pose(config: MissionConfig) -> RobotPose:
    (x0, y0), (x1, y1) = config.waypoints[:2]
    return RobotPose(x0, y0, math.atan2(y1 - y0, x1 - x0), 0.0, 1)


def follow_waypoints(pose: RobotPose, config: MissionConfig, dt: float, phase: Phase = Phase.NAVIGATE,
                     rng: np.random.Generator | None = None) -> RobotPose:
    """Advance a unicycle along the waypoint polyline.

    Steering aims at a lookahead point on the active segment with a bounded
    turn rate; the step is clamped so the robot never overshoots a waypoint.
    ``waypoint_index == len(waypoints)`` means the route is finished.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    wps = config.waypoints
    idx = pose.waypoint_index
    speed = speed_for_phase(phase, config)
    if idx >= len(wps):
        return replace(pose, speed=0.0)
    p = np.array([pose.x, pose.y])
    a, b = np.array(wps[idx - 1]), np.array(wps[idx])
    seg = b - a
    seg_len = float(np.linalg.norm(seg))
    to_wp = float(np.linalg.norm(b - p))
    if seg_len > 0:
        along = float(np.dot(p - a, seg) / seg_len)
        if along + config.lookahead_m >= seg_len:
            target = b
        else:
            target = a + seg / seg_len * max(along + config.lookahead_m, 0.0)
    else:
        target = b
    heading = pose.heading
    if speed > 0:
        desired = math.atan2(target[1] - p[1], target[0] - p[0])
        max_turn = math.radians(config.max_turn_rate_deg_s) * dt
        heading = heading + float(np.clip(_wrap(desired - heading), -max_turn, max_turn))
        if rng is not None and config.heading_noise_deg > 0:
            heading += math.radians(config.heading_noise_deg) * float(rng.normal())
        heading = _wrap(heading)
    step = min(speed * dt, to_wp)
    x = pose.x + step * math.cos(heading)
    y = pose.y + step * math.sin(heading)
    q = np.array([x, y])
    passed = seg_len > 0 and float(np.dot(q - a, seg)) >= seg_len ** 2
    if float(np.linalg.norm(b - q)) <= config.waypoint_tol_m or passed:
        idx += 1
    return RobotPose(x, y, heading, speed, idx)


# --- pipeline state machine ---------------------------------------------------------------


@dataclass(frozen=True)
class PipelineState:
    phase: Phase = Phase.NAVIGATE
    active_target: VerifiedTarget | None = None
    visited_sensors: frozenset = frozenset()
    track: tuple[Detection, ...] = ()
    missed_frames: int = 0
    halogen_on: bool = False


@dataclass(frozen=True)
class AcquisitionOutcome:
    sensor_id: str | None
    sensor_fraction: float


@dataclass(frozen=True)
class StepInputs:
    frame_id: int | None = None
    detection: Detection | None = None
    track: TrackResult | None = None
    gate_result: GateResult | None = None
    acquisition: AcquisitionOutcome | None = None
    extraction: ResonanceReport | None = None
    final_waypoint: bool = False

    @property
    def has_frame(self) -> bool:
        return self.frame_id is not None or self.detection is not None or self.track is not None \
            or self.gate_result is not None


@dataclass(frozen=True)
class Action:
    kind: str  # set_speed | set_halogen | execute_scan | emit_record
    value: Any = None


def _require_no(inputs: StepInputs, phase: Phase, *, frame=True, acquisition=True, extraction=True):
    if frame and inputs.has_frame:
        raise IllegalTransitionError(f"{phase.value} does not consume camera frames")
    if acquisition and inputs.acquisition is not None:
        raise IllegalTransitionError(f"acquisition outcome delivered during {phase.value}")
    if extraction and inputs.extraction is not None:
        raise IllegalTransitionError(f"extraction outcome delivered during {phase.value}")


def step_pipeline(state: PipelineState, inputs: StepInputs, cruise_speed: float = 0.1,
                  slow_speed: float = 0.015, track_loss_frames: int = 5
                  ) -> tuple[PipelineState, tuple[Action, ...]]:
    """One control tick of the acquisition pipeline.

    Raises ``IllegalTransitionError`` when ``inputs`` could not have been
    produced in the current phase (a driver bug, not a field condition).
    """
    phase = state.phase
    if phase is Phase.DONE:
        raise IllegalTransitionError("pipeline already finished")
    if inputs.final_waypoint:
        if phase not in (Phase.NAVIGATE, Phase.TRACKING, Phase.RESUME):
            raise IllegalTransitionError(f"robot cannot reach a waypoint while stopped in {phase.value}")
        _require_no(inputs, phase)
        acts = [Action("set_speed", 0.0)]
        if state.halogen_on:
            acts.append(Action("set_halogen", False))
        return replace(state, phase=Phase.DONE, active_target=None, track=(), missed_frames=0,
                       halogen_on=False), tuple(acts)

    if phase in (Phase.NAVIGATE, Phase.TRACKING):
        _require_no(inputs, phase, frame=False)
        det, track, gate = inputs.detection, inputs.track, inputs.gate_result
        if track is not None and det is None:
            raise IllegalTransitionError("track result without a detection")
        if gate is not None and (track is None or track.status is not TrackStatus.VERIFIED):
            raise IllegalTransitionError("gate evaluated without a verified target")
        if det is not None and det.truth_link is not None and det.truth_link in state.visited_sensors:
            raise IllegalTransitionError(f"visited sensor {det.truth_link} offered for tracking")
        if det is None:
            if phase is Phase.NAVIGATE:
                return state, ()
            missed = state.missed_frames + 1
            if missed >= track_loss_frames:
                return replace(state, phase=Phase.NAVIGATE, track=(), missed_frames=0), \
                    (Action("set_speed", cruise_speed),)
            return replace(state, missed_frames=missed), ()
        history = (state.track if phase is Phase.TRACKING else ()) + (det,)
        if track is not None and track.status is TrackStatus.VERIFIED and gate is not None and gate.passed:
            return replace(state, phase=Phase.GATED_STOP, active_target=track.target, track=history,
                           missed_frames=0), (Action("set_speed", 0.0),)
        if phase is Phase.TRACKING and track is not None and track.status is TrackStatus.REJECTED:
            return replace(state, phase=Phase.NAVIGATE, track=(), missed_frames=0), \
                (Action("set_speed", cruise_speed),)
        acts = () if phase is Phase.TRACKING else (Action("set_speed", slow_speed),)
        return replace(state, phase=Phase.TRACKING, track=history, missed_frames=0), acts

    if phase is Phase.GATED_STOP:
        _require_no(inputs, phase)
        return replace(state, phase=Phase.ILLUMINATE, halogen_on=True), (Action("set_halogen", True),)
    if phase is Phase.ILLUMINATE:
        _require_no(inputs, phase)
        return replace(state, phase=Phase.ACQUIRE), (Action("execute_scan", state.active_target),)
    if phase is Phase.ACQUIRE:
        _require_no(inputs, phase, acquisition=False)
        if inputs.acquisition is None:
            raise IllegalTransitionError("ACQUIRE needs an acquisition outcome")
        visited = state.visited_sensors
        if inputs.acquisition.sensor_id is not None:
            if inputs.acquisition.sensor_id in visited:
                raise IllegalTransitionError(f"sensor {inputs.acquisition.sensor_id} acquired twice")
            visited = visited | {inputs.acquisition.sensor_id}
        return replace(state, phase=Phase.EXTRACT, visited_sensors=frozenset(visited)), ()
    if phase is Phase.EXTRACT:
        _require_no(inputs, phase, extraction=False)
        if inputs.extraction is None:
            raise IllegalTransitionError("EXTRACT needs a resonance report")
        return replace(state, phase=Phase.RESUME, halogen_on=False), \
            (Action("set_halogen", False), Action("emit_record", inputs.extraction))
    if phase is Phase.RESUME:
        _require_no(inputs, phase)
        return replace(state, phase=Phase.NAVIGATE, active_target=None, track=(), missed_frames=0), \
            (Action("set_speed", cruise_speed),)
    raise IllegalTransitionError(f"unknown phase {phase}")  # pragma: no cover


# --- log ----------------------------------------------------------------------------


@dataclass
class SensorRecord:
    sensor_id: str
    detected: bool = False
    verified: bool = False
    gate_passed: bool = False
    cube_acquired: bool = False
    resonance_accepted: bool = False
    resonance_report: ResonanceReport | None = None
    gate_result: GateResult | None = None
    collection_angle_deg: float | None = None
    sensor_fraction: float | None = None

    def chain_holds(self) -> bool:
        flags = [self.detected, self.verified, self.gate_passed, self.cube_acquired, self.resonance_accepted]
        return all(a or not b for a, b in zip(flags, flags[1:]))


@dataclass
class Acquisition:
    index: int
    sensor_id: str | None
    time_s: float
    plan: ScanPlan
    roi: tuple[int, int, int, int]
    cube: SpectralCube
    white: SpectralCube
    dark: SpectralCube
    spectrum: Spectrum
    report: ResonanceReport
    sensor_fraction: float
    collection_angle_deg: float | None


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    x: float
    y: float
    heading: float
    speed: float
    phase: str
    halogen_on: bool


@dataclass
class MissionLog:
    seed: int
    records: dict[str, SensorRecord]
    trajectory: list[TrajectorySample] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    acquisitions: list[Acquisition] = field(default_factory=list)
    sim_time_s: float = 0.0
    completed: bool = True

    def to_dict(self) -> dict:
        recs = {}
        for sid, r in sorted(self.records.items()):
            recs[sid] = {
                "detected": r.detected, "verified": r.verified, "gate_passed": r.gate_passed,
                "cube_acquired": r.cube_acquired, "resonance_accepted": r.resonance_accepted,
                "collection_angle_deg": r.collection_angle_deg, "sensor_fraction": r.sensor_fraction,
                "gate": None if r.gate_result is None else {
                    "passed": r.gate_result.passed, "reason": r.gate_result.reason.value,
                    "est_distance_mm": r.gate_result.est_distance_mm,
                    "est_angle_deg": r.gate_result.est_angle_deg,
                    "lateral_mm": list(r.gate_result.lateral_mm)},
                "resonance_report": None if r.resonance_report is None else r.resonance_report.to_dict(),
            }
        acqs = [{"index": a.index, "sensor_id": a.sensor_id, "time_s": a.time_s, "roi": list(a.roi),
                 "plan": a.plan.to_config(), "sensor_fraction": a.sensor_fraction,
                 "accepted": a.report.accepted} for a in self.acquisitions]
        return {"seed": self.seed, "completed": self.completed, "sim_time_s": self.sim_time_s,
                "sensors": recs, "acquisitions": acqs, "actions": self.actions}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        """Report JSON, trajectory and sensor CSVs, cubes and spectrum CSVs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{prefix}mission_log.json"]
        written[0].write_text(self.to_json(), encoding="utf-8")
        p = out / f"{prefix}trajectory.csv"
        with open(p, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t_s", "x_m", "y_m", "heading_rad", "speed_m_s", "phase", "halogen_on"])
            for s in self.trajectory:
                w.writerow([repr(s.t), repr(s.x), repr(s.y), repr(s.heading), repr(s.speed), s.phase,
                            int(s.halogen_on)])
        written.append(p)
        p = out / f"{prefix}sensors.csv"
        with open(p, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sensor_id", "detected", "verified", "gate_passed", "cube_acquired",
                        "resonance_accepted", "peak_nm", "snr", "collection_angle_deg"])
            for sid, r in sorted(self.records.items()):
                best = r.resonance_report.best if r.resonance_report else None
                w.writerow([sid, int(r.detected), int(r.verified), int(r.gate_passed), int(r.cube_acquired),
                            int(r.resonance_accepted), "" if best is None else repr(best.wavelength_nm),
                            "" if best is None else repr(best.snr),
                            "" if r.collection_angle_deg is None else repr(r.collection_angle_deg)])
        written.append(p)
        for a in self.acquisitions:
            tag = f"{prefix}acq{a.index:02d}"
            for name, cube in (("raw", a.cube), ("white", a.white), ("dark", a.dark)):
                write_cube(cube, out / f"{tag}_{name}")
                written += [out / f"{tag}_{name}.hdr", out / f"{tag}_{name}.bil"]
            p = out / f"{tag}_spectrum.csv"
            write_spectrum_csv(a.spectrum, p)
            written.append(p)
            (out / f"{tag}_report.json").write_text(a.report.to_json(), encoding="utf-8")
            written.append(out / f"{tag}_report.json")
        return written


def write_spectrum_csv(spec: Spectrum, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["wavelength_nm", "reflectance", "valid"])
        for lam, v, ok in zip(spec.wavelengths, spec.values, spec.valid_mask):
            w.writerow([repr(float(lam)), repr(float(v)), int(ok)])


# --- acquisition -------------------------------------------------------------------


def _crop(cube: SpectralCube, s0: int, s1: int) -> SpectralCube:
    meta = dict(cube.meta)
    meta["sample_offset"] = int(s0)
    return SpectralCube(cube.grid, cube.data[:, s0:s1], meta)


def roi_for_target(plan: ScanPlan, H: Homography, bbox, cam: PushbroomCamera,
                   roi_fraction: float = 0.5) -> tuple[int, int, int, int]:
    """Lines and slit samples covering the central ``roi_fraction`` of a bbox, as a half-open window."""
    sched = plan.schedule()
    u, v, w, h = bbox
    inner = H.apply(bbox_corners((u, v, w * roi_fraction, h * roi_fraction)))
    tx_lo, tx_hi = inner[:, 0].min(), inner[:, 0].max()
    inside = np.flatnonzero((sched[:, 0] >= tx_lo) & (sched[:, 0] <= tx_hi))
    if len(inside) == 0:
        inside = np.array([int(np.argmin(np.abs(sched[:, 0] - (tx_lo + tx_hi) / 2)))])
    mid = sched[len(sched) // 2]
    state = MirrorState(float(mid[0]), float(mid[1]), plan.theta_max_deg)
    sa = sample_toward(cam, state, float(inner[:, 1].min()))
    sb = sample_toward(cam, state, float(inner[:, 1].max()))
    return int(inside.min()), int(inside.max()) + 1, min(sa, sb), max(sa, sb) + 1


def white_reference_scene(scene: Scene, pose: RobotPose, rig: Rig, distance_m: float,
                          reflectance: float = 1.0) -> Scene:
    centre = np.array([pose.x, pose.y, rig.mirror_height_m]) + pose.left * distance_m
    wall = Panel("white", tuple(centre), tuple(-pose.left), 3.0, 3.0, reflectance, kind="wall")
    return Scene(panels=(wall,), illuminant=scene.illuminant, ground=False)


def _true_collection_angle(scene: Scene, sensor_id: str, pose: RobotPose, rig: Rig) -> float:
    s = scene.sensor(sensor_id)
    origin = rig.hyperspectral_placement(pose).origin
    ray = unit(np.asarray(s.center) - origin)
    return float(angle_between_deg(-ray, np.asarray(s.normal)))


def acquire_target(scene: Scene, config: MissionConfig, target: VerifiedTarget, pose: RobotPose,
                   noise_seed: int, index: int = 0, time_s: float = 0.0) -> Acquisition:
    """Sweep the mirror over a verified target, take white and dark references and extract."""
    cam, grid, rig = config.camera, config.grid, config.rig
    H = config.calibration
    if H is None:
        raise ValueError("mission config has no calibration")
    plan = plan_sweep(H, target.bbox, config.scan_margin_frac, config.scan_step_deg, cam.exposure_ms,
                      cam.theta_max_deg, cam.mirror_memory)
    placement = rig.hyperspectral_placement(pose)
    raw, hits = acquire_patch(scene, cam, plan, grid, placement, seed_int(named_seed(noise_seed, index, "raw")),
                              return_hits=True)
    white_scene = white_reference_scene(scene, pose, rig, config.white_distance_m, config.white_reflectance)
    white = acquire_patch(white_scene, cam, plan, grid, placement, seed_int(named_seed(noise_seed, index, "white")))
    dark = dark_patch(cam, plan, grid, seed_int(named_seed(noise_seed, index, "dark")))

    l0, l1, s0, s1 = roi_for_target(plan, H, target.bbox, cam, config.roi_fraction)
    # keep the slit span of the margin-grown bbox; the rest of the line is background
    mid = plan.schedule()[plan.lines // 2]
    state = MirrorState(float(mid[0]), float(mid[1]), plan.theta_max_deg)
    u, v, w, h = target.bbox
    grow = 1.0 + config.scan_margin_frac
    outer = H.apply(bbox_corners((u, v, w * grow, h * grow)))
    c0 = min(sample_toward(cam, state, float(outer[:, 1].min())), s0)
    c1 = max(sample_toward(cam, state, float(outer[:, 1].max())) + 1, s1)
    raw_c, white_c, dark_c = (_crop(c, c0, c1) for c in (raw, white, dark))
    roi = (l0, l1, s0 - c0, s1 - c0)

    sid = target.truth_link
    if sid is not None and sid in scene.surface_ids:
        fraction = float(np.mean(hits[l0:l1, s0:s1] == scene.surface_index(sid)))
        angle = _true_collection_angle(scene, sid, pose, rig)
    else:
        fraction, angle = 0.0, None
    spec = reflectance_correct(roi_mean_spectrum(raw_c, roi), roi_mean_spectrum(white_c, roi),
                               roi_mean_spectrum(dark_c, roi))
    report = detect_resonance(spec, config.resonance)
    if report.accepted:
        report = with_match(report, match_resonance(report, config.reference_nm, config.match_tol_nm))
    return Acquisition(index, sid, time_s, plan, roi, raw_c, white_c, dark_c, spec, report, fraction, angle)


# --- mission loop ---------------------------------------------------------------------


NOMINAL_ROW_NORMAL = (0.0, -1.0, 0.0)


def _associate(state: PipelineState, dets: Sequence[Detection], radius_px: float) -> Detection | None:
    fresh = [d for d in dets if d.truth_link is None or d.truth_link not in state.visited_sensors]
    if not fresh:
        return None
    if state.phase is Phase.TRACKING and state.track:
        last = state.track[-1]
        near = [d for d in fresh if math.hypot(d.u - last.u, d.v - last.v) <= radius_px]
        if not near:
            return None
        return min(near, key=lambda d: (math.hypot(d.u - last.u, d.v - last.v), -d.confidence))
    return max(fresh, key=lambda d: (d.confidence, -d.u))


def run_mission(scene: Scene, config: MissionConfig) -> MissionLog:
    """Simulate one mission at the control rate until the final waypoint; deterministic in ``config.seed``."""
    if config.calibration is None:
        raise ValueError("mission config has no calibration")
    nav_rng = np.random.default_rng(named_seed(config.seed, "navigation"))
    noise = replace(config.detector_noise, seed=seed_int(named_seed(config.seed, "detector")))
    noise_seed = seed_int(named_seed(config.seed, "sensor-noise"))
    dt = config.dt
    log = MissionLog(config.seed, {s.id: SensorRecord(s.id) for s in scene.sensors})
    pose = initial_pose(config)
    state = PipelineState()
    lit = scene
    t = 0.0
    frame = 0
    pending: VerifiedTarget | None = None
    current: Acquisition | None = None
    nominal_h = config.rgb.focal_px * config.gate.sensor_size_mm / config.detection_range_mm

    def sample():
        log.trajectory.append(TrajectorySample(t, pose.x, pose.y, pose.heading, pose.speed,
                                               state.phase.value, state.halogen_on))

    def apply(actions, before):
        nonlocal lit, pending
        for a in actions:
            entry = {"t": t, "from": before.value, "to": state.phase.value, "kind": a.kind}
            if a.kind == "set_halogen":
                lit = scene.with_illuminant(scene.illuminant.with_halogen(bool(a.value)))
                entry["value"] = bool(a.value)
            elif a.kind == "set_speed":
                entry["value"] = float(a.value)
            elif a.kind == "execute_scan":
                pending = a.value
                entry["value"] = None if a.value is None else a.value.truth_link
            elif a.kind == "emit_record":
                entry["value"] = bool(a.value.accepted)
            log.actions.append(entry)

    sample()
    while state.phase is not Phase.DONE:
        if t > config.max_time_s:
            log.completed = False
            break
        before = state.phase
        if before in (Phase.NAVIGATE, Phase.TRACKING):
            dets = [d for d in simulate_detections(lit, pose, config.rgb, noise, frame, config.rig)
                    if d.h >= nominal_h]
            for d in dets:
                if d.truth_link in log.records:
                    log.records[d.truth_link].detected = True
            det = _associate(state, dets, config.association_radius_px)
            track = gate = None
            if det is not None:
                history = (state.track if before is Phase.TRACKING else ()) + (det,)
                track = verify_track(history, config.verify_k, config.verify_var_px2, current_frame=frame)
                if track.status is TrackStatus.VERIFIED:
                    sid = track.target.truth_link
                    gate = capture_gate(config.gate, track.target, pose, NOMINAL_ROW_NORMAL)
                    if sid in log.records:
                        log.records[sid].verified = True
                        if gate.passed or log.records[sid].gate_result is None:
                            log.records[sid].gate_result = gate
                        if gate.passed:
                            log.records[sid].gate_passed = True
            inputs = StepInputs(frame, det, track, gate)
            frame += 1
        elif before is Phase.ACQUIRE:
            current = acquire_target(lit, config, pending, pose, noise_seed, len(log.acquisitions), t)
            log.acquisitions.append(current)
            t += current.plan.lines * current.plan.exposure_ms / 1000.0
            inputs = StepInputs(acquisition=AcquisitionOutcome(current.sensor_id, current.sensor_fraction))
        elif before is Phase.EXTRACT:
            inputs = StepInputs(extraction=current.report)
        else:
            inputs = StepInputs()
        state, actions = step_pipeline(state, inputs, config.cruise_speed, config.slow_speed,
                                       config.track_loss_frames)
        apply(actions, before)
        if before is Phase.EXTRACT and current is not None and current.sensor_id in log.records:
            rec = log.records[current.sensor_id]
            rec.cube_acquired = rec.gate_passed and current.sensor_fraction >= config.min_sensor_fraction
            rec.resonance_report = current.report
            rec.collection_angle_deg = current.collection_angle_deg
            rec.sensor_fraction = current.sensor_fraction
            rec.resonance_accepted = rec.cube_acquired and current.report.accepted and bool(
                current.report.reference_match and current.report.reference_match.matched)

        pose = follow_waypoints(pose, config, dt, state.phase, nav_rng)
        t += dt
        if pose.waypoint_index >= len(config.waypoints) and state.phase not in STATIONARY:
            before = state.phase
            state, actions = step_pipeline(state, StepInputs(final_waypoint=True), config.cruise_speed,
                                           config.slow_speed, config.track_loss_frames)
            apply(actions, before)
        sample()
    log.sim_time_s = t
    return log


# --- metrics ------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    runs: int
    sensors: int
    detection_rate: float
    verification_rate: float
    gate_rate: float
    capture_rate: float
    resonance_rate: float

    def as_row(self) -> dict[str, str]:
        return {k: (repr(v) if isinstance(v, float) else str(v)) for k, v in self.__dict__.items()}


def aggregate_metrics(logs: Sequence[MissionLog]) -> Metrics:
    """Fractions of sensor records with each flag, pooled over runs (NaN when there are no sensors)."""
    if not logs:
        raise ValueError("aggregate_metrics needs at least one mission log")
    recs = [r for log in logs for r in log.records.values()]
    n = len(recs)

    def rate(attr):
        return float(sum(getattr(r, attr) for r in recs) / n) if n else float("nan")
    return Metrics(len(logs), n, rate("detected"), rate("verified"), rate("gate_passed"),
                   rate("cube_acquired"), rate("resonance_accepted"))


def write_metrics_csv(metrics: Metrics, path: str | Path) -> None:
    row = metrics.as_row()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
