"""Scenario files: INI descriptions of a field layout, robot route, hardware and run-to-run variation."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .calibration import Homography
from .geometry import Rig, RgbCamera
from .mission import MissionConfig, named_seed
from .optics import PushbroomCamera
from .perception import CaptureGate, DetectorNoiseModel, ResonanceParams
from .scene import Illuminant, Plant, Scene, attach_sensor, fiducial_board

PRESETS = ("structured", "unstructured", "indoor", "zero-sensor")


class ScenarioError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = _floats(chunk)
            if len(vals) != 2:
                raise ScenarioError(f"expected 'a, b' pairs, got {chunk.strip()!r}")
            out.append(vals)
    return tuple(out)


@dataclass(frozen=True)
class RowSpec:
    name: str
    y: float
    x_start: float
    x_end: float
    plant_width: float = 0.4
    plant_height: float = 0.6
    plant_center_z: float = 0.5
    gap: float = 0.05


@dataclass(frozen=True)
class SensorSpec:
    id: str
    row: str
    x: float
    height: float = 0.5
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0


@dataclass(frozen=True)
class Variation:
    sensor_yaw_sigma_deg: float = 0.0
    sensor_pitch_sigma_deg: float = 0.0
    sensor_height_sigma_m: float = 0.0
    plant_offset_sigma_m: float = 0.0


@dataclass(frozen=True)
class CalibrationSpec:
    board_distance_m: float = 0.914
    board_height_m: float = 0.5
    fiducials: tuple[tuple[float, float], ...] = ((-0.06, -0.04), (0.06, -0.04), (0.06, 0.04), (-0.06, 0.04))
    fiducial_size_m: float = 0.01


@dataclass(frozen=True)
class Scenario:
    name: str
    rows: tuple[RowSpec, ...]
    sensors: tuple[SensorSpec, ...]
    illuminant: Illuminant
    base: MissionConfig
    variation: Variation = Variation()
    calibration: CalibrationSpec = CalibrationSpec()
    ground: bool = True
    source: str | None = None

    def realize(self, seed: int) -> Scene:
        """Scene for one run, with placement jitter drawn from the run's ``scene`` stream."""
        rng = np.random.default_rng(named_seed(seed, "scene"))
        var = self.variation
        rows, plants_by_row = [], {}
        for row in self.rows:
            plants = []
            x = row.x_start + row.plant_width / 2
            k = 0
            while x + row.plant_width / 2 <= row.x_end + 1e-9:
                dy = float(rng.normal(0.0, var.plant_offset_sigma_m)) if var.plant_offset_sigma_m else 0.0
                plants.append(Plant(f"{row.name}.p{k}", (x, row.y + dy, row.plant_center_z),
                                    width=row.plant_width, height=row.plant_height))
                x += row.plant_width + row.gap
                k += 1
            rows.append(tuple(plants))
            plants_by_row[row.name] = plants
        sensors = []
        for s in self.sensors:
            if s.row not in plants_by_row:
                raise ScenarioError(f"sensor {s.id} names unknown row {s.row}")
            plants = plants_by_row[s.row]
            host = min(plants, key=lambda p: abs(p.center[0] - s.x))
            yaw = s.yaw_deg + (float(rng.normal(0.0, var.sensor_yaw_sigma_deg)) if var.sensor_yaw_sigma_deg else 0.0)
            pitch = s.pitch_deg + (float(rng.normal(0.0, var.sensor_pitch_sigma_deg))
                                   if var.sensor_pitch_sigma_deg else 0.0)
            dz = float(rng.normal(0.0, var.sensor_height_sigma_m)) if var.sensor_height_sigma_m else 0.0
            sensors.append(attach_sensor(host, s.id, s.height + dz, s.x - host.center[0], yaw, pitch))
        return Scene(rows=tuple(rows), sensors=tuple(sensors), illuminant=self.illuminant, ground=self.ground,
                     rng_seed=int(seed))

    def calibration_scene(self) -> Scene:
        c = self.calibration
        panels = fiducial_board(c.board_distance_m, c.board_height_m, c.fiducials, c.fiducial_size_m)
        return Scene(panels=panels, illuminant=self.illuminant, ground=False)

    def mission_config(self, seed: int, calibration: Homography | None) -> MissionConfig:
        return replace(self.base, seed=int(seed), calibration=calibration)


# --- INI parsing ---------------------------------------------------------------------------


def _get(sec, key, conv=float, default=None):
    if sec is None or key not in sec:
        return default
    try:
        return conv(sec[key])
    except ValueError as exc:
        raise ScenarioError(f"[{sec.name}] {key}: {exc}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_scenario(text: str, name: str = "scenario", source: str | None = None) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"cannot parse scenario: {exc}") from None
    sec = lambda n: cp[n] if cp.has_section(n) else None  # noqa: E731

    sc = sec("scene")
    name = _get(sc, "name", str, name)
    illuminant = Illuminant(_get(sc, "illuminant", str, "combined"),
                            solar_scale=_get(sc, "solar_scale", default=1.0),
                            halogen_scale=_get(sc, "halogen_scale", default=1.0))
    ground = _get(sc, "ground", _bool, True)

    rows = []
    for s in cp.sections():
        if s.startswith("row."):
            r = cp[s]
            rows.append(RowSpec(s[4:], _get(r, "y"), _get(r, "x_start"), _get(r, "x_end"),
                                _get(r, "plant_width", default=0.4), _get(r, "plant_height", default=0.6),
                                _get(r, "plant_center_z", default=0.5), _get(r, "gap", default=0.05)))
    sensors = []
    for s in cp.sections():
        if s.startswith("sensor."):
            r = cp[s]
            sensors.append(SensorSpec(s[7:], _get(r, "row", str), _get(r, "x"), _get(r, "height", default=0.5),
                                      _get(r, "yaw_deg", default=0.0), _get(r, "pitch_deg", default=0.0)))
    for row in rows:
        if None in (row.y, row.x_start, row.x_end):
            raise ScenarioError(f"[row.{row.name}] needs y, x_start and x_end")
    for s in sensors:
        if s.row is None or s.x is None:
            raise ScenarioError(f"[sensor.{s.id}] needs row and x")

    rb = sec("robot")
    if rb is None or "waypoints" not in rb:
        raise ScenarioError("[robot] waypoints are required")
    waypoints = _get(rb, "waypoints", _pairs)
    rig = Rig(_get(rb, "mirror_height_m", default=0.5), _get(rb, "rgb_offset_up_m", default=0.06))

    cm = sec("camera")
    camera = PushbroomCamera(
        samples=_get(cm, "samples", int, 640), slit_fov_deg=_get(cm, "slit_fov_deg", default=5.0),
        exposure_ms=_get(cm, "exposure_ms", default=10.0), noise_floor=_get(cm, "noise_floor", default=0.0),
        spectral_fwhm_nm=_get(cm, "spectral_fwhm_nm", default=3.0),
        mirror_tau_ms=_get(cm, "mirror_tau_ms", default=0.0))
    rg = sec("rgb")
    rgb = RgbCamera(_get(rg, "focal_px", default=2000.0), _get(rg, "width", int, 1280),
                    _get(rg, "height", int, 1024))

    dt = sec("detector")
    detector = DetectorNoiseModel(_get(dt, "miss_rate", default=0.0), _get(dt, "false_positive_rate", default=0.0),
                                  _get(dt, "centroid_jitter_px", default=0.0), _get(dt, "size_jitter_frac", default=0.0))
    gt = sec("gate")
    gate = CaptureGate(
        distance_nominal_mm=_get(gt, "distance_nominal_mm", default=914.0),
        distance_tol_mm=_get(gt, "distance_tol_mm", default=25.0),
        zone_width_mm=_get(gt, "zone_width_mm", default=76.0),
        zone_height_mm=_get(gt, "zone_height_mm", default=25.0),
        max_angle_deg=_get(gt, "max_angle_deg", default=4.0),
        sensor_size_mm=_get(gt, "sensor_size_mm", default=25.4),
        rgb_focal_px=rgb.focal_px, principal_point=(rgb.cx, rgb.cy),
        axis_offset_up_mm=rig.rgb_offset_up_m * 1000.0)

    vs = sec("variation")
    variation = Variation(_get(vs, "sensor_yaw_sigma_deg", default=0.0), _get(vs, "sensor_pitch_sigma_deg", default=0.0),
                          _get(vs, "sensor_height_sigma_m", default=0.0), _get(vs, "plant_offset_sigma_m", default=0.0))

    sn = sec("scan")
    resonance = ResonanceParams(snr_threshold=_get(sn, "snr_threshold", default=3.0))
    base = MissionConfig(
        waypoints=waypoints,
        cruise_speed=_get(rb, "cruise_speed", default=0.1), slow_speed=_get(rb, "slow_speed", default=0.015),
        control_rate_hz=_get(rb, "control_rate_hz", default=10.0),
        max_turn_rate_deg_s=_get(rb, "max_turn_rate_deg_s", default=45.0),
        lookahead_m=_get(rb, "lookahead_m", default=0.3),
        heading_noise_deg=_get(rb, "heading_noise_deg", default=0.0),
        gate=gate, detector_noise=detector, rig=rig, rgb=rgb, camera=camera,
        track_loss_frames=_get(dt, "track_loss_frames", int, 5), verify_k=_get(dt, "verify_k", int, 3),
        verify_var_px2=_get(dt, "verify_var_px2", default=9.0),
        detection_range_mm=_get(dt, "range_mm", default=1200.0),
        scan_step_deg=_get(sn, "step_deg", default=0.04), scan_margin_frac=_get(sn, "margin_frac", default=0.25),
        roi_fraction=_get(sn, "roi_fraction", default=0.5),
        white_distance_m=_get(sn, "white_distance_m", default=0.914),
        reference_nm=_get(sn, "reference_nm", _floats, (650.0,)),
        match_tol_nm=_get(sn, "match_tol_nm", default=20.0), resonance=resonance,
        max_time_s=_get(rb, "max_time_s", default=3600.0))

    cs = sec("calibration")
    calib = CalibrationSpec(
        _get(cs, "board_distance_m", default=0.914), _get(cs, "board_height_m", default=rig.mirror_height_m),
        _get(cs, "fiducials", _pairs, CalibrationSpec.fiducials), _get(cs, "fiducial_size_m", default=0.01))
    return Scenario(name, tuple(rows), tuple(sensors), illuminant, base, variation, calib, ground, source)


def load_scenario(path_or_preset: str | Path) -> Scenario:
    """Read a scenario file, or a shipped preset by name (``structured``, ``indoor`` ...)."""
    p = Path(path_or_preset)
    if p.suffix != ".ini" and str(path_or_preset) in PRESETS:
        text = resources.files("foveascan.scenarios").joinpath(f"{path_or_preset}.ini").read_text("utf-8")
        return parse_scenario(text, str(path_or_preset), f"preset:{path_or_preset}")
    if not p.is_file():
        raise ScenarioError(f"scenario file not found: {p}")
    return parse_scenario(p.read_text(encoding="utf-8"), p.stem, str(p))
