"""Detections, multi-frame verification, the capture gate and resonance extraction."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter, uniform_filter1d

from .geometry import Rig, RgbCamera, RobotPose, angle_between_deg, unit
from .scene import Scene, trace_rays
from .spectral import Spectrum

MAD_TO_SIGMA = 1.4826


class GridMismatchError(ValueError):
    pass


class UnacceptedReportError(ValueError):
    pass


# --- detections -------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    frame_id: int
    u: float
    v: float
    w: float
    h: float
    confidence: float = 1.0
    truth_link: str | None = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("bbox width and height must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (self.u, self.v, self.w, self.h)


@dataclass(frozen=True)
class DetectorNoiseModel:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    centroid_jitter_px: float = 0.0
    size_jitter_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for p in (self.miss_rate, self.false_positive_rate):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.centroid_jitter_px < 0 or self.size_jitter_frac < 0:
            raise ValueError("jitter must be non-negative")


def sensor_corners(sensor) -> np.ndarray:
    from .scene import quad_axes
    c = np.asarray(sensor.center, dtype=np.float64)
    a, b = quad_axes(sensor.normal)
    hw, hh = sensor.extent[0] / 2, sensor.extent[1] / 2
    return np.array([c - a * hw - b * hh, c + a * hw - b * hh, c + a * hw + b * hh, c - a * hw + b * hh])


def _visible(scene: Scene, sensor, origin: np.ndarray) -> bool:
    """Front face toward the camera and the line of sight unobstructed."""
    c = np.asarray(sensor.center, dtype=np.float64)
    d = c - origin
    dist = np.linalg.norm(d)
    d = d / dist
    if np.dot(-d, sensor.normal) <= 0:
        return False
    idx, _, _ = trace_rays(scene, origin, d[None, :])
    return idx[0] >= 0 and scene.surface_ids[idx[0]] == sensor.id


def true_bboxes(scene: Scene, pose: RobotPose, rgb: RgbCamera, rig: Rig) -> dict[str, tuple]:
    """Noiseless projected bbox ``(u, v, w, h)`` of every visible sensor."""
    out = {}
    origin = rig.rgb_origin(pose)
    for s in scene.sensors:
        uv, depth = rgb.project(sensor_corners(s), pose, rig)
        if np.any(depth <= 0):
            continue
        lo, hi = uv.min(axis=0), uv.max(axis=0)
        centre = (lo + hi) / 2
        if not rgb.in_frame(centre)[0]:
            continue
        if not _visible(scene, s, origin):
            continue
        out[s.id] = (float(centre[0]), float(centre[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
    return out


def simulate_detections(scene: Scene, pose: RobotPose, rgb: RgbCamera, noise: DetectorNoiseModel,
                        frame_id: int, rig: Rig = Rig()) -> list[Detection]:
    """Simulated detector output for one RGB frame.

    The generator is derived from ``(noise.seed, frame_id)``, so a frame's
    detections do not depend on which frames were simulated before it.
    """
    rng = np.random.default_rng(np.random.SeedSequence(noise.seed, spawn_key=(int(frame_id),)))
    dets = []
    for sid, (u, v, w, h) in sorted(true_bboxes(scene, pose, rgb, rig).items()):
        draws = rng.random(), rng.normal(size=2), rng.normal(size=2), rng.uniform(0.6, 0.99)
        if draws[0] < noise.miss_rate:
            continue
        du, dv = draws[1] * noise.centroid_jitter_px
        sw, sh = np.maximum(1.0 + draws[2] * noise.size_jitter_frac, 0.05)
        dets.append(Detection(frame_id, u + du, v + dv, w * sw, h * sh, float(draws[3]), sid))
    fp_draw, fu, fv, fs, fc = rng.random(), rng.random(), rng.random(), rng.uniform(15, 80), rng.uniform(0.3, 0.9)
    if fp_draw < noise.false_positive_rate:
        dets.append(Detection(frame_id, fu * rgb.width, fv * rgb.height, fs, fs, float(fc), None))
    return dets


def read_detection_log(path: str | Path) -> list[Detection]:
    """Load ``frame_id,u,v,w,h,confidence`` rows from an external detector."""
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"frame_id", "u", "v", "w", "h", "confidence"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"detection log needs columns {sorted(required)}")
        for row in reader:
            out.append(Detection(int(row["frame_id"]), float(row["u"]), float(row["v"]),
                                 float(row["w"]), float(row["h"]), float(row["confidence"])))
    out.sort(key=lambda d: d.frame_id)
    return out


def write_detection_log(dets: Sequence[Detection], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame_id", "u", "v", "w", "h", "confidence"])
        for d in dets:
            w.writerow([d.frame_id, repr(d.u), repr(d.v), repr(d.w), repr(d.h), repr(d.confidence)])


# --- verification -------------------------------------------------------------


class TrackStatus(str, Enum):
    VERIFIED = "verified"
    NOT_YET = "not-yet"
    REJECTED = "rejected"


@dataclass(frozen=True)
class VerifiedTarget:
    u: float
    v: float
    w: float
    h: float
    variance_px2: float
    truth_link: str | None = None

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (self.u, self.v, self.w, self.h)


@dataclass(frozen=True)
class TrackResult:
    status: TrackStatus
    target: VerifiedTarget | None = None
    variance_px2: float | None = None


def pooled_centroid_variance(dets: Sequence[Detection]) -> float:
    """Sample variance of centroids with u and v deviations pooled (k-1 dof each)."""
    u = np.array([d.u for d in dets])
    v = np.array([d.v for d in dets])
    k = len(dets)
    return float((np.sum((u - u.mean()) ** 2) + np.sum((v - v.mean()) ** 2)) / (2 * (k - 1)))


def verify_track(history: Sequence[Detection], k: int = 3, centroid_var_thresh_px2: float = 9.0,
                 current_frame: int | None = None) -> TrackResult:
    """Accept a target once the last ``k`` frames each hold a detection with a steady centroid.

    A frame gap anywhere in the last ``k`` resets the streak. When
    ``current_frame`` is given the streak must also end at that frame.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(history) < k:
        return TrackResult(TrackStatus.NOT_YET)
    recent = list(history[-k:])
    frames = [d.frame_id for d in recent]
    if any(b - a != 1 for a, b in zip(frames, frames[1:])):
        return TrackResult(TrackStatus.NOT_YET)
    if current_frame is not None and frames[-1] != current_frame:
        return TrackResult(TrackStatus.NOT_YET)
    var = pooled_centroid_variance(recent)
    if var > centroid_var_thresh_px2:
        return TrackResult(TrackStatus.REJECTED, variance_px2=var)
    links = [d.truth_link for d in recent]
    link = max(set(links), key=lambda x: (links.count(x), x is not None, str(x)))
    target = VerifiedTarget(float(np.mean([d.u for d in recent])), float(np.mean([d.v for d in recent])),
                            float(np.mean([d.w for d in recent])), float(np.mean([d.h for d in recent])),
                            var, link)
    return TrackResult(TrackStatus.VERIFIED, target, var)


# --- capture gate --------------------------------------------------------------


@dataclass(frozen=True)
class CaptureGate:
    distance_nominal_mm: float = 914.0
    distance_tol_mm: float = 25.0
    zone_width_mm: float = 76.0
    zone_height_mm: float = 25.0
    max_angle_deg: float = 4.0
    sensor_size_mm: float = 25.4
    rgb_focal_px: float = 2000.0
    principal_point: tuple[float, float] = (640.0, 512.0)
    axis_offset_up_mm: float = 60.0  # RGB centre above the hyperspectral axis

    def __post_init__(self):
        vals = (self.distance_nominal_mm, self.distance_tol_mm, self.zone_width_mm, self.zone_height_mm,
                self.max_angle_deg, self.sensor_size_mm, self.rgb_focal_px)
        if any(v <= 0 for v in vals):
            raise ValueError("capture gate parameters must be positive")
        if self.distance_tol_mm >= self.distance_nominal_mm:
            raise ValueError("distance tolerance must be smaller than the nominal distance")


class GateReason(str, Enum):
    PASS = "pass"
    DISTANCE = "distance"
    LATERAL = "lateral"
    ANGLE = "angle"


@dataclass(frozen=True)
class GateResult:
    passed: bool
    est_distance_mm: float
    est_angle_deg: float
    lateral_mm: tuple[float, float]
    reason: GateReason
    failures: tuple[GateReason, ...] = ()


def approach_angle_deg(pose: RobotPose, sensor_normal_estimate) -> float:
    """Angle between the imaging direction (robot left) and the reversed sensor normal."""
    n = unit(np.asarray(sensor_normal_estimate, dtype=np.float64))
    return float(angle_between_deg(pose.left, -n))


def capture_gate(gate: CaptureGate, target: VerifiedTarget, robot_pose: RobotPose | None = None,
                 sensor_normal_estimate=None, approach_angle: float | None = None) -> GateResult:
    """Pinhole range from the bbox height, lateral offset from its centre, and approach angle."""
    if target.h <= 0:
        raise ValueError("target bbox height must be positive")
    d = gate.rgb_focal_px * gate.sensor_size_mm / target.h
    if approach_angle is None:
        if robot_pose is not None and sensor_normal_estimate is not None:
            approach_angle = approach_angle_deg(robot_pose, sensor_normal_estimate)
        else:
            approach_angle = 0.0
    cx, cy = gate.principal_point
    ideal_v = cy + gate.rgb_focal_px * gate.axis_offset_up_mm / d
    lat_u = (target.u - cx) * d / gate.rgb_focal_px
    lat_v = (target.v - ideal_v) * d / gate.rgb_focal_px
    failures = []
    if abs(d - gate.distance_nominal_mm) > gate.distance_tol_mm:
        failures.append(GateReason.DISTANCE)
    if abs(lat_u) > gate.zone_width_mm / 2 or abs(lat_v) > gate.zone_height_mm / 2:
        failures.append(GateReason.LATERAL)
    if abs(approach_angle) > gate.max_angle_deg:
        failures.append(GateReason.ANGLE)
    reason = failures[0] if failures else GateReason.PASS
    return GateResult(not failures, float(d), float(approach_angle), (float(lat_u), float(lat_v)),
                      reason, tuple(failures))


# --- spectra ----------------------------------------------------------------


def reflectance_correct(raw: Spectrum, white_ref: Spectrum, dark_ref: Spectrum,
                        eps: float = 1e-6) -> Spectrum:
    """(raw - dark) / (white - dark); bands with white - dark <= eps are marked invalid."""
    if not (raw.grid == white_ref.grid == dark_ref.grid):
        raise GridMismatchError("raw, white and dark spectra must share a wavelength grid")
    span = white_ref.values - dark_ref.values
    valid = span > eps
    if valid.mean() < 0.95:
        raise ValueError("white reference must exceed dark reference on at least 95% of bands")
    out = np.zeros_like(raw.values)
    out[valid] = (raw.values[valid] - dark_ref.values[valid]) / span[valid]
    mask = valid & raw.valid_mask & white_ref.valid_mask & dark_ref.valid_mask
    return Spectrum(raw.grid, out, mask)


@dataclass(frozen=True)
class Peak:
    wavelength_nm: float
    height: float
    snr: float
    band: int


@dataclass(frozen=True)
class ResonanceParams:
    smooth_window_bands: int = 5
    baseline_window_bands: int = 31
    snr_threshold: float = 3.0
    search_range_nm: tuple[float, float] = (600.0, 720.0)
    min_report_snr: float = 1.0


@dataclass(frozen=True)
class ReferenceMatch:
    matched: bool
    offset_nm: float
    reference_nm: tuple[float, ...] = ()


@dataclass(frozen=True)
class ResonanceReport:
    peaks: tuple[Peak, ...]
    accepted: bool
    snr_threshold: float = 3.0
    noise_scale: float = 0.0
    reference_match: ReferenceMatch | None = None

    @property
    def accepted_peaks(self) -> tuple[Peak, ...]:
        return tuple(p for p in self.peaks if p.snr >= self.snr_threshold)

    @property
    def best(self) -> Peak | None:
        return max(self.peaks, key=lambda p: p.snr) if self.peaks else None

    def to_dict(self) -> dict:
        d = {
            "accepted": self.accepted,
            "snr_threshold": self.snr_threshold,
            "noise_scale": self.noise_scale,
            "peaks": [asdict(p) for p in self.peaks],
            "reference_match": None if self.reference_match is None else {
                "matched": self.reference_match.matched,
                "offset_nm": self.reference_match.offset_nm,
                "reference_nm": list(self.reference_match.reference_nm),
            },
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _fill_invalid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all():
        return values
    idx = np.arange(len(values))
    return np.interp(idx, idx[valid], values[valid])


def detect_resonance(spec: Spectrum, params: ResonanceParams = ResonanceParams()) -> ResonanceReport:
    """Find resonance peaks above a median baseline and score them against the residual noise.

    The noise scale is 1.4826 x MAD of the high-frequency residual
    (spectrum minus its moving average) over valid bands outside the search
    range. ``snr`` = peak height above baseline / noise scale.
    """
    valid = spec.valid_mask
    if valid.sum() < max(params.baseline_window_bands, 3):
        return ResonanceReport((), False, params.snr_threshold)
    y = _fill_invalid(spec.values, valid)
    smooth = uniform_filter1d(y, size=params.smooth_window_bands, mode="nearest")
    baseline = median_filter(smooth, size=params.baseline_window_bands, mode="nearest")
    signal = smooth - baseline
    residual = y - smooth

    lam = spec.wavelengths
    lo, hi = params.search_range_nm
    inside = (lam >= lo) & (lam <= hi)
    outside = ~inside & valid
    if outside.sum() < 3:
        outside = valid
    r = residual[outside]
    noise = MAD_TO_SIGMA * float(np.median(np.abs(r - np.median(r))))
    noise = max(noise, np.finfo(float).tiny)

    left = np.r_[-np.inf, signal[:-1]]
    right = np.r_[signal[1:], -np.inf]
    is_max = (signal >= left) & (signal >= right) & ((signal > left) | (signal > right))
    cand = np.flatnonzero(is_max & inside & valid & (signal > 0))

    peaks = []
    for k in cand:
        height = float(signal[k])
        snr = height / noise
        if snr < params.min_report_snr:
            continue
        wl = float(lam[k])
        if 0 < k < len(signal) - 1:
            a, b, c = signal[k - 1], signal[k], signal[k + 1]
            denom = a - 2 * b + c
            if denom < 0:
                off = 0.5 * (a - c) / denom
                wl = float(lam[k] + np.clip(off, -0.5, 0.5) * spec.grid.band_spacing())
        peaks.append(Peak(wl, height, float(snr), int(k)))
    peaks.sort(key=lambda p: p.wavelength_nm)
    accepted = any(p.snr >= params.snr_threshold for p in peaks)
    return ResonanceReport(tuple(peaks), accepted, params.snr_threshold, float(noise))


def match_resonance(report: ResonanceReport, reference_peaks_nm: Sequence[float],
                    tol_nm: float = 20.0) -> ReferenceMatch:
    """Every reference needs an accepted peak within ``tol_nm``; offset is the mean signed shift."""
    if not report.accepted:
        raise UnacceptedReportError("cannot match an unaccepted resonance report")
    refs = tuple(float(r) for r in reference_peaks_nm)
    if not refs:
        return ReferenceMatch(True, 0.0, refs)
    peaks = report.accepted_peaks
    offsets = []
    matched = True
    for r in refs:
        nearest = min(peaks, key=lambda p: abs(p.wavelength_nm - r))
        off = nearest.wavelength_nm - r
        offsets.append(off)
        if abs(off) > tol_nm:
            matched = False
    return ReferenceMatch(matched, float(np.mean(offsets)), refs)


def with_match(report: ResonanceReport, match: ReferenceMatch | None) -> ResonanceReport:
    return ResonanceReport(report.peaks, report.accepted, report.snr_threshold, report.noise_scale, match)
