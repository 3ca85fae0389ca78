"""RGB pixel -> mirror tilt homography, fiducial calibration and sweep planning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Rig, RgbCamera, RobotPose
from .optics import (MIRROR_MEMORY, THETA_MAX_DEG, PushbroomCamera, ScanPlan, acquire_patch,
                     merge_patches, mirror_tilt_for_target)
from .scene import Scene
from .spectral import WavelengthGrid


class DegenerateConfigurationError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


class InsufficientFiducialsError(ValueError):
    pass


class PointAtInfinityError(ValueError):
    pass


class TiltOutOfRangeError(ValueError):
    def __init__(self, message: str, corners: Sequence[tuple[float, float]] = ()):
        super().__init__(message)
        self.corners = list(corners)


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple[float, float]
    tilt: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "pixel", tuple(float(x) for x in self.pixel))
        object.__setattr__(self, "tilt", tuple(float(x) for x in self.tilt))


@dataclass(frozen=True, eq=False)
class Homography:
    H: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if abs(H[2, 2]) > 1e-12:
            H = H / H[2, 2]
        elif np.linalg.norm(H) > 0:
            H = H / np.linalg.norm(H)
        if abs(np.linalg.det(H)) <= 1e-12:
            raise DegenerateConfigurationError("homography is singular")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H), self.residual_rms)

    def apply(self, points) -> np.ndarray:
        """Map (N, 2) points; raises if any lands at infinity."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hp = np.column_stack([p, np.ones(len(p))]) @ self.H.T
        w = hp[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise PointAtInfinityError("point maps to infinity under the homography")
        return hp[:, :2] / w[:, None]


def _normalising_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity that centres points and scales mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-15:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _check_configuration(pts: np.ndarray, what: str) -> None:
    n = len(pts)
    scale = max(np.ptp(pts, axis=0).max(), 1e-300)
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(pts[i] - pts[j]) <= 1e-12 * scale:
                raise DegenerateConfigurationError(f"duplicate {what} points {i} and {j}")
    # any collinear triple makes a 4-point fit degenerate; with more points only
    # a fully collinear set (rank-deficient spread) is fatal
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError(f"{what} points are collinear")
    if n == 4:
        for i in range(4):
            for j in range(i + 1, 4):
                for k in range(j + 1, 4):
                    a, b, c = pts[i], pts[j], pts[k]
                    area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
                    if area <= 1e-9 * scale ** 2:
                        raise DegenerateConfigurationError(
                            f"{what} points {i}, {j}, {k} are collinear")


def estimate_homography(corrs: Sequence[Correspondence]) -> Homography:
    """Normalised DLT fit of pixel -> tilt; ``residual_rms`` in degrees."""
    if len(corrs) < 4:
        raise InsufficientPointsError(f"need at least 4 correspondences, got {len(corrs)}")
    src = np.array([c.pixel for c in corrs], dtype=np.float64)
    dst = np.array([c.tilt for c in corrs], dtype=np.float64)
    _check_configuration(src, "pixel")
    _check_configuration(dst, "tilt")

    T1 = _normalising_transform(src)
    T2 = _normalising_transform(dst)
    s = np.column_stack([src, np.ones(len(src))]) @ T1.T
    d = np.column_stack([dst, np.ones(len(dst))]) @ T2.T

    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    A[0::2, 0:3] = np.column_stack([-x, -y, -np.ones(n)])
    A[0::2, 6:9] = np.column_stack([u * x, u * y, u])
    A[1::2, 3:6] = np.column_stack([-x, -y, -np.ones(n)])
    A[1::2, 6:9] = np.column_stack([v * x, v * y, v])
    _, sv, Vt = np.linalg.svd(A)
    if n == 4 and sv[-2] <= 1e-12 * sv[0]:
        raise DegenerateConfigurationError("correspondences do not determine a unique homography")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    hom = Homography(H)
    resid = hom.apply(src) - dst
    rms = float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
    return Homography(hom.H, rms)


@dataclass(frozen=True)
class TiltResult:
    tilt: tuple[float, float]
    in_range: bool


def pixel_to_tilt(H: Homography, pixel, theta_max_deg: float = THETA_MAX_DEG) -> TiltResult:
    t = H.apply(np.asarray(pixel, dtype=np.float64)[None, :])[0]
    return TiltResult((float(t[0]), float(t[1])), bool(np.all(np.abs(t) <= theta_max_deg)))


def tilt_to_pixel(H: Homography, tilt) -> tuple[float, float]:
    p = H.inverse().apply(np.asarray(tilt, dtype=np.float64)[None, :])[0]
    return float(p[0]), float(p[1])


# --- fiducial mosaic ----------------------------------------------------------


def _fiducial_centroid(mosaic, tilt_map: np.ndarray, panel_reflectance_split: float = 0.5):
    level = mosaic.data.astype(np.float64).mean(axis=2)
    lo, hi = level.min(), level.max()
    if hi - lo <= 1e-12:
        return None
    mask = level > lo + panel_reflectance_split * (hi - lo)
    if not mask.any():
        return None
    pts = tilt_map[mask]
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if not len(pts):
        return None
    return pts.mean(axis=0)


def build_calibration_mosaic(scene: Scene, cam: PushbroomCamera, grid: WavelengthGrid,
                             rgb: RgbCamera = RgbCamera(), rig: Rig = Rig(),
                             pose: RobotPose = RobotPose(), half_window_deg: float = 0.6,
                             step_deg: float = 0.02, threads: int | None = None,
                             seed: int = 0) -> list[Correspondence]:
    """Pair each fiducial's RGB pixel with the mirror tilt that centres it in the mosaic.

    Around each fiducial's nominal direction two abutting sweeps are acquired
    and merged; the fiducial is segmented by brightness and its centroid read
    from the mosaic's per-pixel tilt map.
    """
    fiducials = [p for p in scene.panels if p.kind == "fiducial"]
    if len(fiducials) < 4:
        raise InsufficientFiducialsError(f"insufficient fiducials: {len(fiducials)} found, need 4")
    placement = rig.hyperspectral_placement(pose)
    corrs = []
    half_lines = int(round(half_window_deg / step_deg))
    for k, fid in enumerate(fiducials):
        center = np.asarray(fid.center, dtype=np.float64)
        uv, depth = rgb.project(center, pose, rig)
        if depth[0] <= 0 or not rgb.in_frame(uv)[0]:
            raise InsufficientFiducialsError(f"fiducial {fid.id} is not visible to the RGB camera")
        o_local = (center - placement.origin) @ placement.rotation
        tx0, ty0 = mirror_tilt_for_target(o_local / np.linalg.norm(o_local), cam.theta_max_deg)
        lower = ScanPlan((tx0 - half_lines * step_deg, ty0), (tx0 - step_deg, ty0), half_lines,
                         cam.exposure_ms, cam.theta_max_deg)
        upper = ScanPlan((tx0, ty0), (tx0 + half_lines * step_deg, ty0), half_lines + 1,
                         cam.exposure_ms, cam.theta_max_deg)
        seeds = np.random.SeedSequence(int(seed), spawn_key=(k,)).generate_state(2)
        patches = [acquire_patch(scene, cam, p, grid, placement, int(sd), threads)
                   for p, sd in zip((lower, upper), seeds)]
        mosaic, tilt_map = merge_patches(patches, atol=1e-9)
        c = _fiducial_centroid(mosaic, tilt_map)
        if c is None:
            raise InsufficientFiducialsError(f"fiducial {fid.id} not found in its mosaic")
        corrs.append(Correspondence((float(uv[0, 0]), float(uv[0, 1])), (float(c[0]), float(c[1]))))
    return corrs


# --- sweep planning ------------------------------------------------------------


def bbox_corners(bbox) -> np.ndarray:
    u, v, w, h = bbox
    return np.array([[u - w / 2, v - h / 2], [u + w / 2, v - h / 2],
                     [u + w / 2, v + h / 2], [u - w / 2, v + h / 2]])


def plan_sweep(H: Homography, bbox, margin_frac: float = 0.25, step_deg: float = 0.04,
               exposure_ms: float = 10.0, theta_max_deg: float = THETA_MAX_DEG,
               mirror_memory: int = MIRROR_MEMORY) -> ScanPlan:
    """Sweep ``tilt_x`` across the bbox's tilt-space rectangle at its centre ``tilt_y``.

    ``bbox`` is ``(u, v, w, h)`` (centre and size, pixels). The mapped
    rectangle is grown by ``margin_frac`` of its half-extent on every side.
    """
    if step_deg <= 0:
        raise ValueError("step_deg must be positive")
    tilts = H.apply(bbox_corners(bbox))
    bad = [tuple(map(float, t)) for t in tilts if np.any(np.abs(t) > theta_max_deg)]
    if bad:
        raise TiltOutOfRangeError(f"bbox corners map outside +/-{theta_max_deg} deg: {bad}", bad)
    lo, hi = tilts.min(axis=0), tilts.max(axis=0)
    mid = (lo + hi) / 2
    half = (hi - lo) / 2 * (1.0 + margin_frac)
    lo = np.clip(mid - half, -theta_max_deg, theta_max_deg)
    hi = np.clip(mid + half, -theta_max_deg, theta_max_deg)
    extent = hi[0] - lo[0]
    lines = max(1, min(mirror_memory, math.ceil(extent / step_deg - 1e-9)))
    if lines == 1:
        return ScanPlan((mid[0], mid[1]), (mid[0], mid[1]), 1, exposure_ms, theta_max_deg)
    return ScanPlan((lo[0], mid[1]), (hi[0], mid[1]), lines, exposure_ms, theta_max_deg)


# --- persistence ----------------------------------------------------------------


@dataclass
class CalibrationRecord:
    homography: Homography
    correspondences: list[Correspondence]
    geometry: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "H": [repr(float(x)) for x in self.homography.H.ravel()],
            "residual_rms_deg": repr(float(self.homography.residual_rms)),
            "correspondences": [
                {"pixel": [repr(c.pixel[0]), repr(c.pixel[1])], "tilt": [repr(c.tilt[0]), repr(c.tilt[1])]}
                for c in self.correspondences
            ],
            "geometry": self.geometry,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationRecord":
        doc = json.loads(text)
        H = np.array([float(x) for x in doc["H"]]).reshape(3, 3)
        hom = Homography(H, float(doc["residual_rms_deg"]))
        corrs = [Correspondence(tuple(map(float, c["pixel"])), tuple(map(float, c["tilt"])))
                 for c in doc.get("correspondences", [])]
        return cls(hom, corrs, doc.get("geometry", {}))


def save_calibration(record: CalibrationRecord, path: str | Path) -> None:
    Path(path).write_text(record.to_json(), encoding="utf-8")


def load_calibration(path: str | Path) -> CalibrationRecord:
    return CalibrationRecord.from_json(Path(path).read_text(encoding="utf-8"))
