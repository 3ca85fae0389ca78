"""Folded pushbroom imager: two-axis mirror kinematics, line scans, patches and mosaics.

Module frame: the lens looks along ``BORESIGHT`` (+z) into a mirror that, at
rest, sits at 45 degrees and folds the view onto ``FORWARD`` (+x). The slit
runs along +y at rest. ``tilt_x`` turns the mirror about the slit axis and
sweeps the line across the scene; ``tilt_y`` turns it about the in-plane
cross axis and slides the line along itself.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from .geometry import Placement, Rig, RobotPose, unit
from .scene import FWHM_TO_SIGMA, Scene, radiance_rays
from .spectral import SpectralCube, WavelengthGrid

THETA_MAX_DEG = 25.0
MIRROR_MEMORY = 1500
FOLD_ANGLE_DEG = 45.0

BORESIGHT = np.array([0.0, 0.0, 1.0])
FORWARD = np.array([1.0, 0.0, 0.0])
SLIT_AXIS = unit(np.cross(BORESIGHT, FORWARD))
REST_NORMAL = unit(FORWARD - BORESIGHT)
CROSS_AXIS = unit(np.cross(REST_NORMAL, SLIT_AXIS))


class TiltRangeError(ValueError):
    pass


class UnreachableTargetError(ValueError):
    def __init__(self, message: str, clamped: tuple[float, float]):
        super().__init__(message)
        self.clamped = clamped


class PlanValidationError(ValueError):
    pass


class IncompatiblePatchError(ValueError):
    pass


# --- mirror ------------------------------------------------------------------


def command_from_tilt(tilt_deg: float, theta_max_deg: float = THETA_MAX_DEG) -> float:
    """Tangent-law normalised command in [-1, 1]."""
    if abs(tilt_deg) > theta_max_deg:
        raise TiltRangeError(f"tilt {tilt_deg} deg outside +/-{theta_max_deg} deg")
    return math.tan(math.radians(tilt_deg)) / math.tan(math.radians(theta_max_deg))


def tilt_from_command(command: float, theta_max_deg: float = THETA_MAX_DEG) -> float:
    if abs(command) > 1.0:
        raise TiltRangeError(f"command {command} outside [-1, 1]")
    return math.degrees(math.atan(command * math.tan(math.radians(theta_max_deg))))


@dataclass(frozen=True)
class MirrorState:
    tilt_x_deg: float = 0.0
    tilt_y_deg: float = 0.0
    theta_max_deg: float = THETA_MAX_DEG

    def __post_init__(self):
        for t in (self.tilt_x_deg, self.tilt_y_deg):
            if not math.isfinite(t) or abs(t) > self.theta_max_deg:
                raise TiltRangeError(f"tilt {t} deg outside +/-{self.theta_max_deg} deg")

    @property
    def command(self) -> tuple[float, float]:
        return (command_from_tilt(self.tilt_x_deg, self.theta_max_deg),
                command_from_tilt(self.tilt_y_deg, self.theta_max_deg))

    @classmethod
    def from_command(cls, cx: float, cy: float, theta_max_deg: float = THETA_MAX_DEG) -> "MirrorState":
        return cls(tilt_from_command(cx, theta_max_deg), tilt_from_command(cy, theta_max_deg),
                   theta_max_deg)


def householder(n) -> np.ndarray:
    n = unit(n)
    return np.eye(3) - 2.0 * np.outer(n, n)


def reflect(v, n) -> np.ndarray:
    """Reflect vectors ``v`` (..., 3) in the plane with unit normal ``n``."""
    v = np.asarray(v, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def mirror_normal(tilt_x_deg, tilt_y_deg) -> np.ndarray:
    tx = np.radians(np.asarray(tilt_x_deg, dtype=np.float64))
    ty = np.radians(np.asarray(tilt_y_deg, dtype=np.float64))
    a = (np.cos(tx) * np.cos(ty))[..., None] * REST_NORMAL
    b = (np.cos(tx) * np.sin(ty))[..., None] * SLIT_AXIS
    c = np.sin(tx)[..., None] * CROSS_AXIS
    return a - b + c


def view_direction(state: MirrorState, incident=BORESIGHT) -> np.ndarray:
    """Outgoing unit direction (module frame) for a ray leaving the lens along ``incident``."""
    return reflect(incident, mirror_normal(state.tilt_x_deg, state.tilt_y_deg))


def tilts_for_directions(o, incident=BORESIGHT) -> tuple[np.ndarray, np.ndarray]:
    """Unchecked inverse of ``view_direction``; NaN where no mirror pose exists."""
    o = unit(np.asarray(o, dtype=np.float64))
    diff = o - incident
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = diff / norm
    along = n @ REST_NORMAL
    ok = (norm[..., 0] > 1e-12) & (along > 0)
    tx = np.degrees(np.arcsin(np.clip(n @ CROSS_AXIS, -1.0, 1.0)))
    ty = np.degrees(np.arctan2(-(n @ SLIT_AXIS), along))
    return np.where(ok, tx, np.nan), np.where(ok, ty, np.nan)


def mirror_tilt_for_target(o, theta_max_deg: float = THETA_MAX_DEG) -> tuple[float, float]:
    """Mirror tilts that send the boresight along ``o``: the normal bisects boresight and target."""
    o = np.asarray(o, dtype=np.float64)
    tx, ty = tilts_for_directions(o)
    tx, ty = float(tx), float(ty)
    if not (math.isfinite(tx) and math.isfinite(ty)):
        raise UnreachableTargetError(f"direction {o} cannot be reached by reflection",
                                     (math.copysign(theta_max_deg, o[2]), 0.0))
    if abs(tx) > theta_max_deg + 1e-9 or abs(ty) > theta_max_deg + 1e-9:
        clamped = (max(-theta_max_deg, min(theta_max_deg, tx)),
                   max(-theta_max_deg, min(theta_max_deg, ty)))
        raise UnreachableTargetError(
            f"direction needs tilt ({tx:.3f}, {ty:.3f}) deg, beyond +/-{theta_max_deg} deg", clamped)
    return (max(-theta_max_deg, min(theta_max_deg, tx)),
            max(-theta_max_deg, min(theta_max_deg, ty)))


# --- camera ------------------------------------------------------------------


@dataclass(frozen=True)
class PushbroomCamera:
    samples: int = 640
    slit_fov_deg: float = 5.0
    focal_distance_m: float = 0.914
    exposure_ms: float = 10.0
    noise_floor: float = 0.0
    spectral_fwhm_nm: float = 3.0
    depth_of_field_m: float = 0.025
    defocus_half_contrast_m: float = 0.100
    defocus_kernel_samples: int = 8
    mirror_tau_ms: float = 0.0
    theta_max_deg: float = THETA_MAX_DEG
    mirror_memory: int = MIRROR_MEMORY
    fold_angle_deg: float = FOLD_ANGLE_DEG
    boresight: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.fold_angle_deg != FOLD_ANGLE_DEG:
            raise ValueError("the fold mirror rests at exactly 45 degrees")
        if tuple(self.boresight) != tuple(BORESIGHT):
            raise ValueError("boresight is fixed along the module +z axis")
        if self.samples < 1 or self.slit_fov_deg <= 0 or self.exposure_ms <= 0:
            raise ValueError("samples, slit_fov_deg and exposure_ms must be positive")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")

    def sample_angles_deg(self) -> np.ndarray:
        """Across-slit angle of each sample centre."""
        s = np.arange(self.samples, dtype=np.float64)
        return ((s + 0.5) / self.samples - 0.5) * self.slit_fov_deg

    def incident_rays(self) -> np.ndarray:
        """Lens-side ray per sample; at rest sample index grows toward -y (image right)."""
        phi = np.radians(self.sample_angles_deg())
        return np.column_stack([np.zeros_like(phi), -np.sin(phi), np.cos(phi)])

    def defocus_loss(self, distance_m) -> np.ndarray:
        """Fractional contrast loss: zero inside the depth of field, 0.5 at the half-contrast offset."""
        off = np.abs(np.asarray(distance_m, dtype=np.float64) - self.focal_distance_m)
        span = self.defocus_half_contrast_m - self.depth_of_field_m
        loss = 0.5 * (off - self.depth_of_field_m) / span
        return np.clip(np.nan_to_num(loss, nan=1.0, posinf=1.0), 0.0, 1.0)


def default_placement(rig: Rig | None = None, pose: RobotPose | None = None) -> Placement:
    return (rig or Rig()).hyperspectral_placement(pose or RobotPose())


@lru_cache(maxsize=16)
def _blur_matrix(grid: WavelengthGrid, fwhm_nm: float) -> np.ndarray:
    if fwhm_nm <= 0:
        return np.eye(grid.bands)
    sigma = fwhm_nm * FWHM_TO_SIGMA
    lam = grid.centers
    k = np.exp(-0.5 * ((lam[:, None] - lam[None, :]) / sigma) ** 2)
    k /= k.sum(axis=1, keepdims=True)
    return k


def line_directions(cam: PushbroomCamera, state: MirrorState, placement: Placement) -> np.ndarray:
    n = mirror_normal(state.tilt_x_deg, state.tilt_y_deg)
    return placement.to_world(reflect(cam.incident_rays(), n))


def _render_line(scene: Scene, cam: PushbroomCamera, state: MirrorState, grid: WavelengthGrid,
                 placement: Placement, seed: int, line_index: int):
    dirs = line_directions(cam, state, placement)
    rad, idx, dist, _ = radiance_rays(scene, placement.origin, dirs, grid)
    if cam.defocus_kernel_samples > 0:
        loss = cam.defocus_loss(dist)
        if np.any(loss > 0):
            local = uniform_filter1d(rad, size=2 * cam.defocus_kernel_samples + 1, axis=0, mode="nearest")
            rad = (1.0 - loss)[:, None] * rad + loss[:, None] * local
    rad = rad @ _blur_matrix(grid, cam.spectral_fwhm_nm).T
    if cam.noise_floor > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(line_index,)))
        rad = rad + rng.normal(0.0, cam.noise_floor, size=rad.shape)
    return rad, idx


def scan_line(scene: Scene, cam: PushbroomCamera, state: MirrorState, grid: WavelengthGrid,
              placement: Placement | None = None, seed: int = 0, line_index: int = 0) -> np.ndarray:
    """One exposure: (samples, bands) radiance along the slit."""
    rad, _ = _render_line(scene, cam, state, grid, placement or default_placement(), seed, line_index)
    return rad


# --- scan plans --------------------------------------------------------------


@dataclass(frozen=True)
class ScanPlan:
    """Linear sweep in tilt space from ``tilt_start`` to ``tilt_end`` over ``lines`` exposures."""

    tilt_start: tuple[float, float]
    tilt_end: tuple[float, float]
    lines: int
    exposure_ms: float = 10.0
    theta_max_deg: float = THETA_MAX_DEG

    def __post_init__(self):
        object.__setattr__(self, "tilt_start", tuple(float(t) for t in self.tilt_start))
        object.__setattr__(self, "tilt_end", tuple(float(t) for t in self.tilt_end))
        if int(self.lines) != self.lines or self.lines < 1:
            raise PlanValidationError(f"lines must be a positive integer, got {self.lines}")
        if self.exposure_ms <= 0:
            raise PlanValidationError("exposure_ms must be positive")
        for t in self.tilt_start + self.tilt_end:
            if not math.isfinite(t) or abs(t) > self.theta_max_deg:
                raise PlanValidationError(
                    f"tilt {t} deg outside mirror range +/-{self.theta_max_deg} deg")

    def schedule(self) -> np.ndarray:
        """(lines, 2) tilt per line."""
        start = np.asarray(self.tilt_start)
        end = np.asarray(self.tilt_end)
        if self.lines == 1:
            return start[None, :].copy()
        j = np.arange(self.lines, dtype=np.float64)[:, None]
        return start + (end - start) * j / (self.lines - 1)

    def to_config(self) -> dict[str, str]:
        return {
            "tilt_start": f"{self.tilt_start[0]!r}, {self.tilt_start[1]!r}",
            "tilt_end": f"{self.tilt_end[0]!r}, {self.tilt_end[1]!r}",
            "lines": str(self.lines),
            "exposure_ms": repr(float(self.exposure_ms)),
        }

    @classmethod
    def from_config(cls, section) -> "ScanPlan":
        def pair(text):
            a, b = (float(x) for x in str(text).split(","))
            return a, b
        return cls(pair(section["tilt_start"]), pair(section["tilt_end"]), int(section["lines"]),
                   float(section.get("exposure_ms", 10.0)))


def _threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("FOVEASCAN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _settled_schedule(sched: np.ndarray, cam: PushbroomCamera, exposure_ms: float) -> np.ndarray:
    if cam.mirror_tau_ms <= 0 or len(sched) < 2:
        return sched
    alpha = 1.0 - math.exp(-exposure_ms / cam.mirror_tau_ms)
    out = sched.copy()
    for j in range(1, len(sched)):
        out[j] = out[j - 1] + (sched[j] - out[j - 1]) * alpha
    return out


def acquire_patch(scene: Scene, cam: PushbroomCamera, plan: ScanPlan, grid: WavelengthGrid,
                  placement: Placement | None = None, seed: int = 0, threads: int | None = None,
                  return_hits: bool = False):
    """Sweep the mirror through ``plan`` and stack the lines into a cube.

    Lines are independent; with ``threads > 1`` they render concurrently and
    are reassembled in schedule order, so the output does not depend on the
    thread count. With ``return_hits`` the per-pixel surface index is returned too.
    """
    placement = placement or default_placement()
    sched = _settled_schedule(plan.schedule(), cam, plan.exposure_ms)
    states = [MirrorState(float(tx), float(ty), cam.theta_max_deg) for tx, ty in sched]

    def render(j):
        return _render_line(scene, cam, states[j], grid, placement, seed, j)

    n = _threads(threads)
    if n > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(render, range(len(states))))
    else:
        results = [render(j) for j in range(len(states))]
    data = np.stack([r[0] for r in results]).astype(np.float32)
    meta = {
        "tilt_x": sched[:, 0].copy(),
        "tilt_y": sched[:, 1].copy(),
        "exposure_ms": float(plan.exposure_ms),
        "illuminant": scene.illuminant.kind.value,
        "halogen_on": bool(scene.illuminant.halogen_on),
        "slit_fov_deg": float(cam.slit_fov_deg),
    }
    cube = SpectralCube(grid, data, meta)
    if return_hits:
        return cube, np.stack([r[1] for r in results])
    return cube


def sample_equivalent_tilts(cam_or_fov, samples: int | None, tilt_x: float, tilt_y: float):
    """Mirror tilt that would put each sample's scene point on the boresight."""
    if isinstance(cam_or_fov, PushbroomCamera):
        cam = cam_or_fov
    else:
        cam = PushbroomCamera(samples=int(samples), slit_fov_deg=float(cam_or_fov))
    o = reflect(cam.incident_rays(), mirror_normal(tilt_x, tilt_y))
    return tilts_for_directions(o)


def pixel_tilt_map(cube: SpectralCube) -> np.ndarray:
    """(lines, samples, 2) equivalent mirror tilt per pixel of a single-sweep cube."""
    fov = float(cube.meta.get("slit_fov_deg", PushbroomCamera.slit_fov_deg))
    out = np.empty((cube.lines, cube.samples, 2))
    for j, (tx, ty) in enumerate(zip(cube.meta["tilt_x"], cube.meta["tilt_y"])):
        ex, ey = sample_equivalent_tilts(fov, cube.samples, tx, ty)
        out[j, :, 0] = ex
        out[j, :, 1] = ey
    return out


def sample_toward(cam: PushbroomCamera, state: MirrorState, tilt_y_target: float) -> int:
    """Slit sample whose view is closest to where the mirror would look at ``tilt_y_target``."""
    target = reflect(BORESIGHT, mirror_normal(state.tilt_x_deg, tilt_y_target))
    dirs = reflect(cam.incident_rays(), mirror_normal(state.tilt_x_deg, state.tilt_y_deg))
    return int(np.argmax(dirs @ target))


# --- mosaics -----------------------------------------------------------------


def merge_patches(patches: Sequence[SpectralCube], atol: float = 1e-9):
    """Tile single-column sweeps into one mosaic ordered by tilt.

    Patches sharing a constant ``tilt_y`` form a column; their ``tilt_x``
    schedules must butt together with a common step. Every column must cover
    the same ``tilt_x`` schedule. Returns ``(mosaic, tilt_map)`` where
    ``tilt_map[l, s]`` is the equivalent mirror tilt of mosaic pixel (l, s).
    """
    if not patches:
        raise IncompatiblePatchError("no patches to merge")
    ref = patches[0]
    keys = ("exposure_ms", "slit_fov_deg")
    for p in patches:
        if p.grid != ref.grid:
            raise IncompatiblePatchError("patches use different wavelength grids")
        if p.samples != ref.samples:
            raise IncompatiblePatchError("patches have different sample counts")
        for k in keys:
            if p.meta.get(k) != ref.meta.get(k):
                raise IncompatiblePatchError(f"patches differ in {k}")
        if "tilt_x" not in p.meta or "tilt_y" not in p.meta:
            raise IncompatiblePatchError("patch lacks a tilt schedule")
    if len(patches) == 1:
        return ref, pixel_tilt_map(ref)

    columns: dict[float, list[SpectralCube]] = {}
    for p in patches:
        ty = p.meta["tilt_y"]
        if np.ptp(ty) > atol:
            raise IncompatiblePatchError("each patch must sweep at a constant tilt_y")
        key = next((k for k in columns if abs(k - ty[0]) <= atol), float(ty[0]))
        columns.setdefault(key, []).append(p)

    merged_cols = []
    schedule = None
    for key in sorted(columns):
        parts = []
        for p in columns[key]:
            tx = p.meta["tilt_x"]
            order = np.argsort(tx, kind="stable")
            if len(tx) > 1 and np.any(np.diff(tx[order]) <= 0):
                raise IncompatiblePatchError("patch tilt_x schedule is not strictly monotone")
            parts.append((tx[order], p.data[order]))
        parts.sort(key=lambda item: item[0][0])
        tx_all = np.concatenate([t for t, _ in parts])
        if len(tx_all) > 1:
            steps = np.diff(tx_all)
            if np.any(steps <= 0) or np.ptp(steps) > max(atol, 1e-6 * abs(steps[0])):
                raise IncompatiblePatchError("patch schedules do not tile: gaps, overlaps or uneven steps")
        if schedule is None:
            schedule = tx_all
        elif schedule.shape != tx_all.shape or np.max(np.abs(schedule - tx_all)) > atol:
            raise IncompatiblePatchError("columns cover different tilt_x ranges")
        merged_cols.append((key, np.concatenate([d for _, d in parts], axis=0)))

    data = np.concatenate([d for _, d in merged_cols], axis=1)
    col_tilts = np.array([k for k, _ in merged_cols])
    meta = {k: v for k, v in ref.meta.items() if k not in ("tilt_x", "tilt_y")}
    meta["tilt_x"] = schedule
    meta["tilt_y"] = np.full(len(schedule), col_tilts[0])
    meta["mosaic_column_tilt_y"] = col_tilts
    mosaic = SpectralCube(ref.grid, data, meta)

    fov = float(ref.meta.get("slit_fov_deg", PushbroomCamera.slit_fov_deg))
    tilt_map = np.empty((len(schedule), data.shape[1], 2))
    for c, ty in enumerate(col_tilts):
        sl = slice(c * ref.samples, (c + 1) * ref.samples)
        for j, tx in enumerate(schedule):
            ex, ey = sample_equivalent_tilts(fov, ref.samples, tx, ty)
            tilt_map[j, sl, 0] = ex
            tilt_map[j, sl, 1] = ey
    return mosaic, tilt_map


# --- timing ------------------------------------------------------------------


@dataclass(frozen=True)
class ScanTiming:
    t_img_ms: float
    sample_rate_hz: float
    stepped: bool


def scan_timing(exposure_ms: float, lines: int, mirror_memory: int = MIRROR_MEMORY) -> ScanTiming:
    """Imaging time is exposure x lines; schedules beyond controller memory run stepped."""
    if exposure_ms <= 0 or lines < 1:
        raise ValueError("exposure must be positive and lines >= 1")
    t_img = float(exposure_ms) * int(lines)
    stepped = lines > mirror_memory
    rate = 1000.0 / exposure_ms if stepped else mirror_memory / (t_img / 1000.0)
    return ScanTiming(t_img, rate, stepped)


@dataclass
class RenderResult:
    mosaic: SpectralCube
    tilt_map: np.ndarray
    patches: list[SpectralCube] = field(default_factory=list)


def render_scene(scene: Scene, cam: PushbroomCamera, grid: WavelengthGrid,
                 tilt_x_range: tuple[float, float], step_deg: float, tilt_y_columns: Sequence[float],
                 placement: Placement | None = None, seed: int = 0, threads: int | None = None) -> RenderResult:
    """Brute-force scan: one full sweep per column, merged into a mosaic."""
    lo, hi = tilt_x_range
    lines = int(round((hi - lo) / step_deg)) + 1
    patches = []
    for ty in tilt_y_columns:
        plan = ScanPlan((lo, ty), (hi, ty), lines, cam.exposure_ms, cam.theta_max_deg)
        patches.append(acquire_patch(scene, cam, plan, grid, placement, seed, threads))
    mosaic, tilt_map = merge_patches(patches)
    return RenderResult(mosaic, tilt_map, patches)


def dark_patch(cam: PushbroomCamera, plan: ScanPlan, grid: WavelengthGrid, seed: int = 0) -> SpectralCube:
    """Capped-lens exposure over ``plan``: detector noise only, same per-line streams as a sweep."""
    sched = plan.schedule()
    data = np.zeros((len(sched), cam.samples, grid.bands))
    if cam.noise_floor > 0:
        for j in range(len(sched)):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))
            data[j] = rng.normal(0.0, cam.noise_floor, size=(cam.samples, grid.bands))
    meta = {
        "tilt_x": sched[:, 0].copy(),
        "tilt_y": sched[:, 1].copy(),
        "exposure_ms": float(plan.exposure_ms),
        "illuminant": "dark",
        "halogen_on": False,
        "slit_fov_deg": float(cam.slit_fov_deg),
    }
    return SpectralCube(grid, data.astype(np.float32), meta)
