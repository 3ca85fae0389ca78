"""Synthetic row-crop world: surfaces, reflectance models, illuminants and ray casting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import UP, unit
from .spectral import Spectrum, WavelengthGrid

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
SKY_FRACTION = 0.01
SENSOR_STANDOFF_M = 0.005
FIDUCIAL_STANDOFF_M = 0.001

# --- reflectance models ----------------------------------------------------


@dataclass(frozen=True)
class LeafSensorModel:
    """Metasurface leaf sensor: a small square with an angle-dependent resonance."""

    id: str
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    plant_id: str | None = None
    extent: tuple[float, float] = (0.0254, 0.0254)
    resonance_peaks_nm: tuple[float, ...] = (650.0,)
    peak_fwhm_nm: float = 12.0
    peak_amplitude: float = 0.6
    angle_shift_nm_per_deg: float = 2.0
    collection_halfangle_deg: float = 4.0
    window_ramp_deg: float = 2.0
    window_floor: float = 0.01
    baseline_reflectance: float = 0.08

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"sensor {self.id}: normal must be unit length")
        if min(self.extent) <= 0:
            raise ValueError(f"sensor {self.id}: extent must be positive")
        if self.peak_fwhm_nm <= 0 or self.window_ramp_deg <= 0:
            raise ValueError(f"sensor {self.id}: widths must be positive")
        if not 0 <= self.window_floor <= 0.05:
            raise ValueError(f"sensor {self.id}: window_floor must lie in [0, 0.05]")


def collection_window(theta_deg, halfangle_deg: float = 4.0, ramp_deg: float = 2.0,
                      floor: float = 0.01):
    """Raised-cosine amplitude window: 1 up to ``halfangle - ramp``, half at ``halfangle``,
    ``floor`` from ``halfangle + ramp`` on."""
    t = np.abs(np.asarray(theta_deg, dtype=np.float64))
    x = np.clip((t - (halfangle_deg - ramp_deg)) / (2 * ramp_deg), 0.0, 1.0)
    return floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * x))


def sensor_reflectance(model: LeafSensorModel, wavelength_nm, collection_angle_deg):
    """Baseline plus Gaussian resonances that shift and fade with collection angle.

    Broadcasts over ``wavelength_nm`` and ``collection_angle_deg``.
    """
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    theta = np.asarray(collection_angle_deg, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("collection angle must be non-negative")
    sigma = model.peak_fwhm_nm * FWHM_TO_SIGMA
    w = collection_window(theta, model.collection_halfangle_deg, model.window_ramp_deg,
                          model.window_floor)
    shift = model.angle_shift_nm_per_deg * theta
    out = np.full(np.broadcast_shapes(lam.shape, theta.shape), model.baseline_reflectance)
    for center in model.resonance_peaks_nm:
        out = out + model.peak_amplitude * w * np.exp(-0.5 * ((lam - center - shift) / sigma) ** 2)
    return out


@dataclass(frozen=True)
class FoliageModel:
    base: float = 0.05
    green_center_nm: float = 535.0
    green_fwhm_nm: float = 40.0
    green_peak: float = 0.25
    nir_plateau: float = 0.5
    red_edge_center_nm: float = 720.0
    red_edge_width_nm: float = 5.0


def foliage_reflectance(wavelength_nm, model: FoliageModel = FoliageModel()):
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    sigma = model.green_fwhm_nm * FWHM_TO_SIGMA
    green = (model.green_peak - model.base) * np.exp(-0.5 * ((lam - model.green_center_nm) / sigma) ** 2)
    edge = (model.nir_plateau - model.base) / (
        1.0 + np.exp(-(lam - model.red_edge_center_nm) / model.red_edge_width_nm))
    return model.base + green + edge


def soil_reflectance(wavelength_nm):
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    return 0.10 + 0.20 * np.clip((lam - 400.0) / 600.0, 0.0, 1.0)


# --- illumination ------------------------------------------------------------


class IlluminantKind(str, Enum):
    SOLAR = "solar"
    HALOGEN = "halogen"
    COMBINED = "combined"


_H = 6.62607015e-34
_C = 2.99792458e8
_KB = 1.380649e-23


def _planck(lam_nm, temp_k: float):
    lam = np.asarray(lam_nm, dtype=np.float64) * 1e-9
    return 1.0 / (lam ** 5 * np.expm1(_H * _C / (lam * _KB * temp_k)))


def _planck_normalised(lam_nm, temp_k: float):
    peak_nm = 2.897771955e6 / temp_k
    return _planck(lam_nm, temp_k) / _planck(peak_nm, temp_k)


SOLAR_TEMPERATURE_K = 5778.0
HALOGEN_TEMPERATURE_K = 3200.0
SOLAR_DIPS_NM = (760.0, 820.0)


@dataclass(frozen=True)
class Illuminant:
    """Solar, halogen or combined light. Solar carries O2/H2O absorption dips.

    ``solar``: daylight only, no lamp fitted. ``halogen``: lamp only, dark while
    the lamp is off. ``combined``: daylight plus the lamp whenever ``halogen_on``.
    """

    kind: IlluminantKind = IlluminantKind.SOLAR
    halogen_on: bool = False
    solar_scale: float = 1.0
    halogen_scale: float = 1.0
    dip_depth: float = 0.3
    dip_fwhm_nm: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", IlluminantKind(self.kind))
        if self.solar_scale < 0 or self.halogen_scale < 0:
            raise ValueError("illuminant scales must be non-negative")

    def with_halogen(self, on: bool) -> "Illuminant":
        return replace(self, halogen_on=on)


def solar_spectrum(wavelength_nm, depth: float = 0.3, fwhm_nm: float = 10.0):
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    s = _planck_normalised(lam, SOLAR_TEMPERATURE_K)
    sigma = fwhm_nm * FWHM_TO_SIGMA
    for c in SOLAR_DIPS_NM:
        s = s * (1.0 - depth * np.exp(-0.5 * ((lam - c) / sigma) ** 2))
    return s


def halogen_spectrum(wavelength_nm):
    return _planck_normalised(wavelength_nm, HALOGEN_TEMPERATURE_K)


def illuminant_spectrum(ill: Illuminant, wavelength_nm):
    lam = np.asarray(wavelength_nm, dtype=np.float64)
    if ill.kind is IlluminantKind.HALOGEN:
        # lamp-only scene: dark until the lamp is switched on
        return ill.halogen_scale * halogen_spectrum(lam) if ill.halogen_on else np.zeros_like(lam)
    out = ill.solar_scale * solar_spectrum(lam, ill.dip_depth, ill.dip_fwhm_nm)
    if ill.kind is IlluminantKind.COMBINED and ill.halogen_on:
        out = out + ill.halogen_scale * halogen_spectrum(lam)
    return out


# --- geometry --------------------------------------------------------------


@dataclass(frozen=True)
class Plant:
    """Foliage as an upright quad facing the lane the plant is imaged from."""

    id: str
    center: tuple[float, float, float]
    normal: tuple[float, float, float] = (0.0, -1.0, 0.0)
    width: float = 0.40
    height: float = 0.60
    brightness: float = 1.0


@dataclass(frozen=True)
class Panel:
    """Flat Lambertian quad with a constant reflectance (boards, fiducials, walls)."""

    id: str
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    width: float
    height: float
    reflectance: float
    kind: str = "panel"


class SurfaceKind(int, Enum):
    SENSOR = 0
    PLANT = 1
    PANEL = 2
    GROUND = 3


@dataclass(frozen=True)
class Hit:
    surface_id: str
    distance_m: float
    incidence_deg: float


def quad_axes(normal) -> tuple[np.ndarray, np.ndarray]:
    """In-plane (horizontal, vertical-ish) axes for a quad with the given normal."""
    n = unit(normal)
    a = np.cross(UP, n)
    if np.linalg.norm(a) < 1e-9:
        a = np.array([1.0, 0.0, 0.0])
    a = unit(a)
    b = np.cross(n, a)
    return a, b


@dataclass(frozen=True)
class Scene:
    rows: tuple[tuple[Plant, ...], ...] = ()
    sensors: tuple[LeafSensorModel, ...] = ()
    panels: tuple[Panel, ...] = ()
    illuminant: Illuminant = field(default_factory=Illuminant)
    foliage: FoliageModel = field(default_factory=FoliageModel)
    ground: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "panels", tuple(self.panels))
        plant_ids = {p.id for p in self.plants}
        ids = [p.id for p in self.plants] + [s.id for s in self.sensors] + [p.id for p in self.panels]
        if len(ids) != len(set(ids)):
            raise ValueError("surface ids must be unique")
        for s in self.sensors:
            if s.plant_id is not None and s.plant_id not in plant_ids:
                raise ValueError(f"sensor {s.id} references unknown plant {s.plant_id}")

    @property
    def plants(self) -> tuple[Plant, ...]:
        return tuple(p for row in self.rows for p in row)

    def with_illuminant(self, ill: Illuminant) -> "Scene":
        return replace(self, illuminant=ill)

    def sensor(self, sensor_id: str) -> LeafSensorModel:
        for s in self.sensors:
            if s.id == sensor_id:
                return s
        raise KeyError(sensor_id)

    @cached_property
    def _quads(self):
        ids, kinds, refs, centers, normals, ax, bx, half = [], [], [], [], [], [], [], []

        def add(sid, kind, ref, center, normal, w, h):
            a, b = quad_axes(normal)
            ids.append(sid)
            kinds.append(kind)
            refs.append(ref)
            centers.append(center)
            normals.append(unit(normal))
            ax.append(a)
            bx.append(b)
            half.append((w / 2.0, h / 2.0))

        for i, s in enumerate(self.sensors):
            add(s.id, SurfaceKind.SENSOR, i, s.center, s.normal, *s.extent)
        for i, p in enumerate(self.panels):
            add(p.id, SurfaceKind.PANEL, i, p.center, p.normal, p.width, p.height)
        for i, p in enumerate(self.plants):
            add(p.id, SurfaceKind.PLANT, i, p.center, p.normal, p.width, p.height)
        n = len(ids)
        return dict(
            ids=tuple(ids), kinds=np.array(kinds, dtype=int), refs=np.array(refs, dtype=int),
            centers=np.array(centers, dtype=np.float64).reshape(n, 3),
            normals=np.array(normals, dtype=np.float64).reshape(n, 3),
            a=np.array(ax, dtype=np.float64).reshape(n, 3),
            b=np.array(bx, dtype=np.float64).reshape(n, 3),
            half=np.array(half, dtype=np.float64).reshape(n, 2),
        )

    @property
    def surface_ids(self) -> tuple[str, ...]:
        return self._quads["ids"] + (("ground",) if self.ground else ())

    def surface_index(self, surface_id: str) -> int:
        return self.surface_ids.index(surface_id)

    @cached_property
    def _plant_brightness(self) -> np.ndarray:
        return np.array([p.brightness for p in self.plants], dtype=np.float64)


MISS = -1


def trace_rays(scene: Scene, origins, dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit per ray.

    Returns ``(surface_index, distance_m, incidence_deg)``; misses have index
    ``MISS`` and infinite distance. Indices refer to ``scene.surface_ids``.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
    q = scene._quads
    nq = len(q["ids"])
    best_t = np.full(len(d), np.inf)
    best_i = np.full(len(d), MISS, dtype=int)
    if nq:
        denom = d @ q["normals"].T  # (N, Q)
        num = np.einsum("qk,qk->q", q["centers"], q["normals"])[None, :] - o @ q["normals"].T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        valid = np.abs(denom) > 1e-12
        valid &= t > 1e-9
        # in-plane coordinates of the hit relative to each quad centre
        rel_o = o[:, None, :] - q["centers"][None, :, :]
        p_rel = rel_o + np.where(valid, t, 0.0)[..., None] * d[:, None, :]
        pa = np.einsum("nqk,qk->nq", p_rel, q["a"])
        pb = np.einsum("nqk,qk->nq", p_rel, q["b"])
        valid &= (np.abs(pa) <= q["half"][None, :, 0]) & (np.abs(pb) <= q["half"][None, :, 1])
        t = np.where(valid, t, np.inf)
        best_i = np.where(np.isfinite(t.min(axis=1)), t.argmin(axis=1), MISS)
        best_t = t.min(axis=1)
    if scene.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -o[:, 2] / d[:, 2]
        ok = (d[:, 2] < -1e-12) & (tg > 1e-9) & (tg < best_t)
        best_t = np.where(ok, tg, best_t)
        best_i = np.where(ok, nq, best_i)

    normals = np.zeros_like(d)
    hit_q = (best_i >= 0) & (best_i < nq)
    normals[hit_q] = q["normals"][best_i[hit_q]]
    normals[best_i == nq] = UP
    cos_inc = np.clip(-np.sum(d * normals, axis=1), -1.0, 1.0)
    incidence = np.degrees(np.arctan2(np.linalg.norm(np.cross(-d, normals), axis=1), cos_inc))
    incidence = np.where(best_i == MISS, np.nan, incidence)
    return best_i, best_t, incidence


def trace_ray(scene: Scene, origin, direction) -> Hit | None:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    idx, dist, inc = trace_rays(scene, origin, d[None, :])
    if idx[0] == MISS:
        return None
    return Hit(scene.surface_ids[idx[0]], float(dist[0]), float(inc[0]))


def surface_reflectance(scene: Scene, surface_index: np.ndarray, incidence_deg: np.ndarray,
                        wavelengths: np.ndarray) -> np.ndarray:
    """Reflectance (N, bands) for hits; misses get zeros."""
    q = scene._quads
    nq = len(q["ids"])
    idx = np.asarray(surface_index)
    out = np.zeros((len(idx), len(wavelengths)))
    if nq:
        kinds = np.where((idx >= 0) & (idx < nq), q["kinds"][np.clip(idx, 0, max(nq - 1, 0))], -1)
    else:
        kinds = np.full(len(idx), -1)
    refs = np.where(kinds >= 0, q["refs"][np.clip(idx, 0, max(nq - 1, 0))], -1) if nq else kinds

    plant_mask = kinds == SurfaceKind.PLANT
    if plant_mask.any():
        leaf = foliage_reflectance(wavelengths, scene.foliage)
        out[plant_mask] = scene._plant_brightness[refs[plant_mask]][:, None] * leaf[None, :]
    panel_mask = kinds == SurfaceKind.PANEL
    if panel_mask.any():
        vals = np.array([p.reflectance for p in scene.panels])
        out[panel_mask] = vals[refs[panel_mask]][:, None]
    sensor_mask = kinds == SurfaceKind.SENSOR
    for k in np.unique(refs[sensor_mask]):
        m = sensor_mask & (refs == k)
        out[m] = sensor_reflectance(scene.sensors[k], wavelengths[None, :], incidence_deg[m][:, None])
    if scene.ground:
        g = idx == nq
        if g.any():
            out[g] = soil_reflectance(wavelengths)[None, :]
    return out


def radiance_rays(scene: Scene, origins, dirs, grid: WavelengthGrid):
    """Radiance (N, bands) plus the trace result for a bundle of rays."""
    idx, dist, inc = trace_rays(scene, origins, dirs)
    lam = grid.centers
    refl = surface_reflectance(scene, idx, inc, lam)
    ill = illuminant_spectrum(scene.illuminant, lam)
    rad = refl * ill[None, :]
    miss = idx == MISS
    if miss.any():
        sky = SKY_FRACTION * solar_spectrum(lam, scene.illuminant.dip_depth, scene.illuminant.dip_fwhm_nm)
        rad[miss] = sky[None, :]
    return rad, idx, dist, inc


def radiance(scene: Scene, origin, direction, grid: WavelengthGrid) -> Spectrum:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    rad, *_ = radiance_rays(scene, origin, d[None, :], grid)
    return Spectrum(grid, rad[0])


# --- construction helpers ----------------------------------------------------


def attach_sensor(plant: Plant, sensor_id: str, height_m: float, along_m: float = 0.0,
                  yaw_deg: float = 0.0, pitch_deg: float = 0.0, **overrides) -> LeafSensorModel:
    """Place a sensor on a plant's foliage face, just proud of the leaf surface.

    ``yaw_deg`` turns the sensor normal about the vertical, ``pitch_deg`` tips it
    about the sensor's horizontal axis; both default to facing the lane squarely.
    """
    n0 = unit(plant.normal)
    a, _ = quad_axes(n0)
    base = np.asarray(plant.center, dtype=np.float64)
    point = base + a * along_m
    point[2] = height_m
    if abs(along_m) > plant.width / 2 or abs(height_m - base[2]) > plant.height / 2:
        raise ValueError(f"sensor {sensor_id} lies outside the foliage of plant {plant.id}")
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    n = n0 * math.cos(yaw) + np.cross(UP, n0) * math.sin(yaw)
    axis = unit(np.cross(UP, n))
    n = n * math.cos(pitch) + np.cross(axis, n) * math.sin(pitch)
    center = point + n0 * SENSOR_STANDOFF_M
    return LeafSensorModel(id=sensor_id, center=tuple(center), normal=tuple(unit(n)),
                           plant_id=plant.id, **overrides)


def fiducial_board(distance_m: float, height_m: float, fiducials: Sequence[tuple[float, float]],
                   size_m: float = 0.02, board_size: tuple[float, float] = (0.8, 0.5),
                   along_x: float = 0.0) -> tuple[Panel, ...]:
    """Dark board facing -y at ``y = distance_m`` with bright square fiducials.

    ``fiducials`` are (along-row, vertical) offsets in metres from the board centre.
    """
    normal = (0.0, -1.0, 0.0)
    board = Panel("board", (along_x, distance_m, height_m), normal, board_size[0], board_size[1],
                  0.03, kind="board")
    panels = [board]
    for i, (dx, dz) in enumerate(fiducials):
        panels.append(Panel(f"fiducial{i}", (along_x + dx, distance_m - FIDUCIAL_STANDOFF_M, height_m + dz),
                            normal, size_m, size_m, 0.9, kind="fiducial"))
    return tuple(panels)


def white_wall(distance_m: float, height_m: float, along_x: float = 0.0,
               reflectance: float = 1.0) -> Panel:
    return Panel("white", (along_x, distance_m, height_m), (0.0, -1.0, 0.0), 3.0, 3.0,
                 reflectance, kind="wall")
