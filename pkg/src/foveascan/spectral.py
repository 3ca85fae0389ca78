"""Wavelength grids, spectra, spectral cubes and ENVI (BIL) persistence."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import numpy.typing as npt

NDArrayF = npt.NDArray[np.floating]

DEFAULT_MIN_NM = 400.0
DEFAULT_MAX_NM = 1000.0
DEFAULT_BANDS = 270
DEFAULT_SAMPLES = 640
REFLECTANCE_HEADROOM = 0.05


class InvalidRangeError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


class EmptyWindowError(ValueError):
    pass


class MalformedHeaderError(ValueError):
    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(message or f"malformed ENVI header: missing or invalid key {key!r}")


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniformly spaced band centers from ``min_nm`` to ``max_nm`` inclusive."""

    min_nm: float
    max_nm: float
    bands: int

    def __post_init__(self):
        if not (np.isfinite(self.min_nm) and np.isfinite(self.max_nm)):
            raise InvalidRangeError("grid bounds must be finite")
        if not self.min_nm < self.max_nm:
            raise InvalidRangeError(f"min_nm ({self.min_nm}) must be < max_nm ({self.max_nm})")
        if int(self.bands) != self.bands or self.bands < 2:
            raise InvalidRangeError(f"bands must be an integer >= 2, got {self.bands}")

    def band_spacing(self) -> float:
        return (self.max_nm - self.min_nm) / (self.bands - 1)

    @cached_property
    def centers(self) -> NDArrayF:
        k = np.arange(self.bands, dtype=np.float64)
        c = self.min_nm + k * (self.max_nm - self.min_nm) / (self.bands - 1)
        c[-1] = self.max_nm  # exact endpoint, so a grid rebuilt from its centers compares equal
        c.setflags(write=False)
        return c

    def __len__(self) -> int:
        return self.bands


def make_grid(min_nm: float = DEFAULT_MIN_NM, max_nm: float = DEFAULT_MAX_NM,
              bands: int = DEFAULT_BANDS) -> WavelengthGrid:
    return WavelengthGrid(float(min_nm), float(max_nm), int(bands))


def default_grid() -> WavelengthGrid:
    return make_grid(DEFAULT_MIN_NM, DEFAULT_MAX_NM, DEFAULT_BANDS)


def nearest_band(grid: WavelengthGrid, wavelength_nm: float) -> int:
    """Index of the band center closest to ``wavelength_nm``; ties go to the lower band."""
    half = grid.band_spacing() / 2
    if not (grid.min_nm - half <= wavelength_nm <= grid.max_nm + half):
        raise OutOfRangeError(
            f"{wavelength_nm} nm outside [{grid.min_nm - half}, {grid.max_nm + half}] nm")
    pos = (wavelength_nm - grid.min_nm) / grid.band_spacing()
    lo = int(np.clip(np.floor(pos), 0, grid.bands - 1))
    hi = min(lo + 1, grid.bands - 1)
    c = grid.centers
    if abs(c[hi] - wavelength_nm) < abs(c[lo] - wavelength_nm):
        return hi
    return lo


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Per-band values on a grid. ``valid`` marks bands usable downstream."""

    grid: WavelengthGrid
    values: NDArrayF
    valid: npt.NDArray[np.bool_] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.bands,):
            raise ValueError(f"spectrum has {v.shape} values, grid has {self.grid.bands} bands")
        object.__setattr__(self, "values", v)
        if self.valid is not None:
            m = np.asarray(self.valid, dtype=bool)
            if m.shape != v.shape:
                raise ValueError("valid mask shape does not match values")
            object.__setattr__(self, "valid", m)

    @property
    def wavelengths(self) -> NDArrayF:
        return self.grid.centers

    @property
    def valid_mask(self) -> npt.NDArray[np.bool_]:
        if self.valid is None:
            return np.ones(self.grid.bands, dtype=bool)
        return self.valid

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Spectrum):
            return NotImplemented
        return (self.grid == other.grid and np.array_equal(self.values, other.values)
                and np.array_equal(self.valid_mask, other.valid_mask))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """Hyperspectral image of shape (lines, samples, bands), stored as float32.

    ``meta`` holds the acquisition record. Recognised keys are
    ``tilt_x``/``tilt_y`` (per-line mirror tilt, degrees), ``exposure_ms``,
    ``illuminant`` and ``halogen_on``; anything else is carried through IO as
    plain header text.
    """

    grid: WavelengthGrid
    data: npt.NDArray[np.float32]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] != self.grid.bands:
            raise ValueError(f"cube data shape {d.shape} incompatible with {self.grid.bands} bands")
        object.__setattr__(self, "data", d)
        meta = {k: np.asarray(v, dtype=np.float64) if isinstance(v, (list, tuple)) else v
                for k, v in dict(self.meta).items()}
        for key in ("tilt_x", "tilt_y"):
            if key in meta:
                t = np.asarray(meta[key], dtype=np.float64)
                if t.shape != (d.shape[0],):
                    raise ValueError(f"meta[{key!r}] must have one entry per line")
                meta[key] = t
        object.__setattr__(self, "meta", meta)

    @property
    def lines(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    def spectrum_at(self, line: int, sample: int) -> Spectrum:
        return Spectrum(self.grid, self.data[line, sample].astype(np.float64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpectralCube):
            return NotImplemented
        if self.grid != other.grid or self.data.shape != other.data.shape:
            return False
        if self.data.tobytes() != other.data.tobytes():
            return False
        if self.meta.keys() != other.meta.keys():
            return False
        for k, v in self.meta.items():
            w = other.meta[k]
            if isinstance(v, np.ndarray) or isinstance(w, np.ndarray):
                if np.asarray(v).tobytes() != np.asarray(w).tobytes():
                    return False
            elif v != w:
                return False
        return True

    __hash__ = None  # type: ignore[assignment]


def roi_mean_spectrum(cube: SpectralCube, window: tuple[int, int, int, int]) -> Spectrum:
    """Unweighted per-band mean over ``window = (line0, line1, sample0, sample1)``, half-open."""
    l0, l1, s0, s1 = (int(x) for x in window)
    if l1 <= l0 or s1 <= s0:
        raise EmptyWindowError(f"empty window {window}")
    if l0 < 0 or s0 < 0 or l1 > cube.lines or s1 > cube.samples:
        raise OutOfRangeError(
            f"window {window} outside cube of {cube.lines} lines x {cube.samples} samples")
    block = cube.data[l0:l1, s0:s1].astype(np.float64)
    return Spectrum(cube.grid, block.mean(axis=(0, 1)))


# --- ENVI persistence -------------------------------------------------------

_ENVI_FLOAT32 = 4
_META_KEYS = {
    "tilt_x": "mirror tilt x",
    "tilt_y": "mirror tilt y",
    "exposure_ms": "exposure ms",
    "illuminant": "illuminant",
    "halogen_on": "halogen on",
}
_HEADER_KEYS = {v: k for k, v in _META_KEYS.items()}


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".bil"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".bil")


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_list(values) -> str:
    return "{" + ", ".join(_fmt(v) for v in values) + "}"


def write_cube(cube: SpectralCube, path: str | Path) -> None:
    """Write ``<path>.hdr`` and ``<path>.bil`` (float32, little-endian, BIL)."""
    hdr_path, bil_path = _paths(path)
    lines = [
        "ENVI",
        "description = {foveascan cube}",
        f"samples = {cube.samples}",
        f"lines = {cube.lines}",
        f"bands = {cube.grid.bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        f"data type = {_ENVI_FLOAT32}",
        "interleave = bil",
        "byte order = 0",
        "wavelength units = Nanometers",
        f"wavelength = {_fmt_list(cube.grid.centers)}",
    ]
    for key, value in cube.meta.items():
        name = _META_KEYS.get(key, key.replace("_", " "))
        if "=" in name or "\n" in name:
            raise ValueError(f"meta key {key!r} cannot be stored in an ENVI header")
        if isinstance(value, np.ndarray):
            lines.append(f"{name} = {_fmt_list(value)}")
        elif isinstance(value, bool):
            lines.append(f"{name} = {'true' if value else 'false'}")
        elif isinstance(value, (int, float, np.floating, np.integer)):
            lines.append(f"{name} = {_fmt(value) if isinstance(value, (float, np.floating)) else int(value)}")
        else:
            text = str(value)
            if "\n" in text or "{" in text or "}" in text:
                raise ValueError(f"meta value for {key!r} is not header-safe")
            lines.append(f"{name} = {text}")
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    hdr_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    # BIL: for each line, band-major rows of samples
    payload = np.ascontiguousarray(cube.data.transpose(0, 2, 1)).astype("<f4", copy=False)
    bil_path.write_bytes(payload.tobytes())


def read_header(path: str | Path) -> dict[str, str]:
    text = _paths(path)[0].read_text(encoding="ascii")
    if not text.startswith("ENVI"):
        raise MalformedHeaderError("ENVI", "header does not start with 'ENVI'")
    entries: dict[str, str] = {}
    # brace values may span several physical lines
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", text, flags=re.M):
        entries[m.group(1).strip().lower()] = m.group(2).strip()
    return entries


def _parse_list(raw: str, key: str) -> np.ndarray:
    if not (raw.startswith("{") and raw.endswith("}")):
        raise MalformedHeaderError(key)
    body = raw[1:-1].strip()
    if not body:
        return np.zeros(0)
    try:
        return np.array([float(x) for x in body.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise MalformedHeaderError(key) from exc


def _parse_int(header: Mapping[str, str], key: str) -> int:
    if key not in header:
        raise MalformedHeaderError(key)
    try:
        return int(header[key])
    except ValueError as exc:
        raise MalformedHeaderError(key) from exc


def _parse_scalar(raw: str) -> Any:
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def read_cube(path: str | Path) -> SpectralCube:
    hdr_path, bil_path = _paths(path)
    header = read_header(hdr_path)
    samples = _parse_int(header, "samples")
    lines = _parse_int(header, "lines")
    bands = _parse_int(header, "bands")
    if _parse_int(header, "data type") != _ENVI_FLOAT32:
        raise MalformedHeaderError("data type", "only data type = 4 (float32) is supported")
    if header.get("interleave", "").lower() != "bil":
        raise MalformedHeaderError("interleave")
    if header.get("byte order", "0") != "0":
        raise MalformedHeaderError("byte order", "only little-endian (byte order = 0) is supported")
    if "wavelength" not in header:
        raise MalformedHeaderError("wavelength")
    wl = _parse_list(header["wavelength"], "wavelength")
    if wl.size != bands:
        raise MalformedHeaderError("wavelength", f"{wl.size} wavelengths for {bands} bands")
    try:
        grid = make_grid(wl[0], wl[-1], bands)
    except InvalidRangeError as exc:
        raise MalformedHeaderError("wavelength") from exc
    if not np.allclose(grid.centers, wl, rtol=0, atol=1e-9):
        raise MalformedHeaderError("wavelength", "wavelengths are not uniformly spaced")
    offset = int(header.get("header offset", "0"))
    raw = np.fromfile(bil_path, dtype="<f4", offset=offset)
    if raw.size != lines * bands * samples:
        raise OSError(f"{bil_path}: expected {lines * bands * samples} values, found {raw.size}")
    data = raw.reshape(lines, bands, samples).transpose(0, 2, 1).astype(np.float32)

    skip = {"samples", "lines", "bands", "header offset", "file type", "data type", "interleave",
            "byte order", "wavelength units", "wavelength", "description"}
    meta: dict[str, Any] = {}
    for name, raw_value in header.items():
        if name in skip:
            continue
        key = _HEADER_KEYS.get(name, name.replace(" ", "_"))
        if raw_value.startswith("{"):
            meta[key] = _parse_list(raw_value, name)
        else:
            meta[key] = _parse_scalar(raw_value)
    return SpectralCube(grid, data, meta)
