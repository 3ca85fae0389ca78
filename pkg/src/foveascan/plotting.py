"""PNG figures for run reports, drawn with the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral import SpectralCube, Spectrum, nearest_band  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": "foveascan"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_spectrum(spec: Spectrum, path: str | Path, report=None, reference_nm: Sequence[float] = (),
                  title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    lam = spec.wavelengths
    vals = np.where(spec.valid_mask, spec.values, np.nan)
    ax.plot(lam, vals, lw=1.0, color="tab:blue", label="reflectance")
    for r in reference_nm:
        ax.axvline(r, color="0.6", ls="--", lw=0.8)
    if report is not None:
        for p in report.peaks:
            colour = "tab:green" if p.snr >= report.snr_threshold else "tab:orange"
            ax.axvline(p.wavelength_nm, color=colour, lw=0.8)
            ax.annotate(f"{p.wavelength_nm:.1f} nm\nSNR {p.snr:.1f}", (p.wavelength_nm, np.nanmax(vals)),
                        fontsize=7, ha="left", va="top")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("reflectance")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_trajectory(log, path: str | Path, scene=None, waypoints=None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 5))
    xs = np.array([s.x for s in log.trajectory])
    ys = np.array([s.y for s in log.trajectory])
    ax.plot(xs, ys, lw=1.0, color="tab:blue", label="robot")
    if waypoints is not None:
        w = np.asarray(waypoints)
        ax.plot(w[:, 0], w[:, 1], "x", color="0.5", ms=5, label="waypoints")
    if scene is not None:
        for p in scene.plants:
            ax.plot([p.center[0] - p.width / 2, p.center[0] + p.width / 2], [p.center[1]] * 2,
                    color="tab:green", lw=3, alpha=0.5)
        for s in scene.sensors:
            ok = log.records.get(s.id)
            colour = "tab:red" if ok is None or not ok.resonance_accepted else "tab:purple"
            ax.plot(s.center[0], s.center[1], "s", color=colour, ms=6)
            ax.annotate(s.id, (s.center[0], s.center[1]), fontsize=7, xytext=(3, 3), textcoords="offset points")
    for a in log.acquisitions:
        idx = min(range(len(log.trajectory)), key=lambda i: abs(log.trajectory[i].t - a.time_s))
        ax.plot(xs[idx], ys[idx], "o", color="tab:orange", ms=5)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=8, loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(metrics, path: str | Path) -> Path:
    names = ["detection_rate", "verification_rate", "gate_rate", "capture_rate", "resonance_rate"]
    vals = [getattr(metrics, n) for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(names)), np.nan_to_num(vals), color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([n.replace("_rate", "") for n in names], fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.set_title(f"{metrics.runs} runs, {metrics.sensors} sensor records", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_cube(cube: SpectralCube, path: str | Path, rgb_nm=(640.0, 550.0, 460.0)) -> Path:
    """False-colour composite of three bands, each stretched to its 1-99 percentile."""
    chans = []
    for lam in rgb_nm:
        band = cube.data[:, :, nearest_band(cube.grid, lam)].astype(np.float64)
        lo, hi = np.percentile(band, [1, 99])
        chans.append(np.clip((band - lo) / (hi - lo if hi > lo else 1.0), 0, 1))
    img = np.stack(chans, axis=-1)
    fig, ax = plt.subplots(figsize=(7, max(2.0, 7 * cube.lines / max(cube.samples, 1))))
    ax.imshow(img, aspect="auto", interpolation="nearest")
    ax.set_xlabel("sample")
    ax.set_ylabel("line")
    fig.tight_layout()
    return _save(fig, path)
