"""Simulation and processing pipeline for foveated hyperspectral imaging of leaf-mounted sensors."""
from __future__ import annotations

from .calibration import Homography, estimate_homography, pixel_to_tilt, plan_sweep
from .mission import MissionConfig, MissionLog, aggregate_metrics, run_mission
from .optics import MirrorState, PushbroomCamera, ScanPlan, acquire_patch, render_scene
from .perception import capture_gate, detect_resonance, reflectance_correct, verify_track
from .scenario import load_scenario
from .scene import Scene
from .spectral import SpectralCube, Spectrum, WavelengthGrid, read_cube, write_cube

__version__ = "0.1.0"

__all__ = [
    "Homography", "estimate_homography", "pixel_to_tilt", "plan_sweep",
    "MissionConfig", "MissionLog", "aggregate_metrics", "run_mission",
    "MirrorState", "PushbroomCamera", "ScanPlan", "acquire_patch", "render_scene",
    "capture_gate", "detect_resonance", "reflectance_correct", "verify_track",
    "load_scenario", "Scene", "SpectralCube", "Spectrum", "WavelengthGrid", "read_cube", "write_cube",
]
