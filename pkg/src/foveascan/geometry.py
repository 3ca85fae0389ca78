"""Robot pose, rig mounting and the RGB pinhole camera.

World frame: x along the crop rows, y lateral, z up, ground at z = 0.
Both imagers look out of the robot's left side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalise a zero vector")
    return v / n


def angle_between_deg(a, b) -> np.ndarray:
    """Angle between vectors; atan2 form keeps precision near 0 and 180 degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def rotate_about(v, axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    k = unit(axis)
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return v * c + np.cross(k, v) * s + np.outer(v @ k, k).reshape(v.shape) * (1 - c)


@dataclass(frozen=True)
class RobotPose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0  # radians, 0 = +x
    speed: float = 0.0
    waypoint_index: int = 1  # index of the waypoint being driven to

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading, self.speed)):
            raise ValueError("robot pose must be finite")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading), 0.0])

    @property
    def left(self) -> np.ndarray:
        return np.array([-math.sin(self.heading), math.cos(self.heading), 0.0])


UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Placement:
    """Rigid placement: ``rotation`` maps local vectors into the world frame."""

    origin: np.ndarray
    rotation: np.ndarray

    def to_world(self, v_local: np.ndarray) -> np.ndarray:
        return np.asarray(v_local) @ self.rotation.T


@dataclass(frozen=True)
class Rig:
    """Sensor head mounting on the robot."""

    mirror_height_m: float = 0.5
    rgb_offset_up_m: float = 0.06  # RGB optical centre above the mirror centre

    def hyperspectral_placement(self, pose: RobotPose) -> Placement:
        # module frame: +x out of the fold (robot left), +y toward the robot's rear,
        # +z along the lens boresight (up into the mirror)
        origin = np.array([pose.x, pose.y, self.mirror_height_m])
        rot = np.column_stack([pose.left, -pose.forward, UP])
        return Placement(origin, rot)

    def rgb_origin(self, pose: RobotPose) -> np.ndarray:
        return np.array([pose.x, pose.y, self.mirror_height_m + self.rgb_offset_up_m])


@dataclass(frozen=True)
class RgbCamera:
    """Pinhole RGB camera looking out of the robot's left side."""

    focal_px: float = 2000.0
    width: int = 1280
    height: int = 1024

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def axes(self, pose: RobotPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) in world coordinates."""
        fwd = pose.left
        return fwd, np.cross(fwd, UP), UP

    def project(self, points, pose: RobotPose, rig: Rig) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and depth (m along the optical axis) of world points."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - rig.rgb_origin(pose)
        fwd, right, up = self.axes(pose)
        z = p @ fwd
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.focal_px * (p @ right) / z
            v = self.cy - self.focal_px * (p @ up) / z
        return np.column_stack([u, v]), z

    def ray(self, pixel, pose: RobotPose) -> np.ndarray:
        """Unit world direction through pixel ``(u, v)``."""
        u, v = pixel
        fwd, right, up = self.axes(pose)
        d = fwd * self.focal_px + right * (u - self.cx) - up * (v - self.cy)
        return unit(d)

    def in_frame(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)
