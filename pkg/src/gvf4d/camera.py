"""Pinhole cameras with a look-at parameterization.

Camera space: +x right, +y down (pixel rows grow downward), +z forward, so
depth is the camera-space z coordinate. Pixel (i, j) has center
(j + 0.5, i + 0.5); a point on the optical axis projects to (W/2, H/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    position: np.ndarray  # (3,)
    look_at: np.ndarray  # (3,)
    up: np.ndarray  # (3,)
    vertical_fov: float  # radians
    resolution: tuple[int, int]  # (H, W)
    near: float = 0.05

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        h, w = self.resolution
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if h < 8 or w < 8:
            raise ValueError("resolution must be at least 8x8")

    @property
    def height(self) -> int:
        return int(self.resolution[0])

    @property
    def width(self) -> int:
        return int(self.resolution[1])

    def world_to_camera(self) -> np.ndarray:
        """Rows are the camera right / down / forward axes in world coordinates."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        nrm = np.linalg.norm(right)
        if nrm < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right = right / nrm
        true_up = np.cross(right, forward)
        return np.stack([right, -true_up, forward])

    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy) in pixels; square pixels, fov measured vertically."""
        focal = (self.height / 2.0) / math.tan(self.vertical_fov / 2.0)
        return focal, focal, self.width / 2.0, self.height / 2.0


def orbit_camera(
    azimuth: float,
    elevation: float = math.radians(20.0),
    radius: float = 2.0,
    vertical_fov: float = math.radians(40.0),
    resolution: tuple[int, int] = (64, 64),
    target: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> Camera:
    """Camera on a z-up orbit ring looking at `target`."""
    target = np.asarray(target, dtype=np.float64)
    position = target + radius * np.array(
        [
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ]
    )
    return Camera(
        position=position,
        look_at=target,
        up=np.array([0.0, 0.0, 1.0]),
        vertical_fov=vertical_fov,
        resolution=resolution,
    )


def camera_ring(
    num_azimuths: int,
    elevation: float = math.radians(20.0),
    radius: float = 2.0,
    vertical_fov: float = math.radians(40.0),
    resolution: tuple[int, int] = (64, 64),
) -> list[Camera]:
    """Uniform ring of orbit cameras starting at azimuth 0."""
    return [
        orbit_camera(2.0 * math.pi * i / num_azimuths, elevation, radius, vertical_fov, resolution)
        for i in range(num_azimuths)
    ]
