"""Gaussian splat sets, per-frame variation fields and their additive application.

A set stores 14 scalars per Gaussian: position (3), log-scale (3), unit
quaternion (4), color (3) and opacity (1). Scales live in log space so a raw
additive delta always yields positive scales; quaternion deltas are applied
add-then-normalize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import interp
from .containers import read_container, write_container

FIELD_ORDER = ("positions", "log_scales", "rotations", "colors", "opacities")
FIELD_WIDTHS = (3, 3, 4, 3, 1)

_QUAT_EPS = 1e-8


@dataclass
class GaussianSet:
    positions: torch.Tensor  # (N, 3)
    log_scales: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4) unit quaternions, wxyz
    colors: torch.Tensor  # (N, 3) in [0, 1]
    opacities: torch.Tensor  # (N, 1) in [0, 1]

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.count
        for name, width in zip(FIELD_ORDER, FIELD_WIDTHS):
            t = getattr(self, name)
            if t.shape != (n, width):
                raise ValueError(f"{name} must have shape ({n}, {width}), got {tuple(t.shape)}")
        norms = torch.linalg.norm(self.rotations, dim=1)
        if n and not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ValueError("rotations must be unit quaternions")
        for name in ("colors", "opacities"):
            t = getattr(self, name)
            if n and (t.min() < 0.0 or t.max() > 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")

    def attributes_matrix(self) -> torch.Tensor:
        """All 14 attributes concatenated, shape (N, 14)."""
        return torch.cat([getattr(self, name) for name in FIELD_ORDER], dim=1)

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(*(getattr(self, name).to(dtype) for name in FIELD_ORDER))

    def detach_clone(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, name).detach().clone() for name in FIELD_ORDER))


@dataclass
class VariationField:
    """Raw additive deltas over all Gaussian attributes, one row per frame."""

    d_positions: torch.Tensor  # (T, N, 3)
    d_log_scales: torch.Tensor  # (T, N, 3)
    d_rotations: torch.Tensor  # (T, N, 4)
    d_colors: torch.Tensor  # (T, N, 3)
    d_opacities: torch.Tensor  # (T, N, 1)

    @property
    def num_frames(self) -> int:
        return self.d_positions.shape[0]

    @property
    def count(self) -> int:
        return self.d_positions.shape[1]

    @classmethod
    def zeros(cls, num_frames: int, count: int, dtype: torch.dtype = torch.float32) -> "VariationField":
        return cls.from_matrix(torch.zeros(num_frames, count, 14, dtype=dtype))

    @classmethod
    def from_matrix(cls, deltas: torch.Tensor) -> "VariationField":
        """Split a (T, N, 14) delta matrix into the five attribute groups."""
        if deltas.shape[-1] != 14:
            raise ValueError(f"expected trailing dim 14, got {deltas.shape[-1]}")
        chunks = torch.split(deltas, list(FIELD_WIDTHS), dim=-1)
        return cls(*chunks)

    def as_matrix(self) -> torch.Tensor:
        return torch.cat(
            [self.d_positions, self.d_log_scales, self.d_rotations, self.d_colors, self.d_opacities],
            dim=-1,
        )


def apply_variation(g: GaussianSet, v: VariationField, t: int) -> GaussianSet:
    """Additive application of frame t's deltas; differentiable.

    Colors/opacities are hard-clamped to [0, 1]; the summed quaternion is
    re-normalized, falling back to the canonical rotation when its norm
    degenerates below 1e-8.
    """
    if not 0 <= t < v.num_frames:
        raise IndexError(f"frame {t} out of range [0, {v.num_frames})")
    q_sum = g.rotations + v.d_rotations[t]
    norm = torch.linalg.norm(q_sum, dim=1, keepdim=True)
    q_new = torch.where(norm < _QUAT_EPS, g.rotations, q_sum / norm.clamp_min(_QUAT_EPS))
    return GaussianSet(
        positions=g.positions + v.d_positions[t],
        log_scales=g.log_scales + v.d_log_scales[t],
        rotations=q_new,
        colors=(g.colors + v.d_colors[t]).clamp(0.0, 1.0),
        opacities=(g.opacities + v.d_opacities[t]).clamp(0.0, 1.0),
    )


def fit_canonical_gaussians(
    tracks_points0: np.ndarray,
    colors: np.ndarray,
    count: int,
    seed: int = 0,
) -> GaussianSet:
    """Surface-fitting constructor for the canonical set.

    Positions are a farthest-point-sampled subset of the canonical point
    cloud; scales are isotropic at half the mean distance to the 4 nearest
    selected neighbours; rotations identity, opacity 0.8.
    """
    p1 = np.asarray(tracks_points0, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = p1.shape[0]
    if count > n:
        raise ValueError(f"requested {count} Gaussians from {n} samples")
    rng = np.random.Generator(np.random.Philox(seed))
    start = int(rng.integers(n))
    idx = interp.farthest_point_sampling(p1, count, start=start)
    positions = p1[idx]
    if count > 1:
        k = min(4, count - 1)
        nn_res = interp.knn(positions, positions, k + 1)  # first neighbour is self
        mean_dist = nn_res.distances[:, 1:].mean(axis=1)
        scales = np.maximum(0.5 * mean_dist, 1e-4)
    else:
        scales = np.full(1, 0.1)
    log_scales = np.log(np.repeat(scales[:, None], 3, axis=1))
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        positions=torch.as_tensor(positions, dtype=torch.float32),
        log_scales=torch.as_tensor(log_scales, dtype=torch.float32),
        rotations=torch.as_tensor(rotations, dtype=torch.float32),
        colors=torch.as_tensor(np.clip(colors[idx], 0.0, 1.0), dtype=torch.float32),
        opacities=torch.full((count, 1), 0.8, dtype=torch.float32),
    )


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of wxyz quaternions, broadcasting over leading dims."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def rotate_about_z(g: GaussianSet, angle: float) -> GaussianSet:
    """Rigid yaw rotation of the whole set about the world z axis."""
    c, s = math.cos(angle), math.sin(angle)
    rot = torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=g.positions.dtype)
    q_rot = torch.tensor(
        [math.cos(angle / 2.0), 0.0, 0.0, math.sin(angle / 2.0)], dtype=g.rotations.dtype
    )
    q_new = quaternion_multiply(q_rot.expand_as(g.rotations), g.rotations)
    q_new = q_new / torch.linalg.norm(q_new, dim=-1, keepdim=True)
    return GaussianSet(
        positions=g.positions @ rot.T,
        log_scales=g.log_scales.clone(),
        rotations=q_new,
        colors=g.colors.clone(),
        opacities=g.opacities.clone(),
    )


# ---------------------------------------------------------------------------
# serialization (JSON header + float32 blobs)
# ---------------------------------------------------------------------------


def save_gaussians(g: GaussianSet, path) -> None:
    arrays = {name: getattr(g, name).detach().cpu().numpy().astype(np.float32) for name in FIELD_ORDER}
    write_container(path, {"kind": "gaussian_set", "count": g.count, "field_order": list(FIELD_ORDER)}, arrays)


def load_gaussians(path) -> GaussianSet:
    meta, arrays = read_container(path)
    if meta.get("kind") != "gaussian_set":
        raise ValueError(f"not a gaussian set container: {path}")
    return GaussianSet(*(torch.as_tensor(arrays[name]) for name in FIELD_ORDER))


def save_variation_field(v: VariationField, path) -> None:
    arrays = {
        f"d_{name}": getattr(v, f"d_{name}").detach().cpu().numpy().astype(np.float32)
        for name in FIELD_ORDER
    }
    meta = {
        "kind": "variation_field",
        "count": v.count,
        "num_frames": v.num_frames,
        "field_order": [f"d_{name}" for name in FIELD_ORDER],
    }
    write_container(path, meta, arrays)


def load_variation_field(path) -> VariationField:
    meta, arrays = read_container(path)
    if meta.get("kind") != "variation_field":
        raise ValueError(f"not a variation field container: {path}")
    return VariationField(*(torch.as_tensor(arrays[f"d_{name}"]) for name in FIELD_ORDER))
