"""Differentiable front-to-back Gaussian splatting at desk-scale resolutions.

Projection follows the standard EWA recipe: the 3D covariance
R diag(exp(2 log_s)) R^T is pushed through the world-to-camera rotation and
the perspective Jacobian at the Gaussian center, then floored with 0.3 * I in
pixel units. Compositing sorts splats by depth and accumulates
C = sum_i c_i a_i prod_{j<i}(1 - a_j) + bg * prod_j(1 - a_j) per pixel, with
per-splat contributions clamped at 0.99 and evaluated only inside the
3-sigma ellipse bounding box. Everything is plain tensor math, so gradients
flow to all 14 Gaussian attributes.
"""

from __future__ import annotations

import torch

from .camera import Camera
from .gaussians import GaussianSet

ALPHA_CLAMP = 0.99
COV_FLOOR = 0.3
BBOX_SIGMA = 3.0


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Unit-quaternion (wxyz) to rotation matrix; normalizes defensively."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True).clamp_min(1e-12)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def covariance_3d(log_scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(exp(2 * log_s)) R^T, shape (..., 3, 3)."""
    rot = quaternion_to_matrix(rotations)
    var = torch.exp(2.0 * log_scales)
    return rot @ (var.unsqueeze(-1) * rot.transpose(-1, -2))


def project_gaussians(
    cam: Camera,
    positions: torch.Tensor,
    log_scales: torch.Tensor,
    rotations: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project Gaussians into pixel space.

    Returns (means2d (N,2), cov2d (N,2,2) incl. the 0.3*I floor, depths (N,),
    valid (N,) bool). Gaussians behind the near plane are flagged invalid
    rather than raising; their projected values are computed at a clamped
    depth and should be ignored.
    """
    dtype = positions.dtype
    w2c = torch.as_tensor(cam.world_to_camera(), dtype=dtype)
    cam_pos = torch.as_tensor(cam.position, dtype=dtype)
    fx, fy, cx, cy = cam.intrinsics()

    x_cam = (positions - cam_pos) @ w2c.T  # (N, 3)
    depth = x_cam[:, 2]
    valid = depth > cam.near
    z = depth.clamp_min(cam.near)
    x, y = x_cam[:, 0], x_cam[:, 1]

    means2d = torch.stack([fx * x / z + cx, fy * y / z + cy], dim=1)

    jac = torch.zeros(positions.shape[0], 2, 3, dtype=dtype)
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z**2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z**2

    m = jac @ w2c  # (N, 2, 3): d(pixel)/d(world)
    cov2d = m @ covariance_3d(log_scales, rotations) @ m.transpose(1, 2)
    cov2d = cov2d + COV_FLOOR * torch.eye(2, dtype=dtype)
    return means2d, cov2d, depth, valid


def project_gaussian(
    cam: Camera, position: torch.Tensor, log_scales: torch.Tensor, rotation: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool]:
    """Single-Gaussian convenience wrapper around `project_gaussians`."""
    mean2d, cov2d, depth, valid = project_gaussians(
        cam, position.reshape(1, 3), log_scales.reshape(1, 3), rotation.reshape(1, 4)
    )
    return mean2d[0], cov2d[0], depth[0], bool(valid[0])


def render(
    g: GaussianSet,
    cam: Camera,
    background: torch.Tensor | tuple[float, float, float] = (0.0, 0.0, 0.0),
    row_block: int = 32,
) -> torch.Tensor:
    """Render to an (H, W, 3) image in [0, 1]; differentiable w.r.t. all attributes.

    Rows are processed in blocks to bound the (block, W, N) working set.
    """
    h, w = cam.height, cam.width
    dtype = g.positions.dtype if g.count else torch.float32
    bg = torch.as_tensor(background, dtype=dtype)
    if g.count == 0:
        return bg.expand(h, w, 3).clone()

    means2d, cov2d, depths, valid = project_gaussians(cam, g.positions, g.log_scales, g.rotations)
    order = torch.argsort(depths.detach())
    means2d, cov2d = means2d[order], cov2d[order]
    colors, opacities = g.colors[order], g.opacities[order, 0]
    alive = valid[order]

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = (a * c - b * b).clamp_min(1e-12)
    inv00, inv01, inv11 = c / det, -b / det, a / det
    # half-extents of the 3-sigma ellipse's axis-aligned bounding box
    rx = BBOX_SIGMA * torch.sqrt(a.detach())
    ry = BBOX_SIGMA * torch.sqrt(c.detach())

    xs = torch.arange(w, dtype=dtype) + 0.5
    ys = torch.arange(h, dtype=dtype) + 0.5
    dx = xs[None, :, None] - means2d[:, 0]  # (1, W, N)
    qx = dx * dx * (-0.5 * inv00)
    inside_x = (dx.abs() <= rx) & alive

    rows = []
    for y0 in range(0, h, row_block):
        yb = ys[y0 : y0 + row_block]
        dy = yb[:, None, None] - means2d[:, 1]  # (B, 1, N)
        power = qx + dy * dy * (-0.5 * inv11) - dx * dy * inv01
        alpha = opacities * torch.exp(power)
        alpha = alpha.clamp(max=ALPHA_CLAMP)
        inside = inside_x & (dy.abs() <= ry)
        alpha = alpha * inside.to(dtype)
        one_minus = 1.0 - alpha
        trans = torch.cumprod(one_minus, dim=-1)
        trans_before = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
        weights = alpha * trans_before  # (B, W, N)
        block = weights @ colors + trans[..., -1:] * bg
        rows.append(block)
    return torch.cat(rows, dim=0).clamp(0.0, 1.0)
