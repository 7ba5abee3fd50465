"""Frame-quality metrics over (H, W, 3) images in [0, 1].

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03),
population covariances, and averages the valid (un-padded) map over channels.
Both metrics are plain torch, so the SSIM term can sit inside a training loss.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; 99.0 when equal."""
    _check_pair(a, b)
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, size, size)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean structural similarity; differentiable, returns a 0-dim tensor."""
    _check_pair(a, b)
    h, w = a.shape[0], a.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image too small for SSIM: need at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    dtype = a.dtype if a.is_floating_point() else torch.float32
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA, dtype)
    x = a.to(dtype).permute(2, 0, 1).unsqueeze(1)  # (3, 1, H, W)
    y = b.to(dtype).permute(2, 0, 1).unsqueeze(1)

    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    sigma_x = F.conv2d(x * x, kernel) - mu_x * mu_x
    sigma_y = F.conv2d(y * y, kernel) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, kernel) - mu_x * mu_y

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean()
