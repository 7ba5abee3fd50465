"""Shared transformer primitives: attention, FFN, norms, adaLN modulation and
Fourier positional embeddings.

Initialization policy: truncated normal (std 0.02) for projections, zeros for
gates and output heads, so adaLN blocks and decoder/denoiser heads start as
exact identities.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02, bound: float = 2.0) -> torch.Tensor:
    """Truncated normal init on [-bound*std, bound*std] via inverse-CDF sampling."""
    with torch.no_grad():
        lo = math.erf(-bound / math.sqrt(2.0))
        hi = math.erf(bound / math.sqrt(2.0))
        tensor.uniform_((lo + 1.0) / 2.0, (hi + 1.0) / 2.0)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
    return tensor


def init_linear(layer: nn.Linear, std: float = 0.02, zero: bool = False) -> nn.Linear:
    if zero:
        nn.init.zeros_(layer.weight)
    else:
        trunc_normal_(layer.weight, std=std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def rms_norm(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """x / RMS(x) along the last dim; no centering, no learned affine."""
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value inputs.

    Self-attention is the q_in == kv_in case. With qk_norm enabled, queries
    and keys are RMS-normalized per head before the dot product.
    """

    def __init__(self, dim: int, heads: int, qk_norm: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qk_norm = qk_norm
        self.q_proj = init_linear(nn.Linear(dim, dim))
        self.k_proj = init_linear(nn.Linear(dim, dim))
        self.v_proj = init_linear(nn.Linear(dim, dim))
        self.out_proj = init_linear(nn.Linear(dim, dim))

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor | None = None) -> torch.Tensor:
        if kv_in is None:
            kv_in = q_in
        b, a, _ = q_in.shape
        n = kv_in.shape[1]
        q = self.q_proj(q_in).view(b, a, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv_in).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv_in).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        if self.qk_norm:
            q, k = rms_norm(q), rms_norm(k)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, a, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    """Two affine maps with GELU between; hidden width 4x."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(dim, 4 * dim))
        self.fc2 = init_linear(nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, qk_norm: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, qk_norm=qk_norm)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class AdaLNModulation(nn.Module):
    """Affine head mapping a conditioning embedding to per-sublayer (gamma, beta, gate).

    Zero-initialized, so every modulated sublayer starts as an exact identity:
    out = x + gate * Sublayer(LN(x) * (1 + gamma) + beta).
    """

    def __init__(self, cond_dim: int, dim: int, num_sublayers: int):
        super().__init__()
        self.num_sublayers = num_sublayers
        self.dim = dim
        self.proj = init_linear(nn.Linear(cond_dim, 3 * num_sublayers * dim), zero=True)

    def forward(self, cond: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        parts = self.proj(cond).chunk(3 * self.num_sublayers, dim=-1)
        return [tuple(parts[3 * i : 3 * i + 3]) for i in range(self.num_sublayers)]


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + gamma) + beta


class FourierPositionEmbed(nn.Module):
    """[sin(2^f pi x), cos(2^f pi x)] features over 3 coords, then one affine map."""

    def __init__(self, out_width: int, num_freqs: int = 6, input_dim: int = 3):
        super().__init__()
        self.num_freqs = num_freqs
        self.input_dim = input_dim
        freqs = (2.0 ** torch.arange(num_freqs, dtype=torch.float32)) * math.pi
        self.register_buffer("freqs", freqs, persistent=False)
        self.proj = init_linear(nn.Linear(2 * num_freqs * input_dim, out_width))

    @property
    def feature_width(self) -> int:
        return 2 * self.num_freqs * self.input_dim

    def features(self, positions: torch.Tensor) -> torch.Tensor:
        """Pre-projection sin/cos features, shape (..., 2 * num_freqs * input_dim)."""
        angles = positions.unsqueeze(-1) * self.freqs.to(positions.dtype)
        angles = angles.flatten(-2)
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(positions))


def sinusoidal_embedding(steps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal timestep embedding, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    ).to(steps.device)
    args = steps.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbed(nn.Module):
    """Sinusoidal embedding followed by a 2-layer SiLU MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = init_linear(nn.Linear(dim, dim))
        self.fc2 = init_linear(nn.Linear(dim, dim))

    def forward(self, steps: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(sinusoidal_embedding(steps, self.dim))))
