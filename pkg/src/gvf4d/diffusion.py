"""Latent diffusion over variation-field latents: variance-preserving cosine
schedule, v-prediction objective, a temporal-aware diffusion transformer with
video/Gaussian conditioning and anchor positional priors, and a deterministic
DDIM sampler.

Blocks apply, in order: spatial self-attention (within each frame), temporal
self-attention (across frames at fixed token index), cross-attention to the
frame's video tokens concatenated with shared Gaussian tokens, and an FFN.
Every sublayer is adaLN-gated on the timestep embedding with zero-initialized
gates, and queries/keys are RMS-normalized.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .containers import read_container, write_container
from .gaussians import GaussianSet
from .layers import (
    AdaLNModulation,
    FeedForward,
    FourierPositionEmbed,
    MultiheadAttention,
    TimestepEmbed,
    init_linear,
    modulate,
)
from .optim import AdamW

ALPHA_BAR_FLOOR = 1e-5
VIDEO_FEAT_DIM = 5  # mean RGB + normalized patch center (u, v)


# ---------------------------------------------------------------------------
# noise schedule and v-prediction algebra
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    alphas: torch.Tensor  # (S + 1,) float64
    sigmas: torch.Tensor  # (S + 1,) float64
    steps: int


def cosine_schedule(steps: int = 1000) -> NoiseSchedule:
    """Variance-preserving cosine schedule: alpha_s^2 + sigma_s^2 = 1, alpha_0 = 1."""
    u = torch.arange(steps + 1, dtype=torch.float64) / steps
    f = torch.cos((u + 0.008) / 1.008 * torch.pi / 2.0) ** 2
    alpha_bar = (f / f[0]).clamp_min(ALPHA_BAR_FLOOR)
    return NoiseSchedule(alphas=alpha_bar.sqrt(), sigmas=(1.0 - alpha_bar).sqrt(), steps=steps)


def _coef(values: torch.Tensor, s, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule coefficients for scalar or per-batch timesteps."""
    s = torch.as_tensor(s)
    c = values.to(like.dtype)[s]
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, s, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_s = alpha_s z0 + sigma_s eps."""
    return _coef(sched.alphas, s, z0) * z0 + _coef(sched.sigmas, s, z0) * eps


def v_target(z0: torch.Tensor, eps: torch.Tensor, s, sched: NoiseSchedule) -> torch.Tensor:
    """v_s = alpha_s eps - sigma_s z0."""
    return _coef(sched.alphas, s, z0) * eps - _coef(sched.sigmas, s, z0) * z0


def z0_from_v(z_s: torch.Tensor, v_hat: torch.Tensor, s, sched: NoiseSchedule) -> torch.Tensor:
    """Algebraic inversion: z0 = alpha_s z_s - sigma_s v."""
    return _coef(sched.alphas, s, z_s) * z_s - _coef(sched.sigmas, s, z_s) * v_hat


def eps_from_v(z_s: torch.Tensor, v_hat: torch.Tensor, s, sched: NoiseSchedule) -> torch.Tensor:
    """eps = sigma_s z_s + alpha_s v."""
    return _coef(sched.sigmas, s, z_s) * z_s + _coef(sched.alphas, s, z_s) * v_hat


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


@dataclass
class ConditionBundle:
    """Raw condition tokens; the transformer owns their learned projections."""

    video_tokens: torch.Tensor  # (T, P, F_v) per-frame patch features
    gs_tokens: torch.Tensor  # (L_c, 14) FPS-selected Gaussian attributes
    anchor_positions: torch.Tensor  # (L, 3) latent anchor positions

    def validate(self, num_frames: int, latent_size: int) -> None:
        if self.video_tokens.shape[0] != num_frames:
            raise ValueError(
                f"condition has {self.video_tokens.shape[0]} frames, latent has {num_frames}"
            )
        if self.anchor_positions.shape[0] != latent_size:
            raise ValueError("anchor count must match latent token count")


def extract_video_patches(frames: torch.Tensor, patch_size: int = 8) -> torch.Tensor:
    """Default feature extractor: per-patch mean RGB plus the patch center.

    frames: (T, H, W, 3) -> (T, P, 5). A learned extractor may be plugged in
    by callers as long as it keeps the (T, P, F) layout.
    """
    t, h, w, _ = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"resolution {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    pooled = frames.reshape(t, gh, patch_size, gw, patch_size, 3).mean(dim=(2, 4))
    ys = (torch.arange(gh, dtype=frames.dtype) + 0.5) / gh
    xs = (torch.arange(gw, dtype=frames.dtype) + 0.5) / gw
    centers = torch.stack(
        [xs.expand(gh, gw), ys.unsqueeze(1).expand(gh, gw)], dim=-1
    ).expand(t, gh, gw, 2)
    return torch.cat([pooled, centers], dim=-1).reshape(t, gh * gw, VIDEO_FEAT_DIM)


def build_conditions(
    video_frames: torch.Tensor,
    g: GaussianSet,
    anchor_indices: np.ndarray,
    patch_size: int = 8,
    extractor=None,
) -> ConditionBundle:
    """Condition bundle from video frames + canonical Gaussians.

    anchor_indices must be the same FPS index set the VAE latents use, so the
    positional priors refer to the latent tokens' own canonical positions.
    """
    extract = extractor or (lambda fr: extract_video_patches(fr, patch_size))
    attrs = g.attributes_matrix().detach()
    return ConditionBundle(
        video_tokens=extract(video_frames),
        gs_tokens=attrs[anchor_indices],
        anchor_positions=g.positions.detach()[anchor_indices],
    )


# ---------------------------------------------------------------------------
# diffusion transformer
# ---------------------------------------------------------------------------


@dataclass
class DiTConfig:
    depth: int = 2
    width: int = 128
    heads: int = 4
    use_qk_norm: bool = True
    timesteps: int = 1000
    train_frames: int = 8
    latent_size: int = 64
    latent_channels: int = 16
    video_feat_dim: int = VIDEO_FEAT_DIM
    gs_feat_dim: int = 14
    num_freqs: int = 6
    patch_size: int = 8


class DiTBlock(nn.Module):
    """Spatial attn -> temporal attn -> cross attn -> FFN, all adaLN-gated."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.width
        self.norms = nn.ModuleList(nn.LayerNorm(d, elementwise_affine=False) for _ in range(4))
        self.spatial = MultiheadAttention(d, cfg.heads, qk_norm=cfg.use_qk_norm)
        self.temporal = MultiheadAttention(d, cfg.heads, qk_norm=cfg.use_qk_norm)
        self.cross = MultiheadAttention(d, cfg.heads, qk_norm=cfg.use_qk_norm)
        self.ffn = FeedForward(d)
        self.modulation = AdaLNModulation(d, d, num_sublayers=4)

    def forward(
        self,
        x: torch.Tensor,  # (B, T, L, D)
        cond_emb: torch.Tensor,  # (B, D)
        context: torch.Tensor,  # (B, T, Kc, D) per-frame cross-attention context
        temporal_off: bool = False,
    ) -> torch.Tensor:
        b, t, l, d = x.shape
        mods = self.modulation(cond_emb)
        expand = lambda m: m.reshape(b, 1, 1, d)  # noqa: E731

        gamma, beta, gate = (expand(m) for m in mods[0])
        h = modulate(self.norms[0](x), gamma, beta).reshape(b * t, l, d)
        x = x + gate * self.spatial(h).reshape(b, t, l, d)

        gamma, beta, gate = (expand(m) for m in mods[1])
        if temporal_off:
            gate = torch.zeros_like(gate)
        h = modulate(self.norms[1](x), gamma, beta).permute(0, 2, 1, 3).reshape(b * l, t, d)
        h = self.temporal(h).reshape(b, l, t, d).permute(0, 2, 1, 3)
        x = x + gate * h

        gamma, beta, gate = (expand(m) for m in mods[2])
        h = modulate(self.norms[2](x), gamma, beta).reshape(b * t, l, d)
        kv = context.reshape(b * t, context.shape[2], d)
        x = x + gate * self.cross(h, kv).reshape(b, t, l, d)

        gamma, beta, gate = (expand(m) for m in mods[3])
        x = x + gate * self.ffn(modulate(self.norms[3](x), gamma, beta))
        return x


class GaussianVariationDiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.latent_in = init_linear(nn.Linear(cfg.latent_channels, d))
        self.pos_embed = FourierPositionEmbed(d, cfg.num_freqs)
        self.time_embed = TimestepEmbed(d)
        self.video_proj = init_linear(nn.Linear(cfg.video_feat_dim, d))
        self.gs_proj = init_linear(nn.Linear(cfg.gs_feat_dim, d))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.out_head = init_linear(nn.Linear(d, cfg.latent_channels), zero=True)

    def forward(
        self,
        z_s: torch.Tensor,  # (T, L, C) or (B, T, L, C)
        s,  # int or (B,) timesteps
        cond: ConditionBundle | list[ConditionBundle],
        temporal_off: bool = False,
    ) -> torch.Tensor:
        squeeze = z_s.ndim == 3
        if squeeze:
            z_s = z_s.unsqueeze(0)
            cond = [cond] if isinstance(cond, ConditionBundle) else cond
        bundles = [cond] * z_s.shape[0] if isinstance(cond, ConditionBundle) else list(cond)
        b, t, l, _ = z_s.shape
        dtype = self.latent_in.weight.dtype

        video = torch.stack([c.video_tokens.to(dtype) for c in bundles])  # (B, T, P, F)
        gs = torch.stack([c.gs_tokens.to(dtype) for c in bundles])  # (B, Lc, 14)
        anchors = torch.stack([c.anchor_positions.to(dtype) for c in bundles])  # (B, L, 3)

        x = self.latent_in(z_s.to(dtype)) + self.pos_embed(anchors).unsqueeze(1)
        s_tensor = torch.as_tensor(s, dtype=torch.float32).reshape(-1)
        if s_tensor.numel() == 1:
            s_tensor = s_tensor.expand(b)
        cond_emb = self.time_embed(s_tensor).to(dtype)

        ctx_gs = self.gs_proj(gs).unsqueeze(1).expand(b, t, -1, -1)
        context = torch.cat([self.video_proj(video), ctx_gs], dim=2)

        for block in self.blocks:
            x = block(x, cond_emb, context, temporal_off=temporal_off)
        out = self.out_head(self.final_norm(x))
        return out.squeeze(0) if squeeze else out


def dit_forward(
    model: GaussianVariationDiT, z_s: torch.Tensor, s, cond: ConditionBundle, **kw
) -> torch.Tensor:
    return model(z_s, s, cond, **kw)


# ---------------------------------------------------------------------------
# training objective and sampler
# ---------------------------------------------------------------------------


def training_loss(
    model: GaussianVariationDiT,
    z0: torch.Tensor,  # (T, L, C) or (B, T, L, C)
    cond,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """Velocity-matching MSE at a uniformly sampled step s in [1, S]."""
    batched = z0.ndim == 4
    b = z0.shape[0] if batched else 1
    s = torch.randint(1, sched.steps + 1, (b,), generator=gen)
    if not batched:
        s = int(s[0])
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_s = forward_diffuse(z0, s, eps, sched)
    v = v_target(z0, eps, s, sched)
    v_hat = model(z_s, s, cond)
    return (v_hat - v).pow(2).mean()


def ddim_timestep_grid(steps: int, num_steps: int) -> list[int]:
    """Uniformly strided decreasing grid from S to 0 (num_steps intervals)."""
    if num_steps > steps:
        raise ValueError("num_steps cannot exceed the schedule length")
    grid = np.unique(np.round(np.linspace(steps, 0, num_steps + 1)).astype(int))[::-1]
    return [int(v) for v in grid]


def ddim_sample(
    predict_fn,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    num_steps: int = 50,
    seed: int | torch.Generator = 0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Deterministic DDIM: start from seeded N(0, I), iterate v-prediction steps.

    predict_fn(z_s, s) -> v_hat. At each step we form the z0/eps estimates and
    jump to the next grid point; the final z0 estimate is returned.
    """
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=dtype)
    grid = ddim_timestep_grid(sched.steps, num_steps)
    z0_hat = z
    for s, s_next in zip(grid[:-1], grid[1:]):
        v_hat = predict_fn(z, s)
        z0_hat = z0_from_v(z, v_hat, s, sched)
        eps_hat = eps_from_v(z, v_hat, s, sched)
        z = _coef(sched.alphas, s_next, z) * z0_hat + _coef(sched.sigmas, s_next, z) * eps_hat
    return z0_hat


# ---------------------------------------------------------------------------
# latent cache and training loop
# ---------------------------------------------------------------------------


@dataclass
class LatentEntry:
    """Frozen-VAE posterior mean plus raw conditions for one animation."""

    name: str
    latent_mean: torch.Tensor  # (T, L, C)
    anchor_indices: np.ndarray
    cond: ConditionBundle


def save_latent_entry(entry: LatentEntry, path) -> None:
    t, l, c = entry.latent_mean.shape
    meta = {
        "kind": "latent_entry",
        "name": entry.name,
        "T": t,
        "L": l,
        "C": c,
        "anchor_indices": [int(i) for i in entry.anchor_indices],
    }
    arrays = {
        "latent_mean": entry.latent_mean.detach().numpy().astype(np.float32),
        "anchor_positions": entry.cond.anchor_positions.numpy().astype(np.float32),
        "video_tokens": entry.cond.video_tokens.numpy().astype(np.float32),
        "gs_tokens": entry.cond.gs_tokens.numpy().astype(np.float32),
    }
    write_container(path, meta, arrays)


def load_latent_entry(path) -> LatentEntry:
    meta, arrays = read_container(path)
    if meta.get("kind") != "latent_entry":
        raise ValueError(f"not a latent cache entry: {path}")
    cond = ConditionBundle(
        video_tokens=torch.from_numpy(arrays["video_tokens"]),
        gs_tokens=torch.from_numpy(arrays["gs_tokens"]),
        anchor_positions=torch.from_numpy(arrays["anchor_positions"]),
    )
    return LatentEntry(
        name=meta["name"],
        latent_mean=torch.from_numpy(arrays["latent_mean"]),
        anchor_indices=np.asarray(meta["anchor_indices"], dtype=np.int64),
        cond=cond,
    )


def latent_stats(entries: list[LatentEntry]) -> tuple[torch.Tensor, torch.Tensor]:
    """Global per-channel mean/std over all cached latents (std floored at 1e-6)."""
    stacked = torch.cat([e.latent_mean.reshape(-1, e.latent_mean.shape[-1]) for e in entries])
    return stacked.mean(dim=0), stacked.std(dim=0).clamp_min(1e-6)


@dataclass
class DiffusionTrainConfig:
    steps: int = 20000
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 2
    seed: int = 0
    log_every: int = 100
    stop_loss: float | None = None  # early stop on trailing-mean loss
    stop_window: int = 50
    metrics_path: str | None = None


def train_diffusion(
    entries: list[LatentEntry],
    cfg: DiTConfig,
    train_cfg: DiffusionTrainConfig | None = None,
    max_steps: int | None = None,
    init_state: dict | None = None,
) -> tuple[GaussianVariationDiT, tuple[torch.Tensor, torch.Tensor], list[dict]]:
    """Train on standardized cached latents; returns (model, (mean, std), history)."""
    tc = train_cfg or DiffusionTrainConfig()
    if not entries:
        raise ValueError("no latent entries to train on")
    mean, std = latent_stats(entries)
    latents = [((e.latent_mean - mean) / std) for e in entries]

    torch.manual_seed(tc.seed)
    model = GaussianVariationDiT(cfg)
    if init_state is not None:
        model.load_state_dict(init_state)
    sched = cosine_schedule(cfg.timesteps)
    opt = AdamW(model, lr=tc.lr, betas=tc.betas, weight_decay=tc.weight_decay)
    gen = torch.Generator().manual_seed(tc.seed + 1)

    metrics_file = None
    if tc.metrics_path:
        Path(tc.metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(tc.metrics_path, "w")

    history = []
    steps = tc.steps if max_steps is None else min(tc.steps, max_steps)
    start = time.time()
    try:
        for step in range(steps):
            idx = torch.randint(len(entries), (tc.batch_size,), generator=gen)
            z0 = torch.stack([latents[int(i)] for i in idx])
            conds = [entries[int(i)].cond for i in idx]
            loss = training_loss(model, z0, conds, sched, gen)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite diffusion loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"step": step, "loss": loss.item()})
            if metrics_file and (step % tc.log_every == 0 or step == steps - 1):
                metrics_file.write(
                    json.dumps({**history[-1], "elapsed": time.time() - start}) + "\n"
                )
            if tc.stop_loss is not None and len(history) >= tc.stop_window:
                trailing = np.mean([h["loss"] for h in history[-tc.stop_window :]])
                if trailing < tc.stop_loss:
                    break
    finally:
        if metrics_file:
            metrics_file.close()
    return model, (mean, std), history


def dit_config_dict(cfg: DiTConfig) -> dict:
    return asdict(cfg)


def dit_from_config(config: dict) -> GaussianVariationDiT:
    return GaussianVariationDiT(DiTConfig(**config))
