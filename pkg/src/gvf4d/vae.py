"""Variation-field VAE: per-frame cross-attention encoder over point-cloud
displacements, latent regularization, and a self-attention + cross-attention
decoder emitting additive deltas for all 14 Gaussian attributes.

Encoding and decoding are strictly per-frame; temporal structure is left to
the latent diffusion model. The L latent tokens are anchored to farthest-
point-sampled Gaussians, and the same anchor set is reused for decoder
positional embeddings and (downstream) diffusion positional priors.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import interp
from .anim import MeshAnimation, PointTracks, evaluate_tracks, sample_colors, sample_surface
from .camera import Camera
from .gaussians import GaussianSet, VariationField, apply_variation, fit_canonical_gaussians
from .layers import FourierPositionEmbed, MultiheadAttention, SelfAttentionBlock, init_linear
from .metrics import psnr, ssim
from .optim import AdamW
from .splat import render

LOGVAR_CLAMP = 10.0


@dataclass
class VAEConfig:
    num_samples: int = 2048  # surface samples per frame
    num_gaussians: int = 512
    latent_size: int = 64  # anchor/latent token count
    latent_channels: int = 16
    knn_k: int = 8
    beta: float = 7.0
    width: int = 128
    heads: int = 4
    encoder_depth: int = 1
    decoder_depth: int = 2
    num_freqs: int = 6
    lambda_lpips: float = 0.2
    lambda_ssim: float = 0.2
    lambda_mg: float = 1.0
    lambda_kl: float = 1e-6
    render_resolution: int = 64
    views_per_step: int = 1

    def __post_init__(self):
        if self.latent_size > self.num_gaussians:
            raise ValueError("latent_size must not exceed num_gaussians")
        if min(self.num_samples, self.latent_size, self.latent_channels, self.width) < 1:
            raise ValueError("dimensions must be positive")


@dataclass
class LatentSequence:
    mean: torch.Tensor  # (T, L, C)
    log_var: torch.Tensor  # (T, L, C)
    anchor_indices: np.ndarray  # (L,) indices into the GaussianSet
    anchor_positions: torch.Tensor  # (L, 3)
    sample: torch.Tensor | None = None  # (T, L, C)


def select_anchors(g: GaussianSet, latent_size: int) -> np.ndarray:
    """FPS anchor indices over canonical Gaussian positions (start index 0)."""
    positions = g.positions.detach().cpu().numpy().astype(np.float64)
    return interp.farthest_point_sampling(positions, latent_size, start=0)


def build_queries(
    g: GaussianSet, p1: np.ndarray, dp_t: np.ndarray, cfg: VAEConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Motion-aware encoder queries for one frame.

    Interpolates the frame's point displacements onto every Gaussian, then
    slices the FPS anchor rows: returns (query_disp (L, 3), anchor indices).
    """
    positions = g.positions.detach().cpu().numpy().astype(np.float64)
    dp_interp = interp.interpolate_displacements(positions, p1, dp_t, cfg.knn_k, cfg.beta)
    anchors = select_anchors(g, cfg.latent_size)
    return dp_interp[anchors], anchors


def interp_targets(tracks: PointTracks, g: GaussianSet, cfg: VAEConfig) -> np.ndarray:
    """Pseudo ground-truth Gaussian displacements (T, N_G, 3) for all frames."""
    positions = g.positions.detach().cpu().numpy().astype(np.float64)
    return interp.interpolate_displacement_sequence(
        positions, tracks.points[0], tracks.displacements, cfg.knn_k, cfg.beta
    )


class VariationFieldVAE(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.disp_embed = init_linear(nn.Linear(3, d))
        self.pos_embed = FourierPositionEmbed(d, cfg.num_freqs)
        self.encoder_attn = MultiheadAttention(d, cfg.heads)
        self.encoder_refine = nn.ModuleList(
            SelfAttentionBlock(d, cfg.heads) for _ in range(cfg.encoder_depth - 1)
        )
        self.mean_head = init_linear(nn.Linear(d, cfg.latent_channels))
        self.logvar_head = init_linear(nn.Linear(d, cfg.latent_channels))
        # start near-deterministic (std ~ 0.05) so reconstruction signal is not
        # swamped by reparameterization noise early in training
        nn.init.constant_(self.logvar_head.bias, -6.0)
        self.latent_in = init_linear(nn.Linear(cfg.latent_channels, d))
        self.decoder_blocks = nn.ModuleList(
            SelfAttentionBlock(d, cfg.heads) for _ in range(cfg.decoder_depth)
        )
        self.gs_embed = init_linear(nn.Linear(14, d))
        self.decoder_attn = MultiheadAttention(d, cfg.heads)
        self.out_head = init_linear(nn.Linear(d, 14), zero=True)

    @property
    def dtype(self) -> torch.dtype:
        return self.disp_embed.weight.dtype

    def encode(
        self,
        displacements: torch.Tensor,  # (T, N, 3) point displacements vs frame 0
        p1: torch.Tensor,  # (N, 3) canonical points
        query_disp: torch.Tensor,  # (T, L, 3) interpolated anchor displacements
        anchor_positions: torch.Tensor,  # (L, 3)
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-frame cross attention; returns (mean, log_var), each (T, L, C)."""
        q = self.disp_embed(query_disp) + self.pos_embed(anchor_positions)
        kv = self.disp_embed(displacements) + self.pos_embed(p1)
        x = self.encoder_attn(q, kv)
        for block in self.encoder_refine:
            x = block(x)
        return self.mean_head(x), self.logvar_head(x).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decode(
        self,
        z: torch.Tensor,  # (T, L, C)
        g: GaussianSet,
        anchor_positions: torch.Tensor,  # (L, 3)
    ) -> VariationField:
        """Per-frame self-attention stack + attribute-queried cross attention."""
        x = self.latent_in(z) + self.pos_embed(anchor_positions)
        for block in self.decoder_blocks:
            x = block(x)
        queries = self.gs_embed(g.attributes_matrix()) + self.pos_embed(g.positions)
        queries = queries.unsqueeze(0).expand(z.shape[0], -1, -1)
        deltas = self.out_head(self.decoder_attn(queries, x))
        return VariationField.from_matrix(deltas)


def encode_animation(
    model: VariationFieldVAE,
    tracks: PointTracks,
    g: GaussianSet,
    anchor_indices: np.ndarray | None = None,
    dp_interp: np.ndarray | None = None,
) -> LatentSequence:
    """Full-pipeline encode from raw tracks (interpolation + anchors + attention)."""
    cfg = model.cfg
    if dp_interp is None:
        dp_interp = interp_targets(tracks, g, cfg)
    if anchor_indices is None:
        anchor_indices = select_anchors(g, cfg.latent_size)
    dtype = model.dtype
    anchor_positions = g.positions[anchor_indices].to(dtype)
    mean, log_var = model.encode(
        torch.as_tensor(tracks.displacements, dtype=dtype),
        torch.as_tensor(tracks.points[0], dtype=dtype),
        torch.as_tensor(dp_interp[:, anchor_indices], dtype=dtype),
        anchor_positions,
    )
    return LatentSequence(mean, log_var, anchor_indices, anchor_positions)


def reparameterize(lat: LatentSequence, seed: int | torch.Generator = 0) -> torch.Tensor:
    """sample = mean + exp(0.5 log_var) * eps with seeded standard-normal eps."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    eps = torch.randn(lat.mean.shape, generator=gen, dtype=lat.mean.dtype)
    sample = lat.mean + torch.exp(0.5 * lat.log_var) * eps
    lat.sample = sample
    return sample


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mesh_guided_loss(v: VariationField, dp_interp: torch.Tensor) -> torch.Tensor:
    """Squared-L2 between predicted and interpolated position deltas.

    Mean over Gaussians, sum over frames, so the weight is stable across N_G.
    """
    diff = v.d_positions - dp_interp.to(v.d_positions.dtype)
    return diff.pow(2).sum(dim=-1).mean(dim=-1).sum()


def kl_loss(lat: LatentSequence) -> torch.Tensor:
    """Mean KL(q || N(0, 1)) over all latent entries."""
    return 0.5 * (lat.mean.pow(2) + lat.log_var.exp() - 1.0 - lat.log_var).mean()


def image_loss(
    renders: torch.Tensor,
    gts: torch.Tensor,
    cfg: VAEConfig,
    lpips_fn=None,
) -> torch.Tensor:
    """Mean-L1 + lambda_ssim * (1 - SSIM) [+ lambda_lpips * LPIPS if registered].

    renders/gts: (K, H, W, 3) stacks of paired images.
    """
    if renders.shape != gts.shape:
        raise ValueError(f"image stack mismatch: {tuple(renders.shape)} vs {tuple(gts.shape)}")
    gts = gts.to(renders.dtype)
    loss = (renders - gts).abs().mean()
    if cfg.lambda_ssim:
        ssim_sum = sum(ssim(r, t) for r, t in zip(renders, gts))
        loss = loss + cfg.lambda_ssim * (1.0 - ssim_sum / renders.shape[0])
    if lpips_fn is not None and cfg.lambda_lpips:
        loss = loss + cfg.lambda_lpips * lpips_fn(renders, gts)
    return loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class AnimationSample:
    """Per-animation training bundle with cached geometry and targets."""

    name: str
    anim: MeshAnimation
    tracks: PointTracks
    gaussians: GaussianSet
    dp_interp: np.ndarray  # (T, N_G, 3)
    anchor_indices: np.ndarray  # (L,)
    cameras: list[Camera]
    _gt_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_frames(self) -> int:
        return self.tracks.points.shape[0]

    def target_gaussians(self, t: int) -> GaussianSet:
        """Canonical Gaussians displaced by the frame-t interpolated motion."""
        g = self.gaussians
        dp = torch.as_tensor(self.dp_interp[t], dtype=g.positions.dtype)
        return GaussianSet(g.positions + dp, g.log_scales, g.rotations, g.colors, g.opacities)

    def gt_image(self, t: int, view: int) -> torch.Tensor:
        key = (t, view)
        if key not in self._gt_cache:
            self._gt_cache[key] = render(self.target_gaussians(t), self.cameras[view]).detach()
        return self._gt_cache[key]


def prepare_animation_sample(
    anim: MeshAnimation,
    cfg: VAEConfig,
    cameras: list[Camera],
    seed: int = 0,
    name: str = "anim",
) -> AnimationSample:
    spec = sample_surface(anim, cfg.num_samples, seed)
    tracks = evaluate_tracks(anim, spec)
    colors = sample_colors(anim, spec)
    g = fit_canonical_gaussians(tracks.points[0], colors, cfg.num_gaussians, seed)
    dp_interp = interp_targets(tracks, g, cfg)
    anchors = select_anchors(g, cfg.latent_size)
    return AnimationSample(name, anim, tracks, g, dp_interp, anchors, list(cameras))


@dataclass
class VAETrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    lr_final_frac: float = 0.05  # cosine decay floor as a fraction of lr
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    frames_per_step: int = 8
    seed: int = 0
    log_every: int = 50
    eval_interval: int = 0  # if > 0, call the training stop_fn at this cadence
    metrics_path: str | None = None


def cosine_lr(base_lr: float, step: int, total: int, final_frac: float) -> float:
    if final_frac >= 1.0 or total <= 1:
        return base_lr
    decay = 0.5 * (1.0 + np.cos(np.pi * step / max(total - 1, 1)))
    return base_lr * (final_frac + (1.0 - final_frac) * decay)


def _encode_window(
    model: VariationFieldVAE, sample: AnimationSample, frame_ids: list[int]
) -> LatentSequence:
    dtype = model.dtype
    g = sample.gaussians
    anchor_positions = g.positions[sample.anchor_indices].to(dtype)
    mean, log_var = model.encode(
        torch.as_tensor(sample.tracks.displacements[frame_ids], dtype=dtype),
        torch.as_tensor(sample.tracks.points[0], dtype=dtype),
        torch.as_tensor(sample.dp_interp[frame_ids][:, sample.anchor_indices], dtype=dtype),
        anchor_positions,
    )
    return LatentSequence(mean, log_var, sample.anchor_indices, anchor_positions)


def vae_train_step(
    model: VariationFieldVAE,
    sample: AnimationSample,
    frame_ids: list[int],
    render_frames: list[int],
    view_ids: list[int],
    gen: torch.Generator,
    lpips_fn=None,
) -> dict[str, torch.Tensor]:
    """Losses for one window of frames.

    The mesh-guided and KL terms cover the whole window; the image term is
    evaluated on `render_frames` (window-relative indices) x `view_ids`, which
    keeps the per-step render count bounded.
    """
    cfg = model.cfg
    lat = _encode_window(model, sample, frame_ids)
    z = reparameterize(lat, gen)
    vfield = model.decode(z, sample.gaussians, lat.anchor_positions)

    dp = torch.as_tensor(sample.dp_interp[frame_ids], dtype=model.dtype)
    l_mg = mesh_guided_loss(vfield, dp)
    l_kl = kl_loss(lat)

    renders, gts = [], []
    for k in render_frames:
        g_t = apply_variation(sample.gaussians, vfield, k)
        for view in view_ids:
            renders.append(render(g_t, sample.cameras[view]))
            gts.append(sample.gt_image(frame_ids[k], view))
    l_img = image_loss(torch.stack(renders), torch.stack(gts), cfg, lpips_fn)
    total = l_img + cfg.lambda_mg * l_mg + cfg.lambda_kl * l_kl
    return {"total": total, "img": l_img, "mg": l_mg, "kl": l_kl}


def train_vae(
    samples: list[AnimationSample],
    cfg: VAEConfig,
    train_cfg: VAETrainConfig | None = None,
    lpips_fn=None,
    max_steps: int | None = None,
    init_state: dict | None = None,
    stop_fn=None,
) -> tuple[VariationFieldVAE, list[dict]]:
    """Joint training on image, mesh-guided and KL losses; deterministic per seed.

    `stop_fn(model) -> bool`, polled every `eval_interval` steps, allows early
    termination once an external convergence target is met.
    """
    tc = train_cfg or VAETrainConfig()
    torch.manual_seed(tc.seed)
    model = VariationFieldVAE(cfg)
    if init_state is not None:
        model.load_state_dict(init_state)
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
            s = samples[int(torch.randint(len(samples), (1,), generator=gen))]
            t_count = s.num_frames
            w = min(tc.frames_per_step, t_count)
            t0 = int(torch.randint(t_count - w + 1, (1,), generator=gen))
            frame_ids = list(range(t0, t0 + w))
            render_frames = [int(torch.randint(w, (1,), generator=gen))]
            view_ids = [
                int(torch.randint(len(s.cameras), (1,), generator=gen))
                for _ in range(cfg.views_per_step)
            ]
            losses = vae_train_step(model, s, frame_ids, render_frames, view_ids, gen, lpips_fn)
            if not torch.isfinite(losses["total"]):
                raise RuntimeError(
                    f"non-finite VAE loss at step {step}: "
                    + ", ".join(f"{k}={v.item():.6g}" for k, v in losses.items())
                )
            opt.zero_grad()
            losses["total"].backward()
            opt.lr = cosine_lr(tc.lr, step, steps, tc.lr_final_frac)
            opt.step()
            record = {
                "step": step,
                "total": losses["total"].item(),
                "img": losses["img"].item(),
                "mg": losses["mg"].item(),
                "kl": losses["kl"].item(),
            }
            history.append(record)
            if metrics_file and (step % tc.log_every == 0 or step == steps - 1):
                metrics_file.write(json.dumps({**record, "elapsed": time.time() - start}) + "\n")
            if stop_fn is not None and tc.eval_interval and (step + 1) % tc.eval_interval == 0:
                if stop_fn(model):
                    break
    finally:
        if metrics_file:
            metrics_file.close()
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def reconstruct(model: VariationFieldVAE, sample: AnimationSample) -> VariationField:
    """Deterministic reconstruction of the full sequence from posterior means."""
    with torch.no_grad():
        lat = _encode_window(model, sample, list(range(sample.num_frames)))
        return model.decode(lat.mean, sample.gaussians, lat.anchor_positions)


def evaluate_reconstruction(
    model: VariationFieldVAE, samples: list[AnimationSample], views: list[int] | None = None
) -> dict:
    """Full-sequence mesh-guided loss and render PSNR/SSIM against targets."""
    mg_total = 0.0
    psnrs, ssims = [], []
    with torch.no_grad():
        for s in samples:
            vfield = reconstruct(model, s)
            dp = torch.as_tensor(s.dp_interp, dtype=model.dtype)
            mg_total += mesh_guided_loss(vfield, dp).item()
            view_ids = views if views is not None else range(len(s.cameras))
            for t in range(s.num_frames):
                g_t = apply_variation(s.gaussians, vfield, t)
                for view in view_ids:
                    img = render(g_t, s.cameras[view])
                    gt = s.gt_image(t, view)
                    psnrs.append(psnr(img, gt))
                    ssims.append(ssim(img, gt).item())
    return {
        "mesh_guided_loss": mg_total / len(samples),
        "psnr": psnrs,
        "mean_psnr": float(np.mean(psnrs)),
        "ssim": ssims,
        "mean_ssim": float(np.mean(ssims)),
    }


def vae_config_dict(cfg: VAEConfig) -> dict:
    return asdict(cfg)


def vae_from_config(config: dict) -> VariationFieldVAE:
    return VariationFieldVAE(VAEConfig(**config))
