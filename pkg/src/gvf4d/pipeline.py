"""End-to-end pipeline: dataset synthesis, two-stage training, generation,
azimuth alignment, autoregressive long sequences and evaluation.

Dataset layout under `data_dir`:
    manifest.json                         dataset-level metadata
    anims/<name>/                         animation containers
    renders/<name>/view_VV/frame_TTT.png  ground-truth splat renders

Ground truth is defined as splat renders of the fitted canonical Gaussians
displaced by the interpolated per-frame motion, which keeps the metric loop
renderer-matched end to end. Video conditioning uses rig view 0.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dfn
from .anim import MeshAnimation, SynthParams, load_animation, save_animation, synthesize_animation
from .camera import Camera, camera_ring
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .gaussians import (
    GaussianSet,
    VariationField,
    apply_variation,
    load_gaussians,
    save_gaussians,
    save_variation_field,
)
from .images import load_png, save_png
from .metrics import psnr, ssim
from .splat import render
from .vae import (
    AnimationSample,
    VAEConfig,
    VAETrainConfig,
    VariationFieldVAE,
    evaluate_reconstruction,
    prepare_animation_sample,
    select_anchors,
    train_vae,
)


class ConfigError(Exception):
    """Bad configuration, missing inputs or mismatched artifacts (exit code 2)."""


class NumericalError(Exception):
    """Non-finite losses or other numerical failures (exit code 3)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RigConfig:
    num_azimuths: int = 8
    elevation_deg: float = 20.0
    radius: float = 2.0
    fov_deg: float = 40.0
    resolution: int = 64

    def cameras(self) -> list[Camera]:
        return camera_ring(
            self.num_azimuths,
            elevation=math.radians(self.elevation_deg),
            radius=self.radius,
            vertical_fov=math.radians(self.fov_deg),
            resolution=(self.resolution, self.resolution),
        )


@dataclass
class SynthConfig:
    num_animations: int = 8
    num_frames: int = 8
    frame_rate: float = 12.0
    seed: int = 0


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    vae: VAEConfig = field(default_factory=VAEConfig)
    dit: dfn.DiTConfig = field(default_factory=dfn.DiTConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    vae_train: VAETrainConfig = field(default_factory=VAETrainConfig)
    dit_train: dfn.DiffusionTrainConfig = field(default_factory=dfn.DiffusionTrainConfig)
    eval_views: int = 4
    ddim_steps: int = 50
    align_angles: int = 36
    seed: int = 0

    def __post_init__(self):
        if self.rig.resolution != self.vae.render_resolution:
            self.rig.resolution = self.vae.render_resolution

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        nested = {
            "vae": VAEConfig,
            "dit": dfn.DiTConfig,
            "rig": RigConfig,
            "synth": SynthConfig,
            "vae_train": VAETrainConfig,
            "dit_train": dfn.DiffusionTrainConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            try:
                if key in nested:
                    sub = nested[key]
                    extra = set(value) - {f.name for f in fields(sub)}
                    if extra:
                        raise ConfigError(f"unknown keys in '{key}': {sorted(extra)}")
                    value = dict(value)
                    for fname in ("betas",):
                        if fname in value and isinstance(value[fname], list):
                            value[fname] = tuple(value[fname])
                    kwargs[key] = sub(**value)
                else:
                    kwargs[key] = value
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid config section '{key}': {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def eval_view_ids(config: PipelineConfig) -> list[int]:
    n = config.rig.num_azimuths
    v = min(config.eval_views, n)
    return [round(i * n / v) % n for i in range(v)]


CONDITION_VIEW = 0


# ---------------------------------------------------------------------------
# dataset synthesis and loading
# ---------------------------------------------------------------------------

_SYNTH_KINDS = ("translate", "rotate", "bend", "two_part")
_SYNTH_BASES = ("cube", "sphere", "cylinder")


def _synth_recipe(index: int, synth: SynthConfig) -> tuple[str, SynthParams]:
    kind = _SYNTH_KINDS[index % len(_SYNTH_KINDS)]
    magnitude = 0.6 + 0.4 * ((index // len(_SYNTH_KINDS)) % 3) / 2.0
    params = SynthParams(
        base=_SYNTH_BASES[index % len(_SYNTH_BASES)],
        num_frames=synth.num_frames,
        frame_rate=synth.frame_rate,
        velocity=(0.04 * magnitude, 0.02 * magnitude, 0.0),
        axis=(0.0, 0.0, 1.0),
        total_angle=magnitude * math.pi / 2.0,
        bend_angle=magnitude * math.pi / 3.0,
        split_axis=index % 3,
    )
    return kind, params


def cmd_synth(config: PipelineConfig) -> Path:
    """Write the synthetic animation suite plus ground-truth renders."""
    data_dir = Path(config.data_dir)
    cameras = config.rig.cameras()
    names = []
    for i in range(config.synth.num_animations):
        kind, params = _synth_recipe(i, config.synth)
        seed = config.synth.seed + i
        anim = synthesize_animation(kind, params, seed=seed)
        name = f"anim_{i:03d}_{kind}"
        names.append(name)
        save_animation(anim, data_dir / "anims" / name)
        sample = prepare_animation_sample(anim, config.vae, cameras, seed=seed, name=name)
        for view in range(len(cameras)):
            for t in range(sample.num_frames):
                save_png(
                    sample.gt_image(t, view),
                    data_dir / "renders" / name / f"view_{view:02d}" / f"frame_{t:03d}.png",
                )
    manifest = {
        "animations": names,
        "rig": asdict(config.rig),
        "synth": asdict(config.synth),
        "vae_config_hash": config_hash(asdict(config.vae)),
    }
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return data_dir


def load_dataset(config: PipelineConfig) -> list[AnimationSample]:
    """Rebuild training bundles from the dataset directory (deterministic)."""
    data_dir = Path(config.data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cameras = config.rig.cameras()
    samples = []
    for i, name in enumerate(manifest["animations"]):
        anim = load_animation(data_dir / "anims" / name)
        seed = int(manifest["synth"]["seed"]) + i
        samples.append(prepare_animation_sample(anim, config.vae, cameras, seed=seed, name=name))
    return samples


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------


def vae_checkpoint_path(config: PipelineConfig) -> Path:
    return Path(config.checkpoint_dir) / "vae.ckpt"


def dit_checkpoint_path(config: PipelineConfig) -> Path:
    return Path(config.checkpoint_dir) / "dit.ckpt"


def load_vae_model(config: PipelineConfig) -> tuple[VariationFieldVAE, dict]:
    path = vae_checkpoint_path(config)
    if not path.is_file():
        raise ConfigError(f"missing VAE checkpoint: {path}")
    meta, state = load_checkpoint(path)
    model = VariationFieldVAE(VAEConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


def load_dit_model(config: PipelineConfig):
    path = dit_checkpoint_path(config)
    if not path.is_file():
        raise ConfigError(f"missing diffusion checkpoint: {path}")
    meta, state = load_checkpoint(path)
    model = dfn.GaussianVariationDiT(dfn.DiTConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    stats = (
        torch.tensor(meta["extra"]["latent_mean"], dtype=torch.float32),
        torch.tensor(meta["extra"]["latent_std"], dtype=torch.float32),
    )
    return model, stats, meta


def cmd_train_vae(config: PipelineConfig, resume: bool = False) -> Path:
    samples = load_dataset(config)
    path = vae_checkpoint_path(config)
    tc = replace(config.vae_train, metrics_path=str(Path(config.checkpoint_dir) / "vae_metrics.jsonl"))
    init_state, start_iteration = None, 0
    if resume:
        if not path.is_file():
            raise ConfigError(f"cannot resume, missing checkpoint: {path}")
        meta, init_state = load_checkpoint(path)
        if meta["config_hash"] != config_hash(asdict(config.vae)):
            raise ConfigError("checkpoint config hash does not match the current VAE config")
        start_iteration = meta["iteration"]
    try:
        model, history = train_vae(samples, config.vae, tc, init_state=init_state)
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from exc
    save_checkpoint(
        path,
        model.state_dict(),
        asdict(config.vae),
        iteration=start_iteration + len(history),
        extra={"train": {"steps": len(history), "seed": tc.seed}},
    )
    return path


def precompute_latents(config: PipelineConfig, samples=None) -> list[dfn.LatentEntry]:
    """Posterior-mean latents + raw condition tokens from the frozen VAE."""
    from .vae import encode_animation

    vae_model, _ = load_vae_model(config)
    samples = samples if samples is not None else load_dataset(config)
    cache_dir = Path(config.checkpoint_dir) / "latents"
    cache_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    with torch.no_grad():
        for s in samples:
            lat = encode_animation(vae_model, s.tracks, s.gaussians, s.anchor_indices, s.dp_interp)
            video = torch.stack([s.gt_image(t, CONDITION_VIEW) for t in range(s.num_frames)])
            cond = dfn.build_conditions(
                video, s.gaussians, s.anchor_indices, patch_size=config.dit.patch_size
            )
            entry = dfn.LatentEntry(s.name, lat.mean.detach(), s.anchor_indices, cond)
            dfn.save_latent_entry(entry, cache_dir / f"{s.name}.lat")
            entries.append(entry)
    return entries


def cmd_train_diffusion(config: PipelineConfig, resume: bool = False) -> Path:
    entries = precompute_latents(config)
    path = dit_checkpoint_path(config)
    tc = replace(config.dit_train, metrics_path=str(Path(config.checkpoint_dir) / "dit_metrics.jsonl"))
    init_state, start_iteration = None, 0
    if resume:
        if not path.is_file():
            raise ConfigError(f"cannot resume, missing checkpoint: {path}")
        meta, init_state = load_checkpoint(path)
        if meta["config_hash"] != config_hash(asdict(config.dit)):
            raise ConfigError("checkpoint config hash does not match the current DiT config")
        start_iteration = meta["iteration"]
    try:
        model, (mean, std), history = dfn.train_diffusion(entries, config.dit, tc, init_state=init_state)
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from exc
    save_checkpoint(
        path,
        model.state_dict(),
        asdict(config.dit),
        iteration=start_iteration + len(history),
        extra={
            "latent_mean": [float(x) for x in mean],
            "latent_std": [float(x) for x in std],
            "train": {"steps": len(history), "seed": tc.seed},
        },
    )
    return path


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def load_video_frames(video_dir) -> torch.Tensor:
    video_dir = Path(video_dir)
    if not video_dir.is_dir():
        raise ConfigError(f"video directory not found: {video_dir}")
    paths = sorted(video_dir.glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG frames in {video_dir}")
    return torch.stack([load_png(p) for p in paths])


def load_canonical(config: PipelineConfig, path, seed: int = 0) -> GaussianSet:
    """Canonical Gaussians from a .gsb container or fitted from an animation dir."""
    path = Path(path)
    if path.is_dir():
        anim = load_animation(path)
        sample = prepare_animation_sample(anim, config.vae, config.rig.cameras(), seed=seed)
        return sample.gaussians
    if not path.is_file():
        raise ConfigError(f"canonical input not found: {path}")
    return load_gaussians(path)


def generate_segment(
    dit_model: dfn.GaussianVariationDiT,
    stats: tuple[torch.Tensor, torch.Tensor],
    vae_model: VariationFieldVAE,
    g: GaussianSet,
    video_frames: torch.Tensor,
    ddim_steps: int,
    seed: int,
) -> VariationField:
    """Conditions -> DDIM latents -> decoded variation field for one clip."""
    anchors = select_anchors(g, vae_model.cfg.latent_size)
    cond = dfn.build_conditions(video_frames, g, anchors, patch_size=dit_model.cfg.patch_size)
    t = video_frames.shape[0]
    shape = (t, vae_model.cfg.latent_size, vae_model.cfg.latent_channels)
    sched = dfn.cosine_schedule(dit_model.cfg.timesteps)
    mean, std = stats
    with torch.no_grad():
        z_std = dfn.ddim_sample(
            lambda z, s: dit_model(z, s, cond), sched, shape, num_steps=ddim_steps, seed=seed
        )
        z = z_std * std + mean
        return vae_model.decode(z, g, g.positions[anchors])


def autoregressive_generate(
    dit_model,
    stats,
    vae_model,
    g: GaussianSet,
    video_frames: torch.Tensor,
    segment_frames: int,
    total_frames: int,
    ddim_steps: int,
    seed: int,
) -> VariationField:
    """Chain fixed-length segments; each new segment is anchored to the
    previous segment's last frame, whose duplicated boundary frame is dropped.
    """
    if total_frames > video_frames.shape[0]:
        raise ConfigError(
            f"requested {total_frames} frames but video has {video_frames.shape[0]}"
        )
    states: list[GaussianSet] = []
    canonical = g
    start = 0
    segment = 0
    while len(states) < total_frames:
        window = video_frames[start : start + segment_frames]
        vf = generate_segment(
            dit_model, stats, vae_model, canonical, window, ddim_steps, seed + segment
        )
        first = 1 if states else 0  # drop the duplicated boundary frame
        for t in range(first, window.shape[0]):
            states.append(apply_variation(canonical, vf, t).detach_clone())
        canonical = states[-1]
        start += window.shape[0] - 1
        segment += 1
        if window.shape[0] <= 1:
            raise NumericalError("autoregressive window collapsed below two frames")
    states = states[:total_frames]

    # re-express absolute per-frame states as deltas over the original canonical set
    deltas = torch.stack(
        [state.attributes_matrix() - g.attributes_matrix() for state in states]
    )
    return VariationField.from_matrix(deltas)


def cmd_generate(
    config: PipelineConfig,
    video_dir,
    canonical_path,
    out_dir=None,
    t_out: int | None = None,
    seed: int | None = None,
) -> Path:
    """Video + canonical Gaussians -> variation field, blobs and rendered frames."""
    started = time.time()
    seed = config.seed if seed is None else seed
    out = Path(out_dir) if out_dir else Path(config.output_dir) / "generate"
    video = load_video_frames(video_dir)
    g = load_canonical(config, canonical_path, seed=seed)
    vae_model, _ = load_vae_model(config)
    dit_model, stats, _ = load_dit_model(config)

    t_out = video.shape[0] if t_out is None else t_out
    if t_out > video.shape[0]:
        raise ConfigError(f"t_out={t_out} exceeds the {video.shape[0]} provided video frames")
    train_frames = dit_model.cfg.train_frames
    if t_out > train_frames:
        vfield = autoregressive_generate(
            dit_model, stats, vae_model, g, video, train_frames, t_out, config.ddim_steps, seed
        )
    else:
        vfield = generate_segment(
            dit_model, stats, vae_model, g, video[:t_out], config.ddim_steps, seed
        )

    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(g, out / "canonical.gsb")
    save_variation_field(vfield, out / "variation_field.vfb")
    cameras = config.rig.cameras()
    views = eval_view_ids(config)
    with torch.no_grad():
        for t in range(vfield.num_frames):
            g_t = apply_variation(g, vfield, t)
            for view in views:
                save_png(
                    render(g_t, cameras[view]),
                    out / "renders" / f"view_{view:02d}" / f"frame_{t:03d}.png",
                )
    meta = {
        "seed": seed,
        "t_out": t_out,
        "ddim_steps": config.ddim_steps,
        "views": views,
        "runtime_seconds": time.time() - started,
    }
    (out / "generate_meta.json").write_text(json.dumps(meta, indent=1))
    return out


# ---------------------------------------------------------------------------
# azimuth alignment
# ---------------------------------------------------------------------------


def azimuth_align(
    g: GaussianSet, reference: torch.Tensor, cam: Camera, n_angles: int = 36
) -> tuple[GaussianSet, float]:
    """Grid search over rigid yaw rotations minimizing L1 + (1 - SSIM) against
    the reference image; ties broken by the smallest angle."""
    if n_angles < 2:
        raise ValueError("n_angles must be at least 2")
    from .gaussians import rotate_about_z

    best_angle, best_score, best_g = None, None, None
    with torch.no_grad():
        for k in range(n_angles):
            angle = 2.0 * math.pi * k / n_angles
            g_rot = rotate_about_z(g, angle)
            img = render(g_rot, cam)
            score = (img - reference).abs().mean().item() + (1.0 - ssim(img, reference).item())
            if best_score is None or score < best_score:
                best_angle, best_score, best_g = angle, score, g_rot
    return best_g, best_angle


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    psnr: list[float]
    ssim: list[float]
    mean_psnr: float
    mean_ssim: float
    temporal_coherence: float
    runtime_seconds: float
    num_frames: int
    num_views: int

    def to_dict(self) -> dict:
        return asdict(self)


def _render_tree(root: Path) -> dict[str, list[Path]]:
    views = {}
    for view_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        views[view_dir.name] = sorted(view_dir.glob("*.png"))
    if not views:
        raise ConfigError(f"no view directories under {root}")
    return views


def cmd_evaluate(generated_dir, gt_dir, report_path=None) -> MetricsReport:
    """Per-frame PSNR/SSIM and temporal coherence of generated vs GT renders."""
    started = time.time()
    generated_dir, gt_dir = Path(generated_dir), Path(gt_dir)
    if (generated_dir / "renders").is_dir():
        generated_dir = generated_dir / "renders"
    gen_views = _render_tree(generated_dir)
    gt_views = _render_tree(gt_dir)
    common = sorted(set(gen_views) & set(gt_views))
    if not common:
        raise ConfigError("generated and ground-truth directories share no views")
    psnrs, ssims, coherence = [], [], []
    num_frames = None
    for view in common:
        gen_paths, gt_paths = gen_views[view], gt_views[view]
        if len(gen_paths) != len(gt_paths):
            raise ConfigError(
                f"mismatched frame counts in {view}: {len(gen_paths)} vs {len(gt_paths)}"
            )
        if num_frames is None:
            num_frames = len(gen_paths)
        prev = None
        for gp, tp in zip(gen_paths, gt_paths):
            img, gt = load_png(gp), load_png(tp)
            psnrs.append(psnr(img, gt))
            ssims.append(ssim(img, gt).item())
            if prev is not None:
                coherence.append((img - prev).abs().mean().item())
            prev = img
    report = MetricsReport(
        psnr=psnrs,
        ssim=ssims,
        mean_psnr=float(np.mean(psnrs)),
        mean_ssim=float(np.mean(ssims)),
        temporal_coherence=float(np.mean(coherence)) if coherence else 0.0,
        runtime_seconds=time.time() - started,
        num_frames=num_frames or 0,
        num_views=len(common),
    )
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=1))
    return report
