"""gvf4d: Gaussian variation-field VAE + latent diffusion, desk scale.

A video-to-4D pipeline compressing mesh-animation motion into a compact
latent set over canonical Gaussian splats, with a temporal diffusion
transformer generating those latents from video features, and a
differentiable splatting renderer closing the training loop.
"""

from .anim import (
    MeshAnimation,
    PointTracks,
    SampleSpec,
    SynthParams,
    evaluate_tracks,
    load_animation,
    sample_surface,
    save_animation,
    synthesize_animation,
)
from .camera import Camera, camera_ring, orbit_camera
from .diffusion import (
    ConditionBundle,
    DiTConfig,
    GaussianVariationDiT,
    NoiseSchedule,
    build_conditions,
    cosine_schedule,
    ddim_sample,
    forward_diffuse,
    train_diffusion,
    training_loss,
    v_target,
    z0_from_v,
)
from .gaussians import (
    GaussianSet,
    VariationField,
    apply_variation,
    fit_canonical_gaussians,
    load_gaussians,
    save_gaussians,
)
from .interp import adaptive_weights, farthest_point_sampling, interpolate_displacements, knn
from .metrics import psnr, ssim
from .pipeline import PipelineConfig, azimuth_align, cmd_evaluate, cmd_generate, cmd_synth
from .splat import project_gaussian, project_gaussians, render
from .vae import (
    LatentSequence,
    VAEConfig,
    VariationFieldVAE,
    build_queries,
    image_loss,
    kl_loss,
    mesh_guided_loss,
    reparameterize,
    train_vae,
)

__version__ = "0.1.0"
