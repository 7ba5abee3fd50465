"""Command-line entry point.

    gvf4d synth|train-vae|train-diffusion|generate|evaluate|align ...

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .gaussians import load_gaussians, save_gaussians
from .images import load_png
from .pipeline import ConfigError, NumericalError, PipelineConfig


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gvf4d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic dataset + GT renders")
    _add_config_arg(p)

    p = sub.add_parser("train-vae", help="train the variation-field VAE")
    _add_config_arg(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-diffusion", help="precompute latents and train the DiT")
    _add_config_arg(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("generate", help="video + canonical Gaussians -> 4D sequence")
    _add_config_arg(p)
    p.add_argument("--video", required=True, help="directory of PNG frames")
    p.add_argument("--canonical", required=True, help=".gsb file or animation directory")
    p.add_argument("--t-out", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/temporal report for rendered frames")
    p.add_argument("--generated", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="report JSON path")

    p = sub.add_parser("align", help="azimuth-align canonical Gaussians to a reference image")
    _add_config_arg(p)
    p.add_argument("--gaussians", required=True, help=".gsb container")
    p.add_argument("--reference", required=True, help="reference PNG (first video frame)")
    p.add_argument("--view", type=int, default=0, help="rig view used for alignment renders")
    p.add_argument("--out", default=None, help="output .gsb path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            out = pipeline.cmd_synth(_load_config(args))
            print(f"dataset written to {out}")
        elif args.command == "train-vae":
            out = pipeline.cmd_train_vae(_load_config(args), resume=args.resume)
            print(f"VAE checkpoint: {out}")
        elif args.command == "train-diffusion":
            out = pipeline.cmd_train_diffusion(_load_config(args), resume=args.resume)
            print(f"diffusion checkpoint: {out}")
        elif args.command == "generate":
            config = _load_config(args)
            out = pipeline.cmd_generate(
                config, args.video, args.canonical, out_dir=args.out, t_out=args.t_out, seed=args.seed
            )
            print(f"generated sequence in {out}")
        elif args.command == "evaluate":
            report = pipeline.cmd_evaluate(args.generated, args.gt, report_path=args.out)
            print(json.dumps(report.to_dict(), indent=1))
        elif args.command == "align":
            config = _load_config(args)
            g = load_gaussians(args.gaussians)
            reference = load_png(args.reference)
            cam = config.rig.cameras()[args.view]
            aligned, angle = pipeline.azimuth_align(g, reference, cam, config.align_angles)
            out = args.out or (str(args.gaussians) + ".aligned.gsb")
            save_gaussians(aligned, out)
            print(f"chosen azimuth: {angle:.6f} rad; aligned set written to {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FileNotFoundError) as exc:
        code = 3 if isinstance(exc, NumericalError) else 2
        kind = "numerical failure" if code == 3 else "config error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
