"""Checkpoint files: JSON header {config, iteration, RNG state} plus
float32 parameter blobs concatenated in sorted-name order."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch

from .containers import read_container, write_container


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def rng_state_to_json(generator: torch.Generator) -> str:
    return generator.get_state().numpy().tobytes().hex()


def rng_state_from_json(hex_state: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(bytes.fromhex(hex_state), dtype=np.uint8).copy())


def save_checkpoint(
    path,
    state_dict: dict[str, torch.Tensor],
    config: dict,
    iteration: int,
    rng_state: str | None = None,
    extra: dict | None = None,
) -> None:
    arrays = {
        name: state_dict[name].detach().cpu().numpy().astype(np.float32)
        for name in sorted(state_dict)
    }
    meta = {
        "kind": "checkpoint",
        "config": config,
        "config_hash": config_hash(config),
        "iteration": int(iteration),
        "rng_state": rng_state,
    }
    if extra:
        meta["extra"] = extra
    write_container(path, meta, arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Returns (meta, state_dict); tensors are float32."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"not a checkpoint container: {path}")
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    return meta, state
