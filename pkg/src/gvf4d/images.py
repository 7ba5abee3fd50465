"""8-bit RGB PNG round-tripping for (H, W, 3) unit-range images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path)


def load_png(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing image: {path}")
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)
