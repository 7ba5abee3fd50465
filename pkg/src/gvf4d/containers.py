"""Single-file container: JSON header + concatenated little-endian binary blobs.

Layout: 8-byte little-endian uint64 header length, UTF-8 JSON header, then the
raw array bytes back to back in the order listed under header["arrays"].
Used for Gaussian sets, variation fields, checkpoints and latent caches.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write `arrays` (name -> ndarray) with user metadata `meta`."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for array '{name}'")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.astype(_DTYPES[dtype]).tobytes())
    header = dict(meta)
    header["arrays"] = entries
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(payload).to_bytes(8, "little"))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns (meta, arrays). `meta` keeps the 'arrays' index."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"container not found: {path}")
    with open(path, "rb") as f:
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"truncated container: array '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header, arrays
