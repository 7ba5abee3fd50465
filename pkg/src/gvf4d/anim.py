"""Fixed-topology mesh animations: synthesis, container I/O, surface sampling
and correspondence-true point tracks.

An animation is stored normalized so that frame 0 fits the unit cube
[-0.5, 0.5]^3; `scale`/`offset` map stored coordinates back to the source
units (original = stored / scale + offset). Sampling uses a counter-based
Philox generator so results are reproducible across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

_NORM_TOL = 1e-5
MANIFEST_NAME = "manifest.json"


@dataclass
class MeshAnimation:
    """Canonical mesh plus per-frame vertex positions (frame 0 == canonical)."""

    vertices_canonical: np.ndarray  # (V, 3) float32
    faces: np.ndarray  # (F, 3) int32
    frames: np.ndarray  # (T, V, 3) float32
    colors: np.ndarray | None = None  # (V, 3) float32 in [0, 1]
    frame_rate: float = 12.0
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float64))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices_canonical.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> None:
        v, f, t = self.num_vertices, self.num_faces, self.num_frames
        if t < 1:
            raise ValueError("animation must have at least one frame")
        if self.frames.shape != (t, v, 3):
            raise ValueError(
                f"shape mismatch: frames {self.frames.shape} vs expected ({t}, {v}, 3)"
            )
        if not np.array_equal(self.frames[0], self.vertices_canonical):
            raise ValueError("canonical mismatch: frames[0] differs from canonical vertices")
        if f > 0 and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError(f"face index out of range [0, {v})")
        if np.any(face_areas(self.vertices_canonical, self.faces) <= 0.0):
            raise ValueError("degenerate face (zero area) in canonical frame")
        if self.colors is not None and self.colors.shape != (v, 3):
            raise ValueError(f"shape mismatch: colors {self.colors.shape} vs ({v}, 3)")


@dataclass
class SampleSpec:
    """Barycentric surface samples tied to canonical faces."""

    face_ids: np.ndarray  # (N,) int64
    barycentrics: np.ndarray  # (N, 3) float64, rows sum to 1
    seed: int

    def validate(self, anim: MeshAnimation) -> None:
        if self.face_ids.min() < 0 or self.face_ids.max() >= anim.num_faces:
            raise ValueError("sample face id out of range")
        if not np.allclose(self.barycentrics.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("barycentric rows must sum to 1")
        if self.barycentrics.min() < -1e-12:
            raise ValueError("barycentrics must be non-negative")


@dataclass
class PointTracks:
    """Sampled surface points per frame and their displacements from frame 0."""

    points: np.ndarray  # (T, N, 3) float64
    displacements: np.ndarray  # (T, N, 3) float64


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = np.asarray(vertices, dtype=np.float64)[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def _unit_cube_transform(vertices: np.ndarray) -> tuple[float, np.ndarray]:
    """Scale/center so the bounding box fits [-0.5, 0.5]^3 (largest axis spans 1)."""
    lo = vertices.min(axis=0).astype(np.float64)
    hi = vertices.max(axis=0).astype(np.float64)
    extent = float((hi - lo).max())
    scale = 1.0 / extent if extent > 1e-12 else 1.0
    center = (lo + hi) / 2.0
    return scale, center


def normalize_animation(anim: MeshAnimation) -> MeshAnimation:
    """Re-normalize so frame 0 fits the unit cube; composes scale/offset metadata.

    Animations already normalized (within 1e-5) are returned unchanged, which
    keeps save -> load round trips bitwise exact.
    """
    scale, center = _unit_cube_transform(anim.vertices_canonical)
    if abs(scale - 1.0) < _NORM_TOL and np.all(np.abs(center) < _NORM_TOL):
        return anim
    frames = ((anim.frames.astype(np.float64) - center) * scale).astype(np.float32)
    return replace(
        anim,
        vertices_canonical=frames[0].copy(),
        frames=frames,
        scale=anim.scale * scale,
        offset=np.asarray(anim.offset, dtype=np.float64) + center / anim.scale,
    )


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def save_animation(anim: MeshAnimation, path) -> None:
    """Write the animation directory container (manifest + raw LE binaries)."""
    anim.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "T": anim.num_frames,
        "V": anim.num_vertices,
        "F": anim.num_faces,
        "frame_rate": float(anim.frame_rate),
        "has_colors": anim.colors is not None,
        "scale": float(anim.scale),
        "offset": [float(x) for x in np.asarray(anim.offset)],
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    anim.faces.astype("<i4").tofile(path / "topology.bin")
    anim.vertices_canonical.astype("<f4").tofile(path / "canonical.bin")
    anim.frames.astype("<f4").tofile(path / "frames.bin")
    if anim.colors is not None:
        anim.colors.astype("<f4").tofile(path / "colors.bin")


def _read_bin(path: Path, dtype, shape, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(
            f"shape mismatch: {what} has {data.size} values, manifest implies {expected}"
        )
    return data.reshape(shape)


def load_animation(path) -> MeshAnimation:
    """Read an animation container; re-normalizes to the unit cube if needed."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing file: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    t, v, f = int(manifest["T"]), int(manifest["V"]), int(manifest["F"])
    faces = _read_bin(path / "topology.bin", "<i4", (f, 3), "topology.bin")
    canonical = _read_bin(path / "canonical.bin", "<f4", (v, 3), "canonical.bin")
    frames = _read_bin(path / "frames.bin", "<f4", (t, v, 3), "frames.bin")
    colors = None
    if manifest.get("has_colors", False):
        colors = _read_bin(path / "colors.bin", "<f4", (v, 3), "colors.bin")
    if not np.array_equal(frames[0], canonical):
        raise ValueError("canonical mismatch: frames[0] differs from canonical vertices")
    anim = MeshAnimation(
        vertices_canonical=canonical,
        faces=faces,
        frames=frames,
        colors=colors,
        frame_rate=float(manifest.get("frame_rate", 12.0)),
        scale=float(manifest.get("scale", 1.0)),
        offset=np.asarray(manifest.get("offset", [0.0, 0.0, 0.0]), dtype=np.float64),
    )
    anim = normalize_animation(anim)
    anim.validate()
    return anim


# ---------------------------------------------------------------------------
# base primitives
# ---------------------------------------------------------------------------


def _grid_faces(rows: int, cols: int, base: int) -> np.ndarray:
    """Two triangles per cell of a (rows x cols) vertex grid starting at `base`."""
    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = base + i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    return np.asarray(faces, dtype=np.int32)


def make_cube(resolution: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned unit cube with an (r+1)^2 vertex grid per face."""
    r = resolution
    lin = np.linspace(-0.5, 0.5, r + 1)
    uu, vv = np.meshgrid(lin, lin, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    verts, faces = [], []
    # (axis, sign): grid spans the two remaining axes at the fixed coordinate
    for axis, sign in [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]:
        base = sum(len(v) for v in verts)
        grid = np.zeros((uu.size, 3))
        grid[:, axis] = 0.5 * sign
        others = [a for a in range(3) if a != axis]
        grid[:, others[0]] = uu
        grid[:, others[1]] = vv * sign  # flip one axis so faces wind outward
        verts.append(grid)
        faces.append(_grid_faces(r + 1, r + 1, base))
    return np.concatenate(verts).astype(np.float32), np.concatenate(faces)


def make_sphere(n_lat: int = 12, n_lon: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """UV sphere of radius 0.5 with triangle fans at the poles."""
    verts = [np.array([0.0, 0.0, 0.5])]
    for i in range(1, n_lat):
        theta = math.pi * i / n_lat
        for j in range(n_lon):
            phi = 2.0 * math.pi * j / n_lon
            verts.append(
                np.array(
                    [
                        0.5 * math.sin(theta) * math.cos(phi),
                        0.5 * math.sin(theta) * math.sin(phi),
                        0.5 * math.cos(theta),
                    ]
                )
            )
    verts.append(np.array([0.0, 0.0, -0.5]))
    top, bottom = 0, len(verts) - 1
    ring = lambda i: 1 + (i - 1) * n_lon  # noqa: E731 - first vertex of latitude ring i
    faces = []
    for j in range(n_lon):
        faces.append((top, ring(1) + j, ring(1) + (j + 1) % n_lon))
        faces.append((bottom, ring(n_lat - 1) + (j + 1) % n_lon, ring(n_lat - 1) + j))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a = ring(i) + j
            b = ring(i) + (j + 1) % n_lon
            c = ring(i + 1) + j
            d = ring(i + 1) + (j + 1) % n_lon
            faces.append((a, c, b))
            faces.append((b, c, d))
    return np.stack(verts).astype(np.float32), np.asarray(faces, dtype=np.int32)


def make_cylinder(n_radial: int = 16, n_height: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Capped cylinder of radius 0.25 and height 1 along +z."""
    radius = 0.25
    verts = []
    for i in range(n_height + 1):
        z = -0.5 + i / n_height
        for j in range(n_radial):
            phi = 2.0 * math.pi * j / n_radial
            verts.append(np.array([radius * math.cos(phi), radius * math.sin(phi), z]))
    faces = []
    for i in range(n_height):
        for j in range(n_radial):
            a = i * n_radial + j
            b = i * n_radial + (j + 1) % n_radial
            c = a + n_radial
            d = b + n_radial
            faces.append((a, b, c))
            faces.append((b, d, c))
    bottom_center = len(verts)
    verts.append(np.array([0.0, 0.0, -0.5]))
    top_center = len(verts)
    verts.append(np.array([0.0, 0.0, 0.5]))
    top_ring = n_height * n_radial
    for j in range(n_radial):
        faces.append((bottom_center, (j + 1) % n_radial, j))
        faces.append((top_center, top_ring + j, top_ring + (j + 1) % n_radial))
    return np.stack(verts).astype(np.float32), np.asarray(faces, dtype=np.int32)


_PRIMITIVES = {"cube": make_cube, "sphere": make_sphere, "cylinder": make_cylinder}


# ---------------------------------------------------------------------------
# synthetic motion
# ---------------------------------------------------------------------------


@dataclass
class SynthParams:
    base: str = "cube"
    num_frames: int = 8
    frame_rate: float = 12.0
    velocity: tuple[float, float, float] = (0.05, 0.0, 0.0)
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    total_angle: float = math.pi / 2.0
    bend_angle: float = math.pi / 3.0
    split_axis: int = 0
    color_jitter: float = 0.05


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    one_c = 1.0 - c
    return np.array(
        [
            [c + x * x * one_c, x * y * one_c - z * s, x * z * one_c + y * s],
            [y * x * one_c + z * s, c + y * y * one_c, y * z * one_c - x * s],
            [z * x * one_c - y * s, z * y * one_c + x * s, c + z * z * one_c],
        ]
    )


def bend_heights(vertices: np.ndarray) -> np.ndarray:
    """Normalized height in [0, 1] along z of the canonical frame."""
    z = np.asarray(vertices, dtype=np.float64)[:, 2]
    span = z.max() - z.min()
    if span <= 1e-12:
        return np.zeros_like(z)
    return (z - z.min()) / span


def bend_vertex(vertex: np.ndarray, height: float, phase: float, max_angle: float) -> np.ndarray:
    """Closed-form bend: rotate a vertex about the y-axis by max_angle*phase*height."""
    return _rotation_matrix(np.array([0.0, 1.0, 0.0]), max_angle * phase * height) @ vertex


def synthesize_animation(kind: str, params: SynthParams | dict | None = None, seed: int = 0) -> MeshAnimation:
    """Deterministic test-data generator over cube/sphere/cylinder primitives.

    kinds: translate (rigid "t * v"), rotate (rigid about an axis), bend
    (smooth per-height rotation about y) and two_part (half the vertices,
    labeled by sign of a canonical coordinate, translate while the rest stay).
    """
    if isinstance(params, dict):
        params = SynthParams(**params)
    p = params or SynthParams()
    if p.base not in _PRIMITIVES:
        raise ValueError(f"unknown base primitive '{p.base}'")
    verts, faces = _PRIMITIVES[p.base]()

    # normalize the rest pose first so frame 0 is bitwise the canonical frame
    scale, center = _unit_cube_transform(verts)
    verts = ((verts.astype(np.float64) - center) * scale).astype(np.float32)

    t_count = int(p.num_frames)
    if t_count < 1:
        raise ValueError("num_frames must be >= 1")
    denom = max(t_count - 1, 1)
    base64 = verts.astype(np.float64)
    frames = np.empty((t_count, verts.shape[0], 3), dtype=np.float32)
    frames[0] = verts

    velocity = np.asarray(p.velocity, dtype=np.float64)
    if kind == "translate":
        for t in range(1, t_count):
            frames[t] = (base64 + t * velocity).astype(np.float32)
    elif kind == "rotate":
        for t in range(1, t_count):
            rot = _rotation_matrix(np.asarray(p.axis), p.total_angle * t / denom)
            frames[t] = (base64 @ rot.T).astype(np.float32)
    elif kind == "bend":
        heights = bend_heights(verts)
        for t in range(1, t_count):
            phase = t / denom
            angles = p.bend_angle * phase * heights
            c, s = np.cos(angles), np.sin(angles)
            x, y, z = base64[:, 0], base64[:, 1], base64[:, 2]
            frames[t] = np.stack([c * x + s * z, y, -s * x + c * z], axis=1).astype(np.float32)
    elif kind == "two_part":
        moving = base64[:, p.split_axis] >= 0.0
        for t in range(1, t_count):
            pos = base64.copy()
            pos[moving] += t * velocity
            frames[t] = pos.astype(np.float32)
    else:
        raise ValueError(f"unknown animation kind '{kind}'")

    rng = np.random.Generator(np.random.Philox(seed))
    colors = np.clip(verts * 0.8 + 0.5 + rng.uniform(-p.color_jitter, p.color_jitter, verts.shape), 0.0, 1.0)
    anim = MeshAnimation(
        vertices_canonical=frames[0].copy(),
        faces=faces,
        frames=frames,
        colors=colors.astype(np.float32),
        frame_rate=p.frame_rate,
        scale=scale,
        offset=center.copy(),
    )
    anim.validate()
    return anim


# ---------------------------------------------------------------------------
# surface sampling and tracks
# ---------------------------------------------------------------------------


def sample_surface(anim: MeshAnimation, n: int, seed: int = 0) -> SampleSpec:
    """Area-weighted face choice + uniform simplex barycentrics (sqrt method)."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if anim.num_faces == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = face_areas(anim.vertices_canonical, anim.faces)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.Generator(np.random.Philox(seed))
    face_ids = rng.choice(anim.num_faces, size=n, p=areas / total)
    u = rng.random((n, 2))
    sqrt_u1 = np.sqrt(u[:, 0])
    bary = np.stack(
        [1.0 - sqrt_u1, sqrt_u1 * (1.0 - u[:, 1]), sqrt_u1 * u[:, 1]], axis=1
    )
    return SampleSpec(face_ids=face_ids.astype(np.int64), barycentrics=bary, seed=seed)


def evaluate_tracks(anim: MeshAnimation, spec: SampleSpec) -> PointTracks:
    """Barycentric point positions per frame plus displacements from frame 0."""
    spec.validate(anim)
    corners = anim.frames.astype(np.float64)[:, anim.faces[spec.face_ids]]  # (T, N, 3, 3)
    points = np.einsum("nj,tnjd->tnd", spec.barycentrics, corners)
    displacements = points - points[0]
    return PointTracks(points=points, displacements=displacements)


def sample_colors(anim: MeshAnimation, spec: SampleSpec, default: float = 0.5) -> np.ndarray:
    """Barycentric interpolation of vertex colors at the sample points."""
    if anim.colors is None:
        return np.full((spec.face_ids.shape[0], 3), default, dtype=np.float64)
    corner_colors = anim.colors.astype(np.float64)[anim.faces[spec.face_ids]]
    return np.einsum("nj,njd->nd", spec.barycentrics, corner_colors)
