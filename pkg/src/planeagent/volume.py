"""Voxel volumes, trilinear sampling, oblique slicing and the procedural head phantom.

Coordinates are millimetres with the origin at the volume centre. Voxel ``(i, j, k)``
sits at ``((i, j, k) - (dims - 1) / 2) * spacing``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .geometry import Plane

LANDMARK_NAMES = ("genu", "splenium", "vermis")
PLANE_TYPES = ("TT", "TC")

DEFAULT_DIMS = (96, 96, 96)
DEFAULT_SPACING = 0.5
SLICE_SIZE = 64
SLICE_RES = 1.0


class InvalidSize(ValueError):
    pass


class InvalidPose(ValueError):
    pass


class InvalidPlaneType(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    spacing: tuple = (DEFAULT_SPACING,) * 3

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError("voxels must be a non-empty 3D grid")
        if not np.all(np.isfinite(vox)):
            raise ValueError("voxels must be finite")
        sp = tuple(float(s) for s in np.broadcast_to(self.spacing, 3))
        if min(sp) <= 0:
            raise ValueError("spacing must be positive")
        vox = vox.copy()
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", sp)
        padded = np.pad(vox.astype(np.float64), 1)
        padded.setflags(write=False)
        object.__setattr__(self, "_padded", padded)

    @property
    def dims(self) -> tuple:
        return self.voxels.shape

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.linalg.norm(np.array(self.dims) * np.array(self.spacing)))

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``dims + (3,)``."""
        axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(self.dims, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts / np.array(self.spacing) + (np.array(self.dims) - 1) / 2.0

    def to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float)
        return (idx - (np.array(self.dims) - 1) / 2.0) * np.array(self.spacing)


@dataclass
class Annotation:
    landmarks: dict
    planes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.landmarks = {k: np.asarray(v, dtype=float).reshape(3) for k, v in self.landmarks.items()}
        pts = [self.landmarks[n] for n in LANDMARK_NAMES if n in self.landmarks]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) < 2.0:
                    raise ValueError("landmarks must be at least 2 mm apart")

    def landmark_array(self) -> np.ndarray:
        return np.stack([self.landmarks[n] for n in LANDMARK_NAMES])

    def plane(self, plane_type: str) -> Plane:
        if plane_type not in self.planes:
            raise InvalidPlaneType(f"unknown plane type {plane_type!r}")
        return self.planes[plane_type]

    def to_record(self) -> dict:
        return {
            "landmarks": {k: [float(x) for x in v] for k, v in self.landmarks.items()},
            "planes": {k: p.to_record() for k, p in self.planes.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Annotation":
        return cls(
            landmarks=rec["landmarks"],
            planes={k: Plane.from_record(v) for k, v in rec.get("planes", {}).items()},
        )


@dataclass(frozen=True, eq=False)
class SliceImage:
    pixels: np.ndarray
    pixel_spacing: float

    @property
    def size(self) -> tuple:
        return self.pixels.shape


def trilinear_sample(v: Volume, points) -> np.ndarray:
    """Trilinear interpolation at world points (..., 3); voxels beyond the grid count as 0."""
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    f = v.to_index(pts.reshape(-1, 3))
    dims = np.array(v.dims)
    outside = np.any((f <= -1.0) | (f >= dims), axis=1)
    f = np.where(outside[:, None], 0.0, f)
    i0 = np.floor(f).astype(np.int64)
    w = f - i0
    i0 += 1  # into the zero-padded grid
    p = v._padded
    x, y, z = i0[:, 0], i0[:, 1], i0[:, 2]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    c00 = p[x, y, z] * (1 - wx) + p[x + 1, y, z] * wx
    c10 = p[x, y + 1, z] * (1 - wx) + p[x + 1, y + 1, z] * wx
    c01 = p[x, y, z + 1] * (1 - wx) + p[x + 1, y, z + 1] * wx
    c11 = p[x, y + 1, z + 1] * (1 - wx) + p[x + 1, y + 1, z + 1] * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    out = c0 * (1 - wz) + c1 * wz
    out[outside] = 0.0
    return out.reshape(shape)


def plane_basis(normal) -> tuple:
    """Deterministic in-plane orthonormal basis (u, v) for a unit normal."""
    n = np.asarray(normal, dtype=float)
    up = np.array([0.0, 0.0, 1.0])
    if abs(n @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    u = np.cross(up, n)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def slice_points(p: Plane, size: int = SLICE_SIZE, res: float = SLICE_RES) -> np.ndarray:
    """World coordinates of the slice grid; row index runs along v, column along u."""
    u, v = plane_basis(p.normal)
    offs = (np.arange(size) - (size - 1) / 2.0) * res
    return p.foot + offs[None, :, None] * u + offs[:, None, None] * v


def extract_slice(v: Volume, p: Plane, size: int = SLICE_SIZE, res: float = SLICE_RES) -> SliceImage:
    if int(size) != size or size < 8:
        raise InvalidSize(f"slice size must be an integer >= 8, got {size}")
    if not res > 0:
        raise InvalidSize(f"slice resolution must be positive, got {res}")
    pix = trilinear_sample(v, slice_points(p, int(size), res))
    return SliceImage(pix, float(res))


# ---------------------------------------------------------------------------
# phantom

# canonical head frame (mm): x superior, y anterior, z left-right
HEAD_AXES = np.array([18.0, 20.0, 16.0])
CANONICAL_LANDMARKS = {
    "genu": np.array([4.0, 13.0, 0.0]),
    "splenium": np.array([6.0, -6.0, 0.0]),
    "vermis": np.array([-10.0, -6.0, 0.0]),
}
BLOB_SIGMA = 2.0
BLOB_AMPLITUDE = 0.5
SPECKLE = 0.2

# (centre, semi-axes, intensity change) in the canonical frame
_STRUCTURES = [
    # thalami
    ((4.0, 2.0, 5.0), (3.0, 4.0, 2.5), 0.25),
    ((4.0, 2.0, -5.0), (3.0, 4.0, 2.5), 0.25),
    # lateral ventricles
    ((9.0, 3.0, 7.0), (2.5, 8.0, 2.0), -0.22),
    ((9.0, 3.0, -7.0), (2.5, 8.0, 2.0), -0.22),
    # cerebellar hemispheres
    ((-10.0, -6.0, 6.5), (4.5, 4.0, 4.0), 0.18),
    ((-10.0, -6.0, -6.5), (4.5, 4.0, 4.0), 0.18),
]


@dataclass(frozen=True)
class Pose:
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(a) for a in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise InvalidPose("rotation and translation need 3 components each")
        if not all(math.isfinite(a) for a in rot + tr + (self.scale,)):
            raise InvalidPose("pose values must be finite")
        if not 0.8 <= self.scale <= 1.2:
            raise InvalidPose(f"scale must be in [0.8, 1.2], got {self.scale}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation, degrees=True).as_matrix()

    def apply(self, canonical_points) -> np.ndarray:
        pts = np.asarray(canonical_points, dtype=float)
        return self.scale * pts @ self.matrix.T + np.array(self.translation)

    def to_record(self) -> dict:
        return {"rotation": list(self.rotation), "translation": list(self.translation), "scale": self.scale}

    @classmethod
    def from_record(cls, rec: dict) -> "Pose":
        return cls(tuple(rec["rotation"]), tuple(rec["translation"]), rec["scale"])


def random_pose(rng: np.random.Generator, max_rotation=30.0, max_translation=3.0, scale_range=(0.9, 1.1)) -> Pose:
    return Pose(
        tuple(rng.uniform(-max_rotation, max_rotation, 3)),
        tuple(rng.uniform(-max_translation, max_translation, 3)),
        float(rng.uniform(*scale_range)),
    )


def _oriented_plane(normal, point, superior) -> Plane:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if n @ superior < 0:
        n = -n
    return Plane(n, -float(n @ point))


def standard_planes(landmarks: dict, lr_axis, superior) -> dict:
    """Ground-truth planes from the landmark triplet and the head's left-right axis.

    TT contains the genu-splenium line and the left-right axis. TC shares the
    left-right hinge through the genu and is tilted to pass through the vermis.
    """
    g, s, v = (np.asarray(landmarks[n], dtype=float) for n in LANDMARK_NAMES)
    lr = np.asarray(lr_axis, dtype=float)
    return {
        "TT": _oriented_plane(np.cross(s - g, lr), g, superior),
        "TC": _oriented_plane(np.cross(v - g, lr), g, superior),
    }


def canonical_annotation() -> Annotation:
    return Annotation(dict(CANONICAL_LANDMARKS), standard_planes(CANONICAL_LANDMARKS, (0, 0, 1), (1, 0, 0)))


def _soft_inside(q: np.ndarray, scale: float, width: float = 0.5) -> np.ndarray:
    """Smooth indicator of ``sqrt(q) < 1`` with an edge of ``width`` mm."""
    s = (np.sqrt(q) - 1.0) * scale
    return 0.5 * (1.0 - np.tanh(s / width))


def _ellipsoid_q(c: np.ndarray, centre, axes) -> np.ndarray:
    # summing components explicitly is much faster than a reduce over a length-3 axis
    return sum(((c[..., k] - centre[k]) / axes[k]) ** 2 for k in range(3))


def _render_anatomy(c: np.ndarray) -> np.ndarray:
    """Intensity of the noise-free head at canonical points ``c`` (..., 3)."""
    zero = (0.0, 0.0, 0.0)
    outer = _soft_inside(_ellipsoid_q(c, zero, HEAD_AXES), float(HEAD_AXES.mean()))
    inner_axes = HEAD_AXES - 1.5
    brain = _soft_inside(_ellipsoid_q(c, zero, inner_axes), float(inner_axes.mean()))
    img = 0.85 * (outer - brain) + 0.3 * brain
    for centre, axes, delta in _STRUCTURES:
        img += delta * _soft_inside(_ellipsoid_q(c, centre, axes), float(np.mean(axes))) * brain
    # falx along the midline
    img += 0.2 * np.exp(-c[..., 2] ** 2 / (2 * 0.5**2)) * brain
    return img


def _coerce_pose(pose) -> Pose:
    if pose is None:
        return Pose()
    if isinstance(pose, dict):
        try:
            return Pose(**pose)
        except (TypeError, KeyError) as exc:
            raise InvalidPose(str(exc)) from exc
    return pose


def phantom_annotation(pose: Pose | None = None) -> Annotation:
    """Exact annotation of a phantom with the given pose, without rendering voxels."""
    pose = _coerce_pose(pose)
    R = pose.matrix
    landmarks = {n: pose.apply(p) for n, p in CANONICAL_LANDMARKS.items()}
    return Annotation(landmarks, standard_planes(landmarks, R[:, 2], R[:, 0]))


def generate_phantom(
    seed: int,
    pose: Pose | None = None,
    dims=DEFAULT_DIMS,
    spacing: float = DEFAULT_SPACING,
    speckle: float = SPECKLE,
) -> tuple:
    """Render a posed head phantom and its exact annotation. Fully determined by the arguments."""
    pose = _coerce_pose(pose)
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    grid = Volume(np.zeros(dims, np.float32), (spacing,) * 3)
    x = grid.voxel_centers()
    R = pose.matrix
    t = np.array(pose.translation)
    canon = ((x - t) @ R) / pose.scale

    img = _render_anatomy(canon)
    ann = phantom_annotation(pose)
    for p in ann.landmarks.values():
        r2 = _ellipsoid_q(x, p, (1.0, 1.0, 1.0))
        img += BLOB_AMPLITUDE * np.exp(-r2 / (2 * BLOB_SIGMA**2))
    img = np.clip(img, 0.0, 1.0)
    if speckle > 0:
        g = gaussian_filter(rng.standard_normal(dims), 1.0)
        g /= g.std()
        img = np.clip(img * (1.0 + speckle * g), 0.0, 1.0)

    return Volume(img.astype(np.float32), (spacing,) * 3), ann


# ---------------------------------------------------------------------------
# files


def save_volume(path, v: Volume, meta: dict | None = None) -> None:
    """Raw little-endian float32, x fastest, plus a ``.json`` sidecar."""
    path = Path(path)
    path.write_bytes(np.asarray(v.voxels, dtype="<f4").tobytes(order="F"))
    sidecar = {"dims": list(v.dims), "spacing": list(v.spacing)}
    sidecar.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_volume(path) -> tuple:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    vox = data.reshape(meta["dims"], order="F")
    return Volume(vox, tuple(meta["spacing"])), meta


def save_annotation(path, ann: Annotation) -> None:
    Path(path).write_text(json.dumps(ann.to_record(), indent=2, sort_keys=True))


def load_annotation(path) -> Annotation:
    return Annotation.from_record(json.loads(Path(path).read_text()))


def write_pgm(path, img: SliceImage) -> None:
    """8-bit binary PGM dump of a slice."""
    pix = np.clip(np.round(np.asarray(img.pixels) * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
