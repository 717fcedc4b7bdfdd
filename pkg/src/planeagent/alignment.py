"""Rigid landmark registration, plane-specific atlas selection and warm-start planes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Plane, dihedral_angle
from .landmarks import LandmarkSet
from .volume import BLOB_SIGMA, Annotation, InvalidPlaneType


class DegenerateConfiguration(ValueError):
    """Point sets that do not determine a rigid transform (coincident or collinear)."""


class InsufficientRecords(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be proper orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """``self`` after ``first``."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def _as_points(x) -> np.ndarray:
    if isinstance(x, LandmarkSet):
        return x.array()
    return np.asarray(x, dtype=float).reshape(-1, 3)


def kabsch(src, dst) -> tuple:
    """Least-squares proper rigid transform mapping ``src`` onto ``dst``.

    Returns ``(transform, rms)`` with ``rms`` the residual after alignment.
    """
    A, B = _as_points(src), _as_points(dst)
    if A.shape != B.shape:
        raise ValueError("point sets must correspond one to one")
    if len(A) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    scale = max(np.abs(A0).max(), np.abs(B0).max(), 1e-300)
    for P in (A0, B0):
        sv = np.linalg.svd(P, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300) or sv[0] <= 1e-12 * scale:
            raise DegenerateConfiguration("points are coincident or collinear")
    U, _, Vt = np.linalg.svd(A0.T @ B0)
    sign = 1.0 if np.linalg.det(Vt.T @ U.T) > 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, sign]) @ U.T
    T = RigidTransform(R, cb - R @ ca)
    rms = float(np.sqrt(np.mean(np.sum((T.apply(A) - B) ** 2, axis=1))))
    return T, rms


def icp_refine(src_cloud, dst_cloud, init: RigidTransform | None = None, max_iter: int = 50, tol: float = 1e-10):
    """Point-to-point ICP. Returns ``(transform, rms_history)``.

    ``rms_history[k]`` is the closest-point RMS under the k-th estimate; it never increases.
    """
    src, dst = _as_points(src_cloud), _as_points(dst_cloud)
    if len(src) == 0 or len(dst) == 0:
        raise DegenerateConfiguration("point clouds must be non-empty")
    tree = cKDTree(dst)
    T = init or RigidTransform.identity()
    dist, idx = tree.query(T.apply(src))
    history = [float(np.sqrt(np.mean(dist**2)))]
    for _ in range(max_iter):
        cand, _ = kabsch(src, dst[idx])
        cdist, cidx = tree.query(cand.apply(src))
        rms = float(np.sqrt(np.mean(cdist**2)))
        if rms > history[-1]:
            break  # rounding only; keep the previous estimate
        improvement = history[-1] - rms
        T, idx = cand, cidx
        history.append(rms)
        if improvement < tol:
            break
    return T, history


def transform_plane(T: RigidTransform, p: Plane) -> Plane:
    """Image of plane ``p`` under ``x -> R x + t``."""
    n = T.rotation @ p.normal
    n = n / np.linalg.norm(n)
    return Plane(n, p.d - float(n @ T.translation))


@dataclass
class AtlasRecord:
    volume_id: str
    landmarks: LandmarkSet
    planes: dict

    @classmethod
    def from_annotation(cls, volume_id, ann: Annotation) -> "AtlasRecord":
        return cls(str(volume_id), LandmarkSet.from_annotation(ann), dict(ann.planes))

    def plane(self, plane_type: str) -> Plane:
        if plane_type not in self.planes:
            raise InvalidPlaneType(f"unknown plane type {plane_type!r}")
        return self.planes[plane_type]


@dataclass(frozen=True)
class AtlasChoice:
    plane_type: str
    volume_id: str
    objective: float

    def to_record(self) -> dict:
        return {"plane_type": self.plane_type, "volume_id": self.volume_id, "objective": self.objective}

    @classmethod
    def from_record(cls, rec: dict) -> "AtlasChoice":
        return cls(rec["plane_type"], str(rec["volume_id"]), float(rec["objective"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AtlasChoice":
        return cls.from_record(json.loads(Path(path).read_text()))


def atlas_objectives(records, plane_type: str, transformed_d: bool = False) -> dict:
    """Per-candidate atlas cost: summed angle (deg) plus offset gap (mm) to every other record.

    By default the offsets are compared untransformed; ``transformed_d`` compares the
    offset of the mapped plane instead.
    """
    recs = sorted(records, key=lambda r: r.volume_id)
    if len(recs) < 2:
        raise InsufficientRecords("atlas selection needs at least two records")
    out = {}
    for ri in recs:
        pi = ri.plane(plane_type)
        total = 0.0
        for rj in recs:
            if rj is ri:
                continue
            pj = rj.plane(plane_type)
            T, _ = kabsch(rj.landmarks, ri.landmarks)
            mapped = transform_plane(T, pj)
            dj = mapped.d if transformed_d else pj.d
            if transformed_d and mapped.normal @ pi.normal < 0:
                dj = -dj
            total += dihedral_angle(mapped, pi) + abs(dj - pi.d)
        out[ri.volume_id] = total
    return out


def select_atlas(records, plane_type: str, transformed_d: bool = False) -> AtlasChoice:
    obj = atlas_objectives(records, plane_type, transformed_d)
    best = min(obj, key=lambda k: (obj[k], k))
    return AtlasChoice(plane_type, best, obj[best])


def _sphere_points(n: int = 32) -> np.ndarray:
    """Fibonacci lattice on the unit sphere."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z**2)
    th = math.pi * (1 + 5**0.5) * k
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def blob_cloud(landmarks: LandmarkSet, radius: float = BLOB_SIGMA, n: int = 32) -> np.ndarray:
    """Surface samples of a sphere around each landmark (ICP input)."""
    s = _sphere_points(n) * radius
    return np.concatenate([p + s for p in landmarks.array()])


def warm_start(test_landmarks: LandmarkSet, atlas: AtlasRecord, plane_type: str, use_icp: bool = False) -> Plane:
    """Map the atlas plane into the test volume through landmark registration."""
    T, _ = kabsch(atlas.landmarks, test_landmarks)
    if use_icp:
        T, _ = icp_refine(blob_cloud(atlas.landmarks), blob_cloud(test_landmarks), T)
    return transform_plane(T, atlas.plane(plane_type))
