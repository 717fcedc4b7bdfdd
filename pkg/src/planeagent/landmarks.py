"""Landmark detection on phantom volumes by matched filtering.

A Gaussian blob template is correlated with the volume (normalised cross-correlation),
local maxima near the expected positions become candidates, and the three labels are
assigned jointly so that the genu/splenium pair on the midline cannot swap.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.signal import fftconvolve

from .volume import CANONICAL_LANDMARKS, LANDMARK_NAMES, Annotation, Volume, _ellipsoid_q


class LowConfidence(RuntimeError):
    """The best correlation for some landmark is below the usable threshold."""


@dataclass
class LandmarkSet:
    points: dict
    confidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.points) != set(LANDMARK_NAMES):
            raise ValueError(f"landmark names must be exactly {LANDMARK_NAMES}")
        self.points = {n: np.asarray(self.points[n], dtype=float).reshape(3) for n in LANDMARK_NAMES}
        if not all(np.all(np.isfinite(p)) for p in self.points.values()):
            raise ValueError("landmark coordinates must be finite")
        self.confidence = {n: float(self.confidence.get(n, 1.0)) for n in LANDMARK_NAMES}

    def array(self) -> np.ndarray:
        return np.stack([self.points[n] for n in LANDMARK_NAMES])

    @classmethod
    def from_array(cls, pts, confidence=None) -> "LandmarkSet":
        return cls(dict(zip(LANDMARK_NAMES, np.asarray(pts, dtype=float))), confidence or {})

    @classmethod
    def from_annotation(cls, ann: Annotation) -> "LandmarkSet":
        return cls(dict(ann.landmarks))

    def to_record(self) -> dict:
        # same layout as Annotation records
        return {"landmarks": {n: [float(x) for x in p] for n, p in self.points.items()}, "confidence": self.confidence}

    @classmethod
    def from_record(cls, rec: dict) -> "LandmarkSet":
        return cls(rec["landmarks"], rec.get("confidence", {}))


@dataclass(frozen=True)
class HeatmapSpec:
    sigma: float = 2.0
    radius: int | None = None  # voxels; defaults to ceil(2 sigma / spacing)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def radius_for(self, spacing: float) -> int:
        r_min = math.ceil(2.0 * self.sigma / spacing - 1e-9)
        if self.radius is None:
            return r_min
        if self.radius < r_min:
            raise ValueError(f"template radius must be >= {r_min} voxels")
        return self.radius


def gaussian_heatmap(v: Volume, center, spec: HeatmapSpec = HeatmapSpec()) -> Volume:
    """Gaussian map exp(-|x - c|^2 / 2 sigma^2) on the grid of ``v``."""
    c = np.asarray(center, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("center must be finite")
    r2 = _ellipsoid_q(v.voxel_centers(), c, (1.0, 1.0, 1.0))
    return Volume(np.exp(-r2 / (2 * spec.sigma**2)), v.spacing)


def _template(spec: HeatmapSpec, spacing: float) -> tuple:
    """Gaussian template and its spherical support mask."""
    r = spec.radius_for(spacing)
    ax = np.arange(-r, r + 1) * spacing
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = X**2 + Y**2 + Z**2
    mask = r2 <= (r * spacing) ** 2 + 1e-9
    return np.exp(-r2 / (2 * spec.sigma**2)) * mask, mask.astype(float)


def ncc_map(v: Volume, spec: HeatmapSpec = HeatmapSpec()) -> np.ndarray:
    """Normalised cross-correlation of the volume with the blob template at every voxel.

    The correlation window is the template's spherical support.
    """
    if len(set(v.spacing)) != 1:
        raise ValueError("matched filtering needs isotropic spacing")
    t, mask = _template(spec, v.spacing[0])
    n = mask.sum()
    t0 = (t - t[mask > 0].mean()) * mask
    vox = v.voxels.astype(np.float64)

    def corr(a, k):
        return fftconvolve(a, k[::-1, ::-1, ::-1], mode="same")

    num = corr(vox, t0)
    s1 = corr(vox, mask)
    s2 = corr(vox**2, mask)
    var = np.maximum(s2 - s1**2 / n, 0.0)
    out = np.zeros_like(num)
    ok = var > 1e-8 * n
    out[ok] = num[ok] / (np.sqrt(var[ok]) * np.linalg.norm(t0))
    return np.clip(out, -1.0, 1.0)


def detect_landmarks(
    v: Volume,
    spec: HeatmapSpec = HeatmapSpec(),
    priors: dict | None = None,
    search_radius: float = 15.0,
    min_score: float = 0.3,
    max_candidates: int = 12,
    distance_tolerance: float = 0.3,
) -> LandmarkSet:
    """Locate genu, splenium and vermis.

    Candidates are local NCC maxima inside each landmark's prior ball. The returned
    triple maximises the summed correlation among triples whose pairwise distances are
    within ``distance_tolerance`` (relative) of the prior configuration; if no such
    triple exists, each landmark falls back to its own best candidate.
    """
    priors = {n: np.asarray(p, float) for n, p in (priors or CANONICAL_LANDMARKS).items()}
    score = ncc_map(v, spec)
    centers = v.voxel_centers()
    peaks = (score == maximum_filter(score, size=3, mode="constant", cval=-np.inf)) & (score > 0)

    cands = {}
    for name in LANDMARK_NAMES:
        near = _ellipsoid_q(centers, priors[name], (1.0, 1.0, 1.0)) <= search_radius**2
        idx = np.argwhere(peaks & near)
        if len(idx) == 0:
            idx = np.argwhere(near)
        s = score[tuple(idx.T)]
        # higher score first, then lexicographic voxel index
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -s))[:max_candidates]
        cands[name] = [(float(s[o]), tuple(int(c) for c in idx[o])) for o in order]

    for name in LANDMARK_NAMES:
        if not cands[name] or cands[name][0][0] < min_score:
            best = cands[name][0][0] if cands[name] else 0.0
            raise LowConfidence(f"{name}: best correlation {best:.3f} < {min_score}")

    ref = {(a, b): np.linalg.norm(priors[a] - priors[b]) for a, b in itertools.combinations(LANDMARK_NAMES, 2)}
    best_key, best_choice = None, None
    for choice in itertools.product(*(cands[n] for n in LANDMARK_NAMES)):
        vox = [c[1] for c in choice]
        if len(set(vox)) < 3:
            continue
        pts = dict(zip(LANDMARK_NAMES, (centers[c] for c in vox)))
        if any(abs(np.linalg.norm(pts[a] - pts[b]) - d) > distance_tolerance * d for (a, b), d in ref.items()):
            continue
        key = (sum(c[0] for c in choice), tuple(-np.array(vox).ravel()))
        if best_key is None or key > best_key:
            best_key, best_choice = key, choice
    if best_choice is None:
        best_choice = tuple(cands[n][0] for n in LANDMARK_NAMES)

    points, conf = {}, {}
    for name, (s, vox) in zip(LANDMARK_NAMES, best_choice):
        points[name] = _refine_peak(score, vox, v)
        conf[name] = min(1.0, max(0.0, s))
    return LandmarkSet(points, conf)


def _refine_peak(score: np.ndarray, vox: tuple, v: Volume) -> np.ndarray:
    """Sub-voxel peak by a per-axis parabola through the 3-point neighbourhood."""
    idx = np.array(vox, dtype=float)
    for ax in range(3):
        lo, hi = list(vox), list(vox)
        lo[ax] -= 1
        hi[ax] += 1
        if lo[ax] < 0 or hi[ax] >= score.shape[ax]:
            continue
        a, b, c = score[tuple(lo)], score[vox], score[tuple(hi)]
        den = a - 2 * b + c
        if den < 0:
            idx[ax] += float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
    return v.to_world(idx)


def perturbed_oracle(ann: Annotation, noise_mm: float, seed: int) -> LandmarkSet:
    """Ground-truth landmarks plus isotropic Gaussian noise (std ``noise_mm`` per axis)."""
    if noise_mm < 0:
        raise ValueError("noise_mm must be non-negative")
    rng = np.random.default_rng(seed)
    pts = ann.landmark_array() + rng.normal(0.0, noise_mm, (3, 3)) if noise_mm > 0 else ann.landmark_array()
    return LandmarkSet.from_array(pts)
