"""Plane-localisation metrics and method-level evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .geometry import Plane, dihedral_angle, offset_difference
from .volume import SLICE_RES, SLICE_SIZE, SliceImage, extract_slice

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class DimensionMismatch(ValueError):
    pass


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over the fully covered region, Gaussian 11x11 window with sigma 1.5."""
    x = np.asarray(a.pixels if isinstance(a, SliceImage) else a, dtype=np.float64)
    y = np.asarray(b.pixels if isinstance(b, SliceImage) else b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionMismatch(f"images differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionMismatch(f"images must be at least {SSIM_WINDOW} pixels on a side")
    w = _gaussian_window()

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


@dataclass
class MethodResult:
    method: str
    case_ids: list = field(default_factory=list)
    ang: list = field(default_factory=list)
    dis: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, case_id, ang: float, dis: float, s: float) -> None:
        if not -1.0 - 1e-9 <= s <= 1.0 + 1e-9:
            raise ValueError(f"SSIM out of range: {s}")
        self.case_ids.append(str(case_id))
        self.ang.append(float(ang))
        self.dis.append(float(dis))
        self.ssim.append(float(s))

    def __len__(self):
        return len(self.case_ids)

    def mean(self, metric: str) -> float:
        return float(np.mean(getattr(self, metric)))

    def std(self, metric: str) -> float:
        return float(np.std(getattr(self, metric)))

    def summary_row(self) -> dict:
        row = {"method": self.method, "n": len(self)}
        for m in ("ang", "dis", "ssim"):
            row[f"{m}_mean"] = self.mean(m)
            row[f"{m}_std"] = self.std(m)
        return row


def score_plane(case_id, v, gt: Plane, pred: Plane, result: MethodResult, size: int = SLICE_SIZE, res: float = SLICE_RES) -> None:
    s = ssim(extract_slice(v, pred, size, res), extract_slice(v, gt, size, res))
    result.add(case_id, dihedral_angle(pred, gt), offset_difference(pred, gt), s)


def evaluate_method(cases, localize, plane_type: str, name: str = "method") -> MethodResult:
    """``cases`` yields ``(case_id, volume, annotation)``; ``localize`` maps the same triple to a Plane."""
    result = MethodResult(name)
    for case_id, v, ann in cases:
        score_plane(case_id, v, ann.plane(plane_type), localize(case_id, v, ann), result)
    return result


RESULT_COLUMNS = ["method", "case_id", "ang_deg", "dis_mm", "ssim"]
SUMMARY_COLUMNS = ["method", "n", "ang_mean", "ang_std", "dis_mean", "dis_std", "ssim_mean", "ssim_std"]


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            for cid, a, d, s in zip(r.case_ids, r.ang, r.dis, r.ssim):
                w.writerow([r.method, cid, f"{a:.6f}", f"{d:.6f}", f"{s:.6f}"])


def write_summary_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            row = r.summary_row()
            w.writerow([row["method"], row["n"]] + [f"{row[c]:.6f}" for c in SUMMARY_COLUMNS[2:]])
