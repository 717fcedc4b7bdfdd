"""Plane representation, the 8-action algebra of the search agent, and plane metrics.

A plane is stored as ``n . x + d = 0`` with ``n`` a unit normal whose components are
the direction cosines ``(cos a, cos b, cos p)`` and ``d`` the signed offset (mm) from
the volume-centre origin.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

NORMAL_TOL = 1e-9


class DegenerateNormal(ValueError):
    """Raised when a direction-cosine vector cannot be normalised."""


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if not np.all(np.isfinite(n)) or not math.isfinite(self.d):
            raise ValueError("plane parameters must be finite")
        if abs(np.linalg.norm(n) - 1.0) > NORMAL_TOL:
            raise ValueError(f"normal must be unit length, got |n|={np.linalg.norm(n)}")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_normal(cls, normal, d: float) -> "Plane":
        """Build a plane from an arbitrary non-zero normal, normalising it."""
        n = np.asarray(normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < NORMAL_TOL:
            raise DegenerateNormal("normal vector is numerically zero")
        return cls(n / norm, d)

    @property
    def angles(self) -> np.ndarray:
        """Direction angles (degrees) recovered as arccos of the normal components."""
        return np.degrees(np.arccos(np.clip(self.normal, -1.0, 1.0)))

    @property
    def foot(self) -> np.ndarray:
        """Foot of the perpendicular from the origin."""
        return -self.d * self.normal

    def flipped(self) -> "Plane":
        """Same physical plane with the opposite orientation."""
        return Plane(-self.normal, -self.d)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.d

    def to_record(self) -> dict:
        return {"normal": [float(v) for v in self.normal], "d": self.d}

    @classmethod
    def from_record(cls, rec: dict) -> "Plane":
        return cls.from_normal(rec["normal"], rec["d"])

    def __eq__(self, other):
        if not isinstance(other, Plane):
            return NotImplemented
        return bool(np.array_equal(self.normal, other.normal)) and self.d == other.d

    def __hash__(self):
        return hash((tuple(self.normal), self.d))


class AgentAction(enum.IntEnum):
    """The eight moves: +/- on each of the three direction angles and on d."""

    ALPHA_PLUS = 0
    ALPHA_MINUS = 1
    BETA_PLUS = 2
    BETA_MINUS = 3
    PHI_PLUS = 4
    PHI_MINUS = 5
    D_PLUS = 6
    D_MINUS = 7

    @property
    def inverse(self) -> "AgentAction":
        return AgentAction(self.value ^ 1)

    @property
    def axis(self) -> int:
        """0, 1, 2 for the angular actions, 3 for the offset."""
        return self.value // 2

    @property
    def sign(self) -> int:
        return -1 if self.value & 1 else 1


N_ACTIONS = len(AgentAction)


@dataclass(frozen=True)
class StepSizes:
    angle_step: float = 1.0
    dist_step: float = 0.5

    def __post_init__(self):
        if not (self.angle_step > 0 and self.dist_step > 0):
            raise ValueError("step sizes must be strictly positive")


@dataclass(frozen=True)
class PlaneMetrics:
    ang_deg: float
    dis_mm: float


def plane_from_angles(alpha: float, beta: float, phi: float, d: float) -> Plane:
    """Plane from direction angles in degrees; the cosine vector is normalised."""
    cosines = np.cos(np.radians([alpha, beta, phi]))
    # cos(90 deg) is ~6e-17, not 0
    cosines[np.abs(cosines) < 1e-15] = 0.0
    return Plane.from_normal(cosines, d)


def apply_action(p: Plane, a: AgentAction, s: StepSizes = StepSizes()) -> Plane:
    """Apply one agent action.

    Angular actions move the targeted direction angle by ``angle_step`` and rescale the
    two remaining components so the normal stays unit length. This is a rotation of the
    normal on the great circle through the targeted axis, so every action is exactly
    undone by its inverse.
    """
    a = AgentAction(a)
    if a.axis == 3:
        return Plane(p.normal, p.d + a.sign * s.dist_step)

    k = a.axis
    n = p.normal
    angle = math.acos(min(1.0, max(-1.0, n[k]))) + a.sign * math.radians(s.angle_step)
    rest = n.copy()
    rest[k] = 0.0
    rest_norm = np.linalg.norm(rest)
    if rest_norm < 1e-12:
        # normal lies on the axis: rotate towards the next axis in cyclic order
        rest = np.zeros(3)
        rest[(k + 1) % 3] = 1.0
    else:
        rest /= rest_norm
    out = math.sin(angle) * rest
    out[k] = math.cos(angle)
    norm = np.linalg.norm(out)
    if norm < NORMAL_TOL:
        raise DegenerateNormal("action produced a zero normal")
    return Plane(out / norm, p.d)


def dihedral_angle(p1: Plane, p2: Plane) -> float:
    """Unoriented angle between two planes in degrees, in [0, 90]."""
    # atan2 form: arccos(|n1.n2|) loses ~1e-6 degrees near parallel normals
    c = abs(float(np.dot(p1.normal, p2.normal)))
    s = float(np.linalg.norm(np.cross(p1.normal, p2.normal)))
    return math.degrees(math.atan2(s, c))


def offset_difference(p1: Plane, p2: Plane) -> float:
    """|d1 - d2| after orienting p2 consistently with p1."""
    d2 = p2.d if np.dot(p1.normal, p2.normal) >= 0 else -p2.d
    return abs(p1.d - d2)


def plane_metrics(pred: Plane, gt: Plane) -> PlaneMetrics:
    return PlaneMetrics(dihedral_angle(pred, gt), offset_difference(pred, gt))


def plane_param_distance(p1: Plane, p2: Plane) -> float:
    """Distance in (angle deg, offset mm) space; 1 degree weighs as 1 mm."""
    return math.hypot(dihedral_angle(p1, p2), offset_difference(p1, p2))


def reward(prev: Plane, cur: Plane, gt: Plane) -> int:
    """+1 if ``cur`` is closer to ``gt`` than ``prev``, -1 if farther, else 0."""
    delta = plane_param_distance(prev, gt) - plane_param_distance(cur, gt)
    return int(np.sign(delta))
