"""Rigid SE(3) poses and point-level alignment of historical frames.

Conventions:
    - A Pose ``(R, t)`` maps a point ``p`` to ``R @ p + t``.
    - Ego poses are ego-to-world.  The transform taking frame ``k`` into the
      current frame ``t`` is ``inverse(ego_t) o ego_k``.
    - ``pose_compose(a, b)`` applies ``b`` first, then ``a``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rotation (3x3, orthonormal, det +1) plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_ypr(cls, yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0,
                 translation: Sequence[float] = (0.0, 0.0, 0.0)) -> Pose:
        """Build from intrinsic z-y-x angles in radians: ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
        return cls(ypr_to_matrix(yaw, pitch, roll), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single 3-vector)."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_json(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict | str) -> Pose:
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(obj["translation"], dtype=np.float64))

    def __repr__(self):
        return f"Pose(yaw={self.yaw:.4f}, t={self.translation.tolist()})"


def ypr_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -(Rt @ a.translation))


def relative_pose(ego_hist: Pose, ego_cur: Pose) -> Pose:
    """Transform from the historical ego frame into the current ego frame."""
    return pose_compose(pose_inverse(ego_cur), ego_hist)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in meters with a scalar intensity each.

    ``timestamp_index`` is 0 for the current frame and positive for past frames.
    """

    points: np.ndarray
    intensity: np.ndarray = field(default=None)
    timestamp_index: int = 0

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 3)
        inten = np.zeros(len(pts)) if self.intensity is None else self.intensity
        inten = _frozen(inten).reshape(-1)
        if len(inten) != len(pts):
            raise ValueError("one intensity per point is required")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if len(inten) and (inten.min() < 0.0 or inten.max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "timestamp_index", int(self.timestamp_index))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, timestamp_index: int = 0) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0), timestamp_index)


def transform_points(pose: Pose, pts: PointCloud) -> PointCloud:
    """Map every point through ``pose``; intensities and frame index are kept."""
    return PointCloud(pose.apply(pts.points), pts.intensity, pts.timestamp_index)
