"""Pointmaps, pinhole cameras, rigid transforms and the evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BehindCamera,
    EmptySet,
    NonOrthonormalInput,
    NoVisiblePoints,
    ShapeMismatch,
)

EPS_DEPTH = 1e-6
ORTHO_TOL = 1e-9


# ----------------------------------------------------------------------------
# Rotations
# ----------------------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-8:
        # second-order Taylor keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * v


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_geodesic(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle in radians of the relative rotation Ra^T Rb."""
    return float(np.linalg.norm(so3_log(Ra.T @ Rb)))


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NonOrthonormalInput(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise NonOrthonormalInput("rotation is not orthonormal with det +1")


# ----------------------------------------------------------------------------
# Poses and cameras
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t (world to camera when attached to a camera)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls()


def compose_pose(a: Pose, b: Pose) -> Pose:
    """Return a∘b, i.e. apply b first and then a."""
    check_rotation(a.rotation)
    check_rotation(b.rotation)
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert_pose(a: Pose) -> Pose:
    check_rotation(a.rotation)
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; rotation/translation map world points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        check_rotation(self.rotation)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width is not None and not 0 <= self.cx <= self.width:
            raise ValueError("cx outside image")
        if self.height is not None and not 0 <= self.cy <= self.height:
            raise ValueError("cy outside image")

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_pose(self, pose: Pose) -> "CameraModel":
        return replace(self, rotation=pose.rotation, translation=pose.translation)

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(np.array(d["rotation"]), np.array(d["translation"]), d["fx"], d["fy"],
                   d["cx"], d["cy"], d.get("width"), d.get("height"))


def project(point: Sequence[float], camera: CameraModel) -> np.ndarray:
    """Project one world point to pixel coordinates (u, v)."""
    pc = camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation
    if pc[2] <= EPS_DEPTH:
        raise BehindCamera(f"camera-frame depth {pc[2]:.3g} <= {EPS_DEPTH}")
    return np.array([camera.fx * pc[0] / pc[2] + camera.cx, camera.fy * pc[1] / pc[2] + camera.cy])


def project_points(points: np.ndarray, camera: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection of (..., 3) world points.

    Returns ``(uv, depth, in_front)``. Entries with ``in_front == False`` have
    undefined ``uv`` (set to nan) and must be masked by the caller.
    """
    pc = points @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    in_front = z > EPS_DEPTH
    zs = np.where(in_front, z, np.nan)
    uv = np.stack([camera.fx * pc[..., 0] / zs + camera.cx, camera.fy * pc[..., 1] / zs + camera.cy], axis=-1)
    return uv, z, in_front


def projection_jacobian(pc: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """d(u, v)/d(camera-frame point), shape (..., 2, 3)."""
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    J = np.zeros(pc.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / z**2
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / z**2
    return J


def unproject(uv: np.ndarray, depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Inverse of :func:`project` given camera-frame depth; returns world points."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - camera.cx) / camera.fx * depth
    y = (uv[..., 1] - camera.cy) / camera.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return (pc - camera.translation) @ camera.rotation


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel-centre coordinates (u, v); centres sit on integers."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([u, v], axis=-1)


# ----------------------------------------------------------------------------
# Containers
# ----------------------------------------------------------------------------

@dataclass
class Pointmap:
    """Dense H×W grid of 3D points plus validity mask.

    ``source_frame`` is the frame whose pixels the grid is indexed by,
    ``target_time`` the time at which the points are evaluated.
    """

    points: np.ndarray
    valid: np.ndarray
    source_frame: int
    target_time: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ShapeMismatch(f"points must be (H, W, 3), got {self.points.shape}")
        if self.valid.shape != self.points.shape[:2]:
            raise ShapeMismatch("valid mask shape does not match points")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise ValueError("valid points must be finite")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def is_reconstruction(self) -> bool:
        return self.source_frame == self.target_time

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def transformed(self, pose: Pose) -> "Pointmap":
        return Pointmap(pose.apply(self.points), self.valid.copy(), self.source_frame, self.target_time)


@dataclass
class TrajectorySet:
    positions: np.ndarray  # (Q, T, 3)
    visible: np.ndarray  # (Q, T)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ShapeMismatch(f"positions must be (Q, T, 3), got {self.positions.shape}")
        if self.visible.shape != self.positions.shape[:2]:
            raise ShapeMismatch("visible shape does not match positions")
        if self.visible.size and not np.all(self.visible.any(axis=1)):
            raise ValueError("every query must be visible in at least one frame")

    @property
    def num_queries(self) -> int:
        return self.positions.shape[0]

    @property
    def frames(self) -> int:
        return self.positions.shape[1]


@dataclass
class MetricReport:
    apd_thresholds: list[float]
    apd_values: list[float]
    chamfer_cm: float
    num_points: int
    wall_time_s: float = 0.0

    def __post_init__(self):
        if len(self.apd_values) != len(self.apd_thresholds):
            raise ShapeMismatch("one APD value per threshold")
        if any(b < a for a, b in zip(self.apd_values, self.apd_values[1:])):
            raise ValueError("APD must be non-decreasing in threshold")


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------

def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance in centimetres between two point sets in metres.

    Uses non-squared nearest-neighbour distances averaged per direction.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance needs two non-empty point sets")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("point sets must be finite")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    # ordered the same way regardless of argument order so CD(a,b) == CD(b,a) bitwise
    m1, m2 = float(np.mean(d_ab)), float(np.mean(d_ba))
    lo, hi = min(m1, m2), max(m1, m2)
    return 100.0 * 0.5 * (lo + hi)


def apd(predicted: TrajectorySet, truth: TrajectorySet, thresholds: Sequence[float]) -> list[float]:
    """Percent of truth-visible (query, frame) pairs with 3D error below each threshold."""
    if predicted.positions.shape != truth.positions.shape:
        raise ShapeMismatch(f"{predicted.positions.shape} vs {truth.positions.shape}")
    thresholds = [float(t) for t in thresholds]
    if not thresholds or thresholds[0] <= 0 or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be positive and strictly increasing")
    mask = truth.visible
    if not mask.any():
        raise NoVisiblePoints("no truth-visible (query, frame) pairs")
    err = np.linalg.norm(predicted.positions[mask] - truth.positions[mask], axis=-1)
    return [100.0 * float(np.count_nonzero(err < d)) / err.size for d in thresholds]


# ----------------------------------------------------------------------------
# PLY export
# ----------------------------------------------------------------------------

def write_ply(pointmap: Pointmap | np.ndarray, path: str | Path) -> int:
    """Write valid points as ASCII PLY; returns the vertex count."""
    pts = pointmap.valid_points() if isinstance(pointmap, Pointmap) else np.asarray(pointmap).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines.extend(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts)
    Path(path).write_text("\n".join(lines) + "\n")
    return len(pts)


def read_ply(path: str | Path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n = None
    for k, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line.strip() == "end_header":
            body = text[k + 1:k + 1 + (n or 0)]
            break
    else:
        raise ValueError("PLY header not terminated")
    if n is None:
        raise ValueError("PLY missing vertex element")
    pts = np.array([[float(v) for v in row.split()[:3]] for row in body], dtype=np.float64).reshape(-1, 3)
    if len(pts) != n:
        raise ValueError(f"expected {n} vertices, found {len(pts)}")
    return pts
