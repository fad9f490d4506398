"""Pinhole camera geometry, rigid poses and pose-error metrics.

Conventions
-----------
* A pose ``T = (R, t)`` maps world points into the camera frame: ``x = R p + t``.
* The camera frame is x-right, y-down, z-forward. The world up-axis is +Y, so a
  level camera has its y-axis along world -Y and yaw is a rotation about the
  camera y-axis.
* Continuous pixel coordinates are floored onto the integer grid; a point is
  inside the frustum when ``near <= z <= far`` and ``0 <= u < W``,
  ``0 <= v < H``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EMPTY_DEPTH = 0.0


class InvalidDepthError(ValueError):
    """Raised when back-projecting with a non-positive depth."""


@dataclass(frozen=True)
class Se3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Se3Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> Se3Pose:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def compose(self, other: Se3Pose) -> Se3Pose:
        """Standard composition ``self * other`` (apply ``other`` first)."""
        return Se3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> Se3Pose:
        Rt = self.rotation.T
        return Se3Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera position in the world frame."""
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, Se3Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.5
    far: float = 80.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @classmethod
    def default(cls, height: int = 80, width: int = 256) -> CameraIntrinsics:
        # ~71 deg horizontal field of view, like a half-resolution KITTI crop
        f = 0.70 * width
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel nearest depth; ``EMPTY_DEPTH`` marks pixels with no point."""

    depth: np.ndarray

    @property
    def filled(self) -> np.ndarray:
        return self.depth != EMPTY_DEPTH


@dataclass(frozen=True)
class PoseError:
    rre: float
    rte: float


def project_points(points, K: CameraIntrinsics, T: Se3Pose | None = None):
    """Vectorised projection.

    Returns ``(uv, z, inside)``: continuous pixel coordinates (N, 2), camera
    depth (N,) and the in-frustum mask (N,).
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    X = P if T is None else T.apply(P)
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K.fx * X[:, 0] + K.cx * z) / z
        v = (K.fy * X[:, 1] + K.cy * z) / z
    uv = np.stack([u, v], axis=1)
    inside = (
        (z >= K.near) & (z <= K.far)
        & (u >= 0.0) & (u < K.width)
        & (v >= 0.0) & (v < K.height)
    )
    return uv, z, inside


def pixel_indices(uv) -> np.ndarray:
    """Floor continuous pixel coordinates to integer (col, row)."""
    return np.floor(np.asarray(uv)).astype(np.int64)


def project_point(p, K: CameraIntrinsics, T: Se3Pose):
    """Project one point; returns ``(pixel, depth)`` or ``None`` when outside."""
    uv, z, inside = project_points(np.asarray(p, dtype=np.float64)[None], K, T)
    if not inside[0]:
        return None
    return uv[0], float(z[0])


def frustum_mask(points, K: CameraIntrinsics, T: Se3Pose | None = None) -> np.ndarray:
    return project_points(points, K, T)[2]


def zbuffer(points, K: CameraIntrinsics, T: Se3Pose | None = None):
    """Nearest point per pixel.

    Returns ``(flat_pixels, winners, depths)`` for the filled pixels, where
    ``winners`` indexes into ``points``. Equal depths resolve to the lowest
    point index.
    """
    uv, z, inside = project_points(points, K, T)
    idx = np.flatnonzero(inside)
    pix = pixel_indices(uv[idx])
    flat = pix[:, 1] * K.width + pix[:, 0]
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    keep = order[first]
    return flat[keep], idx[keep], z[idx[keep]]


def render_depth_map(points, K: CameraIntrinsics, T: Se3Pose | None = None) -> DepthMap:
    flat, _, depths = zbuffer(points, K, T)
    depth = np.full(K.height * K.width, EMPTY_DEPTH)
    depth[flat] = depths
    return DepthMap(depth.reshape(K.height, K.width))


def back_project(pixel, depth: float, K: CameraIntrinsics, T: Se3Pose) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return back_project_many(np.asarray(pixel, dtype=np.float64)[None], np.array([depth]), K, T)[0]


def back_project_many(uv, depth, K: CameraIntrinsics, T: Se3Pose) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(~(z > 0)):
        raise InvalidDepthError("depth must be positive")
    X = np.stack(
        [(uv[:, 0] - K.cx) * z / K.fx, (uv[:, 1] - K.cy) * z / K.fy, z], axis=1
    )
    return (X - T.translation) @ T.rotation


def yaw_rotation(degrees: float) -> np.ndarray:
    """Rotation about the camera y-axis."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_of(R) -> float:
    """Yaw angle (degrees, in (-180, 180]) of the nearest pure-yaw rotation."""
    R = np.asarray(R)
    return math.degrees(math.atan2(R[0, 2] - R[2, 0], R[0, 0] + R[2, 2]))


def level_camera_pose(center, heading_deg: float) -> Se3Pose:
    """Level camera at ``center`` looking along world heading ``heading_deg``.

    Heading 0 looks down world +Z; the camera y-axis points to world -Y.
    """
    a = math.radians(heading_deg)
    forward = np.array([math.sin(a), 0.0, math.cos(a)])
    down = np.array([0.0, -1.0, 0.0])
    right = np.cross(down, forward)
    R = np.stack([right, down, forward])
    c = np.asarray(center, dtype=np.float64)
    return Se3Pose(R, -R @ c)


def compose_disentangled(action: Se3Pose, current: Se3Pose) -> Se3Pose:
    """Apply an action without rotation-induced translation.

    The rotation pre-multiplies the current rotation while the translations
    simply add, so a pure rotation leaves the translation untouched.
    """
    return Se3Pose(action.rotation @ current.rotation, current.translation + action.translation)


def rotation_angle_deg(R) -> float:
    cos = (np.trace(R) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def pose_error(estimate: Se3Pose, truth: Se3Pose) -> PoseError:
    rre = rotation_angle_deg(estimate.rotation @ truth.rotation.T)
    rte = float(np.linalg.norm(estimate.camera_center() - truth.camera_center()))
    return PoseError(rre, rte)
