"""Pinhole cameras, projection, analytic Jacobians and observability.

All functions are vectorized over leading axes: a point argument may be a
single 3-vector or an array of shape (..., 3).  Image coordinates are
normalized (pixel coordinate divided by width / height), so Jacobians and
``sigma_min`` are in units of 1/meter.

Camera frame convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_NEAR = 1e-3


class DegenerateDepthError(ValueError):
    """Raised when a Jacobian is requested at depth <= Z_NEAR."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-10 or np.linalg.det(R) <= 0:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def with_pose(self, R, t) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, R, t)

    def scaled(self, width: int, height: int) -> "CameraModel":
        """Same camera rendered at a different resolution (normalized coords unchanged)."""
        sx, sy = width / self.width, height / self.height
        return CameraModel(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                           width, height, self.R, self.t)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["R"]), np.array(d["t"]))


@dataclass
class ProjectionResult:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    jacobian: np.ndarray  # (..., 2, 3), camera frame
    sigma_min: np.ndarray
    valid: np.ndarray


def world_to_camera(p_world, cam: CameraModel) -> np.ndarray:
    p = np.asarray(p_world, dtype=np.float64)
    return p @ cam.R.T + cam.t


def camera_to_world(p_cam, cam: CameraModel) -> np.ndarray:
    p = np.asarray(p_cam, dtype=np.float64)
    return (p - cam.t) @ cam.R


def _jacobian_unchecked(p_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    X, Y, Z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    ax = cam.fx / cam.width
    ay = cam.fy / cam.height
    J = np.zeros(p_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = ax / Z
    J[..., 0, 2] = -ax * X / (Z * Z)
    J[..., 1, 1] = ay / Z
    J[..., 1, 2] = -ay * Y / (Z * Z)
    return J


def projection_jacobian(p_cam, cam: CameraModel) -> np.ndarray:
    """d(u, v)/d(X, Y, Z) in normalized image coordinates, camera frame.

    Right-multiply by ``cam.R`` for the Jacobian w.r.t. world coordinates.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    if np.any(p[..., 2] <= Z_NEAR):
        raise DegenerateDepthError(f"depth must exceed z_near={Z_NEAR}")
    return _jacobian_unchecked(p, cam)


def sigma_min(J) -> np.ndarray:
    """Smaller singular value of a 2x3 matrix (vectorized over leading axes).

    Uses the Gram matrix J J^T: its determinant equals |r1 x r2|^2 (no
    cancellation), and sigma_min^2 = det / lambda_max.
    """
    J = np.asarray(J, dtype=np.float64)
    r1, r2 = J[..., 0, :], J[..., 1, :]
    a = np.sum(r1 * r1, axis=-1)
    c = np.sum(r2 * r2, axis=-1)
    b = np.sum(r1 * r2, axis=-1)
    det = np.sum(np.cross(r1, r2) ** 2, axis=-1)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(np.where(lam_max > 0, det / lam_max, 0.0))
    return out


def project(p_cam, cam: CameraModel) -> ProjectionResult:
    p = np.asarray(p_cam, dtype=np.float64)
    X, Y, Z = p[..., 0], p[..., 1], p[..., 2]
    front = Z > Z_NEAR
    Zs = np.where(front, Z, 1.0)
    u = (cam.fx * X / Zs + cam.cx) / cam.width
    v = (cam.fy * Y / Zs + cam.cy) / cam.height
    safe = np.where(front[..., None], p, np.array([0.0, 0.0, 1.0]))
    J = _jacobian_unchecked(safe, cam) * front[..., None, None]
    valid = front & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    return ProjectionResult(u, v, Z, J, sigma_min(J), valid)


def unproject(u, v, depth, cam: CameraModel) -> np.ndarray:
    u, v, Z = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    X = (u * cam.width - cam.cx) * Z / cam.fx
    Y = (v * cam.height - cam.cy) * Z / cam.fy
    return np.stack([X, Y, Z], axis=-1)


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def look_from(center, yaw: float, pitch: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """World->camera (R, t) for a camera at ``center`` looking along ``yaw``.

    World z is up; the camera looks horizontally (tilted down by ``pitch``).
    """
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ np.asarray(center, dtype=np.float64)
    return R, t
