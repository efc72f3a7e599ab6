"""Camera model, rigid transforms and SE(3) Lie-algebra helpers.

Conventions:
  * A `Pose` is T_CW: it maps world points to camera points, x_c = R x_w + t.
  * Pixel centers sit at integer coordinates; the ray through (col, row) has
    camera direction ((col - cx) / fx, (row - cy) / fy, 1).
  * Twists are 6-vectors (rho, phi): translation first, rotation second.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GeometryError

SMALL_ANGLE = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def mean_focal(self):
        return 0.5 * (self.fx + self.fy)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image subsampled by taking every `factor`-th pixel."""
        if factor == 1:
            return self
        return Intrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            (self.width + factor - 1) // factor,
            (self.height + factor - 1) // factor,
        )

    def ray_grid(self):
        """(H, W, 3) camera-frame ray directions with unit z component."""
        cols = (np.arange(self.width) - self.cx) / self.fx
        rows = (np.arange(self.height) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = cols[None, :]
        rays[..., 1] = rows[:, None]
        rays[..., 2] = 1.0
        return rays

    def project(self, points):
        """Project camera-frame points (..., 3) to pixel coordinates (..., 2)."""
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        return np.stack(
            [self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy], axis=-1
        )


def hat(v):
    """Skew-symmetric matrix [v]x."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply `other` first)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def transform(self, points):
        """Apply to points (..., 3)."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=float) @ self.R.T

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def is_valid(self, tol=1e-9):
        return (
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.R) - 1.0) < tol
        )

    def to_tum(self):
        """Camera-to-world (tx, ty, tz, qx, qy, qz, qw)."""
        inv = self.inverse()
        return np.concatenate([inv.t, Rotation.from_matrix(inv.R).as_quat()])

    @classmethod
    def from_tum(cls, values) -> "Pose":
        """Inverse of `to_tum`: builds T_CW from a camera-to-world 7-tuple."""
        values = np.asarray(values, dtype=float)
        c2w = cls(Rotation.from_quat(values[3:7]).as_matrix(), values[:3])
        return c2w.inverse()


def rotation_angle(R):
    """Geodesic angle of a rotation matrix (radians)."""
    cos = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    sin = np.linalg.norm(vee(R))
    return float(np.arctan2(sin, cos))


def exp_so3(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def exp_se3(xi) -> Pose:
    """Exponential map of a twist (rho, phi)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        R = np.eye(3) + K + 0.5 * K @ K
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
        R = np.eye(3) + a * K + b * K @ K
        V = np.eye(3) + b * K + c * K @ K
    return Pose(R, V @ rho)


def log_se3(T: Pose):
    """Logarithm map, inverse of `exp_se3` for rotation angles below pi."""
    R = T.R
    cos = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    w = vee(R)
    sin = np.linalg.norm(w)
    theta = np.arctan2(sin, cos)
    if np.pi - theta < 1e-9:
        raise GeometryError("log_se3 is undefined for a rotation angle of pi (ambiguous axis)")
    if theta < SMALL_ANGLE:
        phi = w * (1.0 + theta**2 / 6.0)
        K = hat(phi)
        V_inv = np.eye(3) - 0.5 * K + K @ K / 12.0
    else:
        phi = w * theta / sin
        K = hat(phi)
        coef = (1.0 - theta * sin / (2.0 * (1.0 - cos))) / theta**2
        V_inv = np.eye(3) - 0.5 * K + coef * K @ K
    return np.concatenate([V_inv @ T.t, phi])


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """T_CW of a camera at `eye` looking at `target` (y axis down, z forward)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ eye)


def backproject(pixel, depth, K: Intrinsics):
    """Camera-frame point seen at `pixel` = (col, row) with the given depth."""
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    col, row = pixel
    return depth * np.array([(col - K.cx) / K.fx, (row - K.cy) / K.fy, 1.0])


def backproject_map(depth, K: Intrinsics):
    """(H, W, 3) camera-frame points of a depth map; invalid pixels map to 0."""
    return K.ray_grid() * depth[..., None]


def compute_normal_map(depth, K: Intrinsics):
    """Unit normals from central differences of back-projected points.

    Normals face the camera. Border pixels and pixels with any invalid
    4-neighbour are returned as zero vectors.
    """
    depth = np.asarray(depth, dtype=float)
    points = backproject_map(depth, K)
    normals = np.zeros_like(points)
    valid = depth > 0
    inner = np.zeros_like(valid)
    inner[1:-1, 1:-1] = (
        valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    )
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok = inner[1:-1, 1:-1] & (norm > 0)
    n = np.where(ok[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    facing = (n * points[1:-1, 1:-1]).sum(-1) > 0
    n[facing] *= -1.0
    normals[1:-1, 1:-1] = n
    return normals


def quat_to_matrix(q):
    """Rotation matrices (..., 3, 3) from quaternions (..., 4) in (w, x, y, z) order.

    Quaternions are normalized first.
    """
    q = np.asarray(q, dtype=float)
    xyzw = np.roll(q.reshape(-1, 4), -1, axis=-1)
    return Rotation.from_quat(xyzw).as_matrix().reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Quaternions (N, 4) in (w, x, y, z) order with w >= 0."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    wxyz = np.roll(np.atleast_2d(xyzw), 1, axis=-1)
    wxyz *= np.where(wxyz[:, :1] < 0, -1.0, 1.0)
    return wxyz if np.ndim(R) == 3 else wxyz[0]


def quat_matrix_backward(q, grad_R):
    """Gradient w.r.t. raw quaternions given dL/dR of the normalized rotation.

    The result is projected onto the tangent space of the unit sphere, which
    is what normalizing inside `quat_to_matrix` implies.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = grad_R
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (
        y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
        - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
        + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
        - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1]
    )
    g = np.stack([gw, gx, gy, gz], axis=-1)
    g = g - qn * (g * qn).sum(-1, keepdims=True)
    return g / norm
