"""Rigid transforms, pinhole cameras and weighted Kabsch alignment.

Everything here works in float64 regardless of the storage dtype of the
inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, ValidationError
from .kernels import sym3_eigh

_ORTHO_TOL = 1e-9
_BUILD_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("rigid transform entries must be finite")
        # loose guard against non-rotations; is_valid() is the strict check
        if np.abs(R.T @ R - np.eye(3)).max() > _BUILD_TOL or abs(np.linalg.det(R) - 1.0) > _BUILD_TOL:
            raise ValidationError("rotation block is not a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValidationError(f"expected 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def is_valid(self, tol: float = _ORTHO_TOL) -> bool:
        R = self.rotation
        return (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))
                and np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera resolution must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def from_intrinsics(cls, K, width: int, height: int) -> "PinholeCamera":
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            raise ValidationError("intrinsics must be a finite 3x3 matrix")
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
                   int(width), int(height))

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)


def apply_transform(T: RigidTransform, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return pts @ T.rotation.T + T.translation


def project(cam: PinholeCamera, pts) -> np.ndarray:
    """Continuous pixel coordinates (u, v) of camera-frame points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pts[:, 0] / z + cam.cx
        v = cam.fy * pts[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


def lift(cam: PinholeCamera, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uv[:, 0] - cam.cx) / cam.fx * d
    y = (uv[:, 1] - cam.cy) / cam.fy * d
    return np.stack([x, y, d], axis=1)


def backproject(depth, mask, cam: PinholeCamera):
    """Lift masked pixels with positive depth into the camera frame.

    Returns ``(pixels, points)`` where ``pixels`` is a K x 2 integer array of
    (u, v) = (column, row) and ``points`` the matching K x 3 coordinates.
    Pixels come out in row-major order.
    """
    depth = np.asarray(depth)
    mask = np.asarray(mask)
    if depth.shape != cam.shape or mask.shape != cam.shape:
        raise ValidationError(
            f"depth {depth.shape} / mask {mask.shape} do not match camera {cam.shape}")
    valid = (mask != 0) & (depth > 0)
    v, u = np.nonzero(valid)
    pixels = np.stack([u, v], axis=1).astype(np.int64)
    return pixels, lift(cam, pixels, depth[v, u])


def rotation_error_deg(R_gt, R_est) -> float:
    """Geodesic angle arccos((tr(R_gtᵀR_est) - 1) / 2) in degrees.

    Evaluated as atan2(sin, cos) of the relative rotation, which keeps full
    precision for tiny angles where arccos does not.
    """
    Q = np.asarray(R_gt, dtype=np.float64).T @ np.asarray(R_est, dtype=np.float64)
    c = (np.trace(Q) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([Q[2, 1] - Q[1, 2], Q[0, 2] - Q[2, 0], Q[1, 0] - Q[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def rotation_about_axis(axis, angle_rad) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # uniform via unit quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.uniform(-max_translation, max_translation, size=3))


def kabsch_weighted(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid alignment mapping ``src`` onto ``dst``.

    The 3x3 SVD of the cross-covariance H is obtained from the Jacobi
    eigen-decomposition of HᵀH: right singular vectors V are its
    eigenvectors, the first two left singular vectors are H v_i / s_i and the
    third is their cross product, which folds the reflection correction into
    the decomposition. With det V = +1 the optimum is then R = V Uᵀ.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValidationError(f"src {src.shape} and dst {dst.shape} differ")
    n = src.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ValidationError("one weight per pair required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and nonnegative")
    if n < 3 or np.count_nonzero(w) < 3:
        raise DegenerateError(f"need at least 3 positively weighted pairs, got {np.count_nonzero(w)}")

    wsum = w.sum()
    cs = w @ src / wsum
    cd = w @ dst / wsum
    A = src - cs
    B = dst - cd
    H = (A * w[:, None]).T @ B

    evals, V = sym3_eigh(H.T @ H)
    s = np.sqrt(np.clip(evals, 0.0, None))
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateError("cross-covariance has rank < 2 (colinear points)")
    if np.linalg.det(V) < 0:
        V[:, 2] = -V[:, 2]
    u1 = H @ V[:, 0] / s[0]
    u1 /= np.linalg.norm(u1)
    u2 = H @ V[:, 1] / s[1]
    u2 -= (u2 @ u1) * u1
    u2 /= np.linalg.norm(u2)
    U = np.stack([u1, u2, np.cross(u1, u2)], axis=1)
    R = V @ U.T
    return RigidTransform(R, cd - R @ cs)
