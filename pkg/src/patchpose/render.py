"""Point-splat depth rendering shared by the scene generator and VSD."""
import numpy as np

from .geometry import PinholeCamera, RigidTransform, apply_transform, project
from .kernels import splat_zbuffer

SPLAT_RADIUS = 1
# points within this depth of the front-most splat count as the same surface
SURFACE_TOLERANCE = 0.03


def render_points(points, cam: PinholeCamera, T: RigidTransform = None,
                  radius: int = SPLAT_RADIUS, depth_tol: float = SURFACE_TOLERANCE):
    """Splat camera-frame (or ``T``-mapped) points; returns ``(depth, owner)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if T is not None:
        pts = apply_transform(T, pts)
    uv = project(cam, pts)
    return splat_zbuffer(uv[:, 0], uv[:, 1], pts[:, 2], cam.height, cam.width,
                         radius, depth_tol)


def lift_tolerance(cam: PinholeCamera, depth: float, radius: int = SPLAT_RADIUS) -> float:
    """Bound on the distance between a splatted point and its pixel-centre lift."""
    return float(np.sqrt(2.0) * (radius + 0.5) * depth / min(cam.fx, cam.fy))
