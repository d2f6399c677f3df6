"""Pose and mask evaluation: ADD, MSSD, MSPD, VSD, AR and mIoU.

Recall thresholds follow the BOP conventions: MSSD at 5..50 % of the object
diameter, MSPD at 5..50 px scaled by image width / 640, and VSD over a
10 x 10 grid of misalignment tolerances (5..50 % of the diameter) and
correctness thresholds (0.05..0.5). Every threshold comparison is strict.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .errors import ValidationError
from .geometry import PinholeCamera, RigidTransform, apply_transform, project
from .render import render_points

log = logging.getLogger(__name__)

ADD_FRACTION = 0.1
MSSD_FRACTIONS = np.arange(1, 11) * 0.05
MSPD_PIXELS = np.arange(1, 11) * 5.0
VSD_TAU_FRACTIONS = np.arange(1, 11) * 0.05
VSD_THETAS = np.arange(1, 11) * 0.05
VSD_DELTA = 0.015
# values this close (relative) to a threshold count as sitting on it, so
# summation rounding cannot turn a boundary case into a pass
_TIE_RTOL = 1e-12


def compute_diameter(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    try:
        pts = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        pass
    if len(pts) < 2:
        return 0.0
    return float(pdist(pts).max())


@dataclass
class ObjectModel:
    points: np.ndarray
    diameter: float
    symmetries: Optional[List[RigidTransform]] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 100:
            raise ValidationError(f"object model needs >= 100 points, got {len(self.points)}")
        true_d = compute_diameter(self.points)
        if not abs(self.diameter - true_d) <= 0.01 * true_d:
            raise ValidationError(
                f"declared diameter {self.diameter:.6f} differs from point-set diameter {true_d:.6f}")
        if not self.symmetries:
            self.symmetries = [RigidTransform.identity()]

    @property
    def identity_only(self) -> bool:
        return (len(self.symmetries) == 1
                and np.array_equal(self.symmetries[0].matrix(), np.eye(4)))


def add_error(model: ObjectModel, T_gt: RigidTransform, T_est: RigidTransform):
    """Mean model-point distance and whether it is below 10 % of the diameter."""
    dR = T_gt.rotation - T_est.rotation
    dt = T_gt.translation - T_est.translation
    d = float(np.linalg.norm(model.points @ dR.T + dt, axis=1).mean())
    return d, bool(d < ADD_FRACTION * model.diameter * (1.0 - _TIE_RTOL))


def mssd_mspd(model: ObjectModel, T_gt: RigidTransform, T_est: RigidTransform,
              cam: PinholeCamera):
    p_gt = apply_transform(T_gt, model.points)
    uv_gt = project(cam, p_gt)
    mssd = np.inf
    mspd = np.inf
    for S in model.symmetries:
        p_est = apply_transform(T_est @ S, model.points)
        mssd = min(mssd, float(np.linalg.norm(p_gt - p_est, axis=1).max()))
        front = (p_gt[:, 2] > 0) & (p_est[:, 2] > 0)
        if not front.all():
            log.warning("mspd: %d model points behind the camera excluded", int((~front).sum()))
        if front.any():
            uv_est = project(cam, p_est[front])
            mspd = min(mspd, float(np.linalg.norm(uv_gt[front] - uv_est, axis=1).max()))
    return mssd, mspd


def mssd_recall(mssd: float, diameter: float) -> float:
    return float(np.mean(mssd < MSSD_FRACTIONS * diameter * (1.0 - _TIE_RTOL)))


def mspd_recall(mspd: float, image_width: int) -> float:
    return float(np.mean(mspd < MSPD_PIXELS * (image_width / 640.0) * (1.0 - _TIE_RTOL)))


def vsd_errors(model: ObjectModel, T_gt, T_est, cam: PinholeCamera, depth_test,
               delta: float = VSD_DELTA):
    """Per-tolerance VSD errors, or ``None`` when neither pose renders visible pixels."""
    depth_test = np.asarray(depth_test, dtype=np.float64)
    r_gt, _ = render_points(model.points, cam, T_gt)
    r_est, _ = render_points(model.points, cam, T_est)
    free = depth_test <= 0
    visib_gt = (r_gt > 0) & (free | (r_gt <= depth_test + delta))
    visib_est = (r_est > 0) & (free | (r_est <= depth_test + delta))
    union = visib_gt | visib_est
    n_union = int(union.sum())
    if n_union == 0:
        return None
    inter = visib_gt & visib_est
    diff = np.abs(r_est - r_gt)[inter]
    n_outside = n_union - int(inter.sum())
    taus = VSD_TAU_FRACTIONS * model.diameter
    return np.array([(n_outside + int((diff > tau).sum())) / n_union for tau in taus])


def vsd_recall(model: ObjectModel, T_gt, T_est, cam: PinholeCamera, depth_gt) -> float:
    errs = vsd_errors(model, T_gt, T_est, cam, depth_gt)
    if errs is None:
        log.warning("vsd: empty rendered visibility mask, recall set to 0")
        return 0.0
    return float(np.mean(errs[:, None] < VSD_THETAS[None, :]))


def iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(masks_pred, masks_gt) -> float:
    if len(masks_pred) != len(masks_gt):
        raise ValidationError("need one ground-truth mask per predicted mask")
    if len(masks_pred) == 0:
        return 1.0
    return float(np.mean([iou(p, g) for p, g in zip(masks_pred, masks_gt)]))


def average_recall(vsd: float, mssd: float, mspd: float) -> float:
    return (vsd + mssd + mspd) / 3.0


def evaluate_pose(model: ObjectModel, T_gt, T_est, cam: PinholeCamera, depth_test) -> dict:
    """All pose metrics for one scene as a flat dict."""
    add, add_ok = add_error(model, T_gt, T_est)
    mssd, mspd = mssd_mspd(model, T_gt, T_est, cam)
    r_vsd = vsd_recall(model, T_gt, T_est, cam, depth_test)
    r_mssd = mssd_recall(mssd, model.diameter)
    r_mspd = mspd_recall(mspd, cam.width)
    return {"add": add, "add_correct": add_ok, "mssd": mssd, "mspd": mspd,
            "vsd_recall": r_vsd, "mssd_recall": r_mssd, "mspd_recall": r_mspd,
            "ar": average_recall(r_vsd, r_mssd, r_mspd)}


FAILED_POSE = {"add": None, "add_correct": False, "mssd": None, "mspd": None,
               "vsd_recall": 0.0, "mssd_recall": 0.0, "mspd_recall": 0.0, "ar": 0.0}


@dataclass
class EvalReport:
    scenes: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        rows = [s for s in self.scenes if "ar" in s]
        if not rows:
            return {"n_scenes": 0}
        adds = [s["add"] for s in rows if s.get("add") is not None]
        out = {
            "n_scenes": len(rows),
            "n_errors": len(self.errors),
            "ar": float(np.mean([s["ar"] for s in rows])),
            "vsd_recall": float(np.mean([s["vsd_recall"] for s in rows])),
            "mssd_recall": float(np.mean([s["mssd_recall"] for s in rows])),
            "mspd_recall": float(np.mean([s["mspd_recall"] for s in rows])),
            "add_accuracy": float(np.mean([bool(s["add_correct"]) for s in rows])),
            "mean_add": float(np.mean(adds)) if adds else None,
        }
        ious = [s["iou"] for s in rows if s.get("iou") is not None]
        if ious:
            out["miou"] = float(np.mean(ious))
        precs = [s["match_precision"] for s in rows if s.get("match_precision") is not None]
        if precs:
            out["match_precision"] = float(np.mean(precs))
        return out

    def to_dict(self) -> dict:
        return {"config": self.config,
                "aggregate": self.aggregates(),
                "scenes": sorted(self.scenes, key=lambda s: s["scene_id"]),
                "errors": sorted(self.errors, key=lambda e: e["scene_id"])}
