"""Per-scene pipeline: correlation map -> matching -> registration -> metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .cpgp import CpgpParams, FusedFeatures, cpgp_forward
from .errors import DegenerateError, EmptyMatchError, InsufficientError, ValidationError
from .matcher import D_TH, match_global, match_patch_constrained, match_precision
from .metrics import FAILED_POSE, evaluate_pose, iou
from .nn import avg_pool
from .pcp import DEFAULT_TAU, PcpParams, pcp_forward
from .registration import RegistrationConfig, register
from .render import lift_tolerance
from .synthgen import gt_patch_correlation
from .tensorio import ScenePair

DOWNSAMPLE = 8
CP_SOURCES = ("oracle", "model")
MATCHERS = ("patch", "global")


@dataclass
class RunConfig:
    scenes: str = ""                 # index.jsonl or a scene manifest
    params: str = ""                 # directory with cpgp/ and pcp/ parameter sets
    output: str = "out"
    grid: int = 8                    # G, query cells per axis
    tau: float = DEFAULT_TAU
    d_th: float = D_TH
    lambda1: float = 1.0
    lambda2: float = 1.0
    matcher: str = "patch"
    cp_source: str = "model"
    mutual: bool = False
    min_count: int = 1
    registration_method: str = "spectral"
    registration: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1

    def validate(self, feature_grid: Optional[int] = None) -> "RunConfig":
        if not 0.0 < float(self.tau) < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")
        if not -1.0 <= float(self.d_th) < 1.0:
            raise ValidationError(f"d_th must lie in [-1, 1), got {self.d_th}")
        if int(self.grid) < 1:
            raise ValidationError(f"grid must be >= 1, got {self.grid}")
        if feature_grid is not None and feature_grid % int(self.grid):
            raise ValidationError(f"grid={self.grid} does not divide the {feature_grid}-cell feature grid")
        if int(self.workers) < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda1 and lambda2 must be nonnegative")
        if self.matcher not in MATCHERS:
            raise ValidationError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.cp_source not in CP_SOURCES:
            raise ValidationError(f"cp_source must be one of {CP_SOURCES}, got {self.cp_source!r}")
        if self.registration_method not in ("spectral", "ransac"):
            raise ValidationError(f"registration_method {self.registration_method!r} is unknown")
        self.registration_config()
        return self

    def registration_config(self) -> RegistrationConfig:
        try:
            return RegistrationConfig(**{"seed": self.seed, **self.registration})
        except TypeError as exc:
            raise ValidationError(f"registration: {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def feature_grid(view, k: int = DOWNSAMPLE) -> np.ndarray:
    """Mask-weighted k x k average pool of the descriptors, unit-normalised.

    Cells without a mask pixel get a zero vector.
    """
    f = view.features.astype(np.float64) * view.mask[..., None]
    g = np.moveaxis(avg_pool(np.moveaxis(f, -1, 0), k), 0, -1)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(n > 0, g / np.maximum(n, 1e-12), 0.0)


@dataclass
class ModelParams:
    cpgp: CpgpParams
    pcp: PcpParams

    @classmethod
    def default(cls, patch: int, channels: int) -> "ModelParams":
        """Identity transformer and pass-through predictor (no trained weights)."""
        return cls(CpgpParams.identity(channels), PcpParams.passthrough(patch))

    @classmethod
    def load(cls, path) -> "ModelParams":
        p = Path(path)
        return cls(CpgpParams.load(p / "cpgp"), PcpParams.load(p / "pcp"))

    def save(self, path):
        p = Path(path)
        self.cpgp.save(p / "cpgp")
        self.pcp.save(p / "pcp")


def predict_correlation(scene: ScenePair, cfg: RunConfig, params: Optional[ModelParams] = None):
    """C_p as an N_p x G x G float array."""
    H, W = scene.anchor.shape
    grid_side = H // DOWNSAMPLE
    if cfg.cp_source == "oracle":
        return gt_patch_correlation(scene, int(cfg.grid), cfg.min_count).astype(np.float64)
    patch = grid_side // int(cfg.grid)
    ga = feature_grid(scene.anchor)
    gq = feature_grid(scene.query)
    if params is None:
        params = ModelParams.default(patch, ga.shape[-1])
    if params.pcp.patch != patch:
        raise ValidationError(f"pcp patch {params.pcp.patch} != {patch} implied by grid={cfg.grid}")
    ea, eq = cpgp_forward(params.cpgp, FusedFeatures.from_map(ga), FusedFeatures.from_map(gq))
    return pcp_forward(params.pcp, ea.as_map(), eq.as_map()).values


def match_scene(scene: ScenePair, C_p, cfg: RunConfig):
    a, q = scene.anchor, scene.query
    kw = dict(cams=(a.camera, q.camera), depths=(a.depth, q.depth), mutual=cfg.mutual)
    if cfg.matcher == "global":
        return match_global(a.features, q.features, a.mask, q.mask, cfg.d_th, **kw)
    return match_patch_constrained(a.features, q.features, a.mask, q.mask, C_p, cfg.tau,
                                   cfg.d_th, **kw)


def correctness_tolerance(scene: ScenePair) -> float:
    """Pairs closer than two splat lifting tolerances after the GT pose count as correct."""
    depth = float(max(scene.anchor.depth.max(), scene.query.depth.max()))
    return 2.0 * lift_tolerance(scene.query.camera, depth)


def run_scene(scene: ScenePair, cfg: RunConfig, params: Optional[ModelParams] = None,
              C_p=None) -> dict:
    """One report row. Matching or registration failures give a failed pose, not an exception."""
    row = {"scene_id": scene.scene_id}
    a, q = scene.anchor, scene.query
    ious = [iou(v.mask, v.gt_mask) for v in (a, q) if v.gt_mask is not None]
    row["iou"] = float(np.mean(ious)) if ious else None
    if C_p is None:
        C_p = predict_correlation(scene, cfg, params)
    try:
        corr = match_scene(scene, C_p, cfg)
        row["n_matches"] = len(corr)
        row["match_precision"] = match_precision(corr, scene.gt_pose, correctness_tolerance(scene))
        est = register(corr, cfg.registration_config(), cfg.registration_method)
    except (EmptyMatchError, InsufficientError, DegenerateError) as exc:
        row.update(FAILED_POSE)
        row.setdefault("n_matches", 0)
        row.setdefault("match_precision", None)
        row["failure"] = f"{type(exc).__name__}: {exc}"
        return row
    row.update(evaluate_pose(scene.model, scene.gt_pose, est.transform, q.camera, q.depth))
    row["inlier_count"] = est.inlier_count
    row["low_confidence"] = est.low_confidence
    row["pose"] = est.transform.matrix().tolist()
    return row
