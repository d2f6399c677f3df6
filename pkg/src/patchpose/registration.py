"""Robust rigid registration of 3-D correspondence sets.

``register_spectral`` is a spectral spatial-consistency solver: pairs whose
mutual distances agree between the two frames support each other, the
leading eigenvector of that compatibility graph seeds a weighted Kabsch fit,
and a few rounds of residual-based reweighting refine it.

``register_ransac`` is the cross-check: 3-point hypothesize-and-verify whose
minimal solver is a batched numpy SVD, independent of the Jacobi-based
:func:`patchpose.geometry.kabsch_weighted` used by the spectral solver.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateError, InsufficientError, ValidationError
from .geometry import RigidTransform, apply_transform, kabsch_weighted
from .kernels import compatibility_matrix
from .matcher import CorrespondenceSet


@dataclass
class RegistrationConfig:
    sigma_d: float = 0.02
    n_power_iters: int = 50
    n_reweight_iters: int = 5
    inlier_threshold: float = 0.015
    ransac_iters: int = 2048
    min_pairs: int = 3
    max_pairs: int = 1500
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_d", "inlier_threshold"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"registration.{name} must be positive")
        for name in ("n_power_iters", "ransac_iters", "max_pairs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"registration.{name} must be >= 1")
        if self.n_reweight_iters < 0:
            raise ValidationError("registration.n_reweight_iters must be >= 0")
        if self.min_pairs < 3:
            raise ValidationError("registration.min_pairs must be >= 3")

    def to_dict(self):
        return asdict(self)


@dataclass
class PoseEstimate:
    transform: RigidTransform
    inlier_count: int
    rms_residual: float
    low_confidence: bool = False
    method: str = "spectral"
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"matrix": self.transform.matrix().tolist(), "inlier_count": int(self.inlier_count),
                "rms_residual": float(self.rms_residual), "low_confidence": bool(self.low_confidence),
                "method": self.method, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d) -> "PoseEstimate":
        return cls(RigidTransform.from_matrix(d["matrix"]), int(d["inlier_count"]),
                   float(d["rms_residual"]), bool(d["low_confidence"]), d.get("method", "spectral"),
                   dict(d.get("diagnostics", {})))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PoseEstimate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def power_iteration(M, n_iters: int = 50, v0=None) -> np.ndarray:
    """Leading eigenvector of a symmetric matrix, unit norm, first nonzero entry positive."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n)) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    v /= np.linalg.norm(v)
    for _ in range(n_iters):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if len(nz) and v[nz[0]] < 0:
        v = -v
    return v


def residuals(T: RigidTransform, src, dst) -> np.ndarray:
    return np.linalg.norm(apply_transform(T, src) - dst, axis=1)


def _select(corr: CorrespondenceSet, cfg: RegistrationConfig):
    n = len(corr)
    if n < cfg.min_pairs:
        raise InsufficientError(f"{n} correspondences, need at least {cfg.min_pairs}")
    if not (np.all(np.isfinite(corr.src)) and np.all(np.isfinite(corr.dst))):
        raise ValidationError("correspondence points must be finite")
    if n <= cfg.max_pairs:
        return np.arange(n)
    # highest scores first, index order on ties
    order = np.lexsort((np.arange(n), -corr.score))
    return np.sort(order[:cfg.max_pairs])


def _finish(T, src, dst, cfg, method, diag):
    r = residuals(T, src, dst)
    inl = r < cfg.inlier_threshold
    n_inl = int(inl.sum())
    rms = float(np.sqrt(np.mean(r[inl] ** 2))) if n_inl else float(np.sqrt(np.mean(r ** 2)))
    return PoseEstimate(T, n_inl, rms, n_inl < cfg.min_pairs, method, diag)


def register_spectral(corr: CorrespondenceSet, cfg: RegistrationConfig = None) -> PoseEstimate:
    cfg = cfg or RegistrationConfig()
    keep = _select(corr, cfg)
    src, dst = corr.src[keep], corr.dst[keep]
    M = compatibility_matrix(src, dst, cfg.sigma_d)
    w = np.abs(power_iteration(M, cfg.n_power_iters))
    diag = {"n_used": int(len(keep))}
    if np.count_nonzero(w) < 3:
        # no mutually consistent structure at all; fall back to uniform weights
        w = np.ones(len(src))
        diag["uniform_seed"] = True
    T = kabsch_weighted(src, dst, w)
    rounds = 0
    for _ in range(cfg.n_reweight_iters):
        r = residuals(T, src, dst)
        w = np.where(r < cfg.inlier_threshold, 1.0 - r / cfg.inlier_threshold, 0.0)
        if np.count_nonzero(w) < 3:
            break
        try:
            T = kabsch_weighted(src, dst, w)
        except DegenerateError:
            break
        rounds += 1
    diag["reweight_rounds"] = rounds
    return _finish(T, src, dst, cfg, "spectral", diag)


def _batched_kabsch(P, Q):
    """Unweighted Kabsch for stacks of point triples, P, Q: (B, k, 3)."""
    cp = P.mean(axis=1, keepdims=True)
    cq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", P - cp, Q - cq)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", Vt, U)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = np.einsum("bji,bjk,blk->bil", Vt, D, U)
    t = cq[:, 0] - np.einsum("bij,bj->bi", R, cp[:, 0])
    return R, t, S


def _svd_fit(src, dst):
    R, t, S = _batched_kabsch(src[None], dst[None])
    if S[0, 1] <= 1e-12 * S[0, 0]:
        raise DegenerateError("consensus set is degenerate")
    return RigidTransform(R[0], t[0])


def register_ransac(corr: CorrespondenceSet, cfg: RegistrationConfig = None,
                    batch: int = 256) -> PoseEstimate:
    cfg = cfg or RegistrationConfig()
    keep = _select(corr, cfg)
    src, dst = corr.src[keep], corr.dst[keep]
    n = len(src)
    rng = np.random.default_rng(cfg.seed)
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(cfg.ransac_iters)])
    best_count = -1
    best_T = None
    n_degenerate = 0
    for start in range(0, len(samples), batch):
        idx = samples[start:start + batch]
        P, Q = src[idx], dst[idx]
        # a sample is degenerate when its source triangle has (near) zero area
        area = np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)
        ok = area > 1e-9
        n_degenerate += int((~ok).sum())
        if not ok.any():
            continue
        R, t, _ = _batched_kabsch(P[ok], Q[ok])
        pred = np.einsum("bij,nj->bni", R, src) + t[:, None, :]
        counts = (np.linalg.norm(pred - dst[None], axis=2) < cfg.inlier_threshold).sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count = int(counts[j])
            best_T = RigidTransform(R[j], t[j])
    diag = {"n_used": int(n), "n_degenerate_samples": n_degenerate}
    if best_T is None:
        raise DegenerateError("every RANSAC sample was degenerate")
    T = best_T
    for _ in range(2):
        inl = residuals(T, src, dst) < cfg.inlier_threshold
        if inl.sum() < 3:
            break
        try:
            T = _svd_fit(src[inl], dst[inl])
        except DegenerateError:
            break
    return _finish(T, src, dst, cfg, "ransac", diag)


def register(corr: CorrespondenceSet, cfg: RegistrationConfig = None,
             method: str = "spectral") -> PoseEstimate:
    if method == "spectral":
        return register_spectral(corr, cfg)
    if method == "ransac":
        return register_ransac(corr, cfg)
    raise ValidationError(f"unknown registration method {method!r}")
