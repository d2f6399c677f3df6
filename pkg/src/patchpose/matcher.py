"""Pixel-level correspondence search between the anchor and query views.

Candidate pools are the masked pixels with valid depth, in row-major order.
Each anchor pixel keeps its single best query pixel (first one on ties) when
the cosine similarity is strictly above ``d_th``. The patch-constrained
variant only lets anchor pixels of patch ``n`` look at query cells that the
binarised correlation row ``n`` switches on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMatchError, ValidationError
from .geometry import apply_transform, lift
from .pcp import DEFAULT_TAU, PatchCorrelationMap, binarize

D_TH = 0.75
PATCH_CONSTRAINED = "patch_constrained"
GLOBAL = "global"


@dataclass
class CorrespondenceSet:
    anchor_px: np.ndarray       # K x 2 int (u, v)
    query_px: np.ndarray        # K x 2 int (u, v)
    src: np.ndarray             # K x 3 anchor-camera points
    dst: np.ndarray             # K x 3 query-camera points
    score: np.ndarray           # K cosine similarities
    provenance: str = PATCH_CONSTRAINED
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.anchor_px = np.asarray(self.anchor_px, dtype=np.int64).reshape(-1, 2)
        self.query_px = np.asarray(self.query_px, dtype=np.int64).reshape(-1, 2)
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        k = len(self.score)
        if not (len(self.anchor_px) == len(self.query_px) == len(self.src) == len(self.dst) == k):
            raise ValidationError("correspondence arrays have different lengths")
        if self.provenance not in (PATCH_CONSTRAINED, GLOBAL):
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.score)

    @classmethod
    def from_points(cls, src, dst, score=None, provenance=GLOBAL) -> "CorrespondenceSet":
        """Bare 3-D pairs (pixel columns filled with -1)."""
        src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
        k = len(src)
        px = np.full((k, 2), -1)
        return cls(px, px, src, dst, np.ones(k) if score is None else score, provenance)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.anchor_px[idx], self.query_px[idx], self.src[idx],
                                 self.dst[idx], self.score[idx], self.provenance,
                                 dict(self.diagnostics))

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"provenance": self.provenance, "count": len(self)}) + "\n")
            for i in range(len(self)):
                fh.write(json.dumps({
                    "anchor_px": self.anchor_px[i].tolist(), "query_px": self.query_px[i].tolist(),
                    "src": self.src[i].tolist(), "dst": self.dst[i].tolist(),
                    "score": float(self.score[i])}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "CorrespondenceSet":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
        if len(rows) != head["count"]:
            raise ValidationError(f"{path}: header says {head['count']} pairs, found {len(rows)}")

        def col(key, width):
            return np.array([r[key] for r in rows]).reshape(-1, width)

        return cls(col("anchor_px", 2), col("query_px", 2), col("src", 3), col("dst", 3),
                   np.array([r["score"] for r in rows]), head["provenance"])


def _pool(mask, depth):
    """Row-major flat indices of masked pixels with positive depth."""
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth)
    return np.nonzero((mask & (depth > 0)).reshape(-1))[0]


def _check_inputs(feat_a, feat_q, mask_a, mask_q, depth_a, depth_q):
    for f, m, d, name in ((feat_a, mask_a, depth_a, "anchor"), (feat_q, mask_q, depth_q, "query")):
        if np.ndim(f) != 3 or np.shape(m) != np.shape(f)[:2] or np.shape(d) != np.shape(f)[:2]:
            raise ValidationError(f"{name}: features {np.shape(f)}, mask {np.shape(m)} and depth "
                                  f"{np.shape(d)} must share H x W")
    if np.shape(feat_a)[2] != np.shape(feat_q)[2]:
        raise ValidationError("anchor and query descriptors differ in channel count")


def upsample_nearest(cells, shape) -> np.ndarray:
    """Nearest-neighbour upsampling of a (..., g1, g2) map to (..., H, W)."""
    g1, g2 = cells.shape[-2:]
    H, W = shape
    if H % g1 or W % g2:
        raise ValidationError(f"{H}x{W} is not a multiple of the {g1}x{g2} cell grid")
    return np.repeat(np.repeat(cells, H // g1, axis=-2), W // g2, axis=-1)


def _match(feat_a, feat_q, pool_a, pool_q, allowed, d_th, mutual):
    """Best allowed query pool index per anchor pool index; -1 where rejected."""
    C = feat_a.shape[-1]
    fa = np.asarray(feat_a, dtype=np.float64).reshape(-1, C)[pool_a]
    fq = np.asarray(feat_q, dtype=np.float64).reshape(-1, C)[pool_q]
    sim = fa @ fq.T
    if allowed is not None:
        sim = np.where(allowed, sim, -np.inf)
    best = np.argmax(sim, axis=1) if sim.shape[1] else np.zeros(len(pool_a), dtype=np.int64)
    score = sim[np.arange(len(pool_a)), best] if sim.shape[1] else np.full(len(pool_a), -np.inf)
    keep = score > d_th
    if mutual and keep.any():
        back = np.argmax(sim, axis=0)
        keep &= back[best] == np.arange(len(pool_a))
    return np.where(keep, best, -1), score


def _assemble(feat_a, feat_q, pool_a, pool_q, best, score, cams, depths, provenance, diag):
    cam_a, cam_q = cams
    depth_a, depth_q = depths
    W_a = np.shape(feat_a)[1]
    W_q = np.shape(feat_q)[1]
    ok = best >= 0
    pa = pool_a[ok]
    pq = pool_q[best[ok]]
    uv_a = np.stack([pa % W_a, pa // W_a], axis=1)
    uv_q = np.stack([pq % W_q, pq // W_q], axis=1)
    src = lift(cam_a, uv_a, np.asarray(depth_a, dtype=np.float64).reshape(-1)[pa])
    dst = lift(cam_q, uv_q, np.asarray(depth_q, dtype=np.float64).reshape(-1)[pq])
    diag = dict(diag, n_pairs=int(ok.sum()))
    if not ok.any():
        raise EmptyMatchError("no pixel pair passed the similarity threshold", diag)
    return CorrespondenceSet(uv_a, uv_q, src, dst, score[ok], provenance, diag)


def match_patch_constrained(feat_a, feat_q, mask_a, mask_q, C_p, tau: float = DEFAULT_TAU,
                            d_th: float = D_TH, cams=None, depths=None,
                            mutual: bool = False) -> CorrespondenceSet:
    """Patch-constrained matching.

    ``C_p`` is an N_p x g1 x g2 map (or :class:`PatchCorrelationMap`); anchor
    patches tile the anchor image row-major on a square grid unless the map
    records its own anchor grid. ``cams`` and ``depths`` are (anchor, query)
    pairs.
    """
    _check_inputs(feat_a, feat_q, mask_a, mask_q, *depths)
    if isinstance(C_p, PatchCorrelationMap):
        grid = C_p.anchor_grid
        values = C_p.values
    else:
        values = np.asarray(C_p)
        side = int(round(np.sqrt(values.shape[0])))
        if side * side != values.shape[0]:
            raise ValidationError(f"cannot infer a square anchor grid from N_p={values.shape[0]}")
        grid = (side, side)
    H_a, W_a = np.shape(mask_a)
    H_q, W_q = np.shape(mask_q)
    if H_a % grid[0] or W_a % grid[1]:
        raise ValidationError(f"anchor {H_a}x{W_a} not divisible by patch grid {grid}")
    active = binarize(values, tau)
    g1, g2 = active.shape[1:]
    if H_q % g1 or W_q % g2:
        raise ValidationError(f"query {H_q}x{W_q} not divisible by cell grid {(g1, g2)}")

    pool_a = _pool(mask_a, depths[0])
    pool_q = _pool(mask_q, depths[1])
    patch_of = (pool_a // W_a) // (H_a // grid[0]) * grid[1] + (pool_a % W_a) // (W_a // grid[1])
    cell_of = (pool_q // W_q) // (H_q // g1) * g2 + (pool_q % W_q) // (W_q // g2)
    allowed = active.reshape(active.shape[0], -1)[patch_of][:, cell_of]
    diag = {"n_anchor_pool": int(len(pool_a)), "n_query_pool": int(len(pool_q)),
            "n_active_cells": int(active.sum()), "tau": float(tau), "d_th": float(d_th),
            "n_patches_skipped": int(np.sum(~allowed.any(axis=1)) if allowed.size else 0)}
    best, score = _match(feat_a, feat_q, pool_a, pool_q, allowed, d_th, mutual)
    return _assemble(feat_a, feat_q, pool_a, pool_q, best, score, cams, depths,
                     PATCH_CONSTRAINED, diag)


def match_global(feat_a, feat_q, mask_a, mask_q, d_th: float = D_TH, cams=None, depths=None,
                 mutual: bool = False) -> CorrespondenceSet:
    """Unconstrained baseline: every masked query pixel is a candidate."""
    _check_inputs(feat_a, feat_q, mask_a, mask_q, *depths)
    pool_a = _pool(mask_a, depths[0])
    pool_q = _pool(mask_q, depths[1])
    diag = {"n_anchor_pool": int(len(pool_a)), "n_query_pool": int(len(pool_q)),
            "d_th": float(d_th)}
    best, score = _match(feat_a, feat_q, pool_a, pool_q, None, d_th, mutual)
    return _assemble(feat_a, feat_q, pool_a, pool_q, best, score, cams, depths, GLOBAL, diag)


def correct_pairs(corr: CorrespondenceSet, T_gt, tolerance: float) -> np.ndarray:
    """Boolean per pair: the GT pose carries src to within ``tolerance`` of dst."""
    if len(corr) == 0:
        return np.zeros(0, dtype=bool)
    return np.linalg.norm(apply_transform(T_gt, corr.src) - corr.dst, axis=1) < tolerance


def match_precision(corr: CorrespondenceSet, T_gt, tolerance: float) -> float:
    if len(corr) == 0:
        return 0.0
    return float(correct_pairs(corr, T_gt, tolerance).mean())
