"""Patch correlation predictor.

Cross-view similarity volume -> per-anchor-patch split -> a small conv stack
over the query grid -> a P x P / stride P aggregation -> softmax over query
cells. Anchor patches are indexed row-major over the anchor grid; the GT maps
built by :func:`patchpose.synthgen.gt_patch_correlation` use the same order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ValidationError
from .nn import conv2d, relu, softmax, xavier_uniform
from .tensorio import load_param_dir, save_param_dir

BN_EPS = 1e-5
DEFAULT_TAU = 0.04


@dataclass
class ConvBlock:
    weight: np.ndarray      # (P^2, P^2, 3, 3)
    bias: np.ndarray        # (P^2,)
    bn_gain: np.ndarray
    bn_bias: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray

    def __call__(self, x):
        y = conv2d(x, self.weight, self.bias, padding=1)
        scale = self.bn_gain / np.sqrt(self.bn_var + BN_EPS)
        y = (y - self.bn_mean[None, :, None, None]) * scale[None, :, None, None]
        return relu(y + self.bn_bias[None, :, None, None])


@dataclass
class PcpParams:
    patch: int
    blocks: List[ConvBlock] = field(default_factory=list)
    final_weight: np.ndarray = None   # (1, P^2, P, P)
    final_bias: np.ndarray = None     # (1,)

    def __post_init__(self):
        P2 = self.patch ** 2
        if self.patch < 1:
            raise ValidationError("patch size must be >= 1")
        if len(self.blocks) < 1:
            raise ValidationError("need at least one conv block (L2 >= 1)")
        for b in self.blocks:
            if b.weight.shape != (P2, P2, 3, 3):
                raise ValidationError(f"conv block weight {b.weight.shape} != {(P2, P2, 3, 3)}")
        if self.final_weight.shape != (1, P2, self.patch, self.patch):
            raise ValidationError(f"final weight {self.final_weight.shape} inconsistent with P={self.patch}")

    @property
    def n_blocks(self):
        return len(self.blocks)

    @classmethod
    def init(cls, patch: int = 2, n_blocks: int = 2, seed: int = 0) -> "PcpParams":
        rng = np.random.default_rng(seed)
        P2 = patch * patch
        blocks = [ConvBlock(xavier_uniform(rng, P2 * 9, P2 * 9, (P2, P2, 3, 3)), np.zeros(P2),
                            np.ones(P2), np.zeros(P2), np.zeros(P2), np.ones(P2))
                  for _ in range(n_blocks)]
        fw = xavier_uniform(rng, P2 * P2, P2, (1, P2, patch, patch))
        return cls(patch, blocks, fw, np.zeros(1))

    @classmethod
    def passthrough(cls, patch: int = 2, n_blocks: int = 2, gain: float = 10.0,
                    mode: str = "diagonal") -> "PcpParams":
        """Untrained parameters whose output is a softmax of pooled similarity.

        Conv blocks are identity (centre tap), batch-norm is the identity.
        ``mode="diagonal"`` averages, for each query cell, the similarity of
        anchor patch slot (dy, dx) with query position (dy, dx) in the cell;
        ``mode="block"`` averages all P^2 x P^2 slot/position pairs.
        ``gain`` is the softmax inverse temperature.
        """
        P2 = patch * patch
        ident = np.zeros((P2, P2, 3, 3))
        ident[np.arange(P2), np.arange(P2), 1, 1] = 1.0
        blocks = [ConvBlock(ident.copy(), np.zeros(P2), np.ones(P2), np.zeros(P2),
                            np.zeros(P2), np.ones(P2)) for _ in range(n_blocks)]
        fw = np.zeros((1, P2, patch, patch))
        if mode == "diagonal":
            for k in range(P2):
                fw[0, k, k // patch, k % patch] = gain / P2
        elif mode == "block":
            fw[:] = gain / (P2 * P2)
        else:
            raise ValidationError(f"unknown passthrough mode {mode!r}")
        return cls(patch, blocks, fw, np.zeros(1))

    def save(self, out_dir):
        tensors = {"final_weight": self.final_weight, "final_bias": self.final_bias}
        for i, b in enumerate(self.blocks):
            for name in ("weight", "bias", "bn_gain", "bn_bias", "bn_mean", "bn_var"):
                tensors[f"block{i}_{name}"] = getattr(b, name)
        save_param_dir(out_dir, tensors, {"patch": self.patch, "n_blocks": self.n_blocks}, "pcp")

    @classmethod
    def load(cls, in_dir) -> "PcpParams":
        t, cfg = load_param_dir(in_dir, "pcp")
        blocks = [ConvBlock(*(t[f"block{i}_{n}"] for n in
                              ("weight", "bias", "bn_gain", "bn_bias", "bn_mean", "bn_var")))
                  for i in range(cfg["n_blocks"])]
        return cls(int(cfg["patch"]), blocks, t["final_weight"], t["final_bias"])


@dataclass
class PatchCorrelationMap:
    values: np.ndarray    # N_p x (H2/P) x (W2/P)
    anchor_grid: tuple    # (G1, G2)

    @property
    def n_patches(self):
        return self.values.shape[0]


def similarity_map(feat_a, feat_q) -> np.ndarray:
    """S[q, y, x] = <E^Q_q, E^A_(y, x)>, shape (H2*W2, H1, W1)."""
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_q = np.asarray(feat_q, dtype=np.float64)
    if feat_a.ndim != 3 or feat_q.ndim != 3 or feat_a.shape[-1] != feat_q.shape[-1]:
        raise ValidationError(f"feature maps {feat_a.shape} / {feat_q.shape} need matching channels")
    H2, W2, C = feat_q.shape
    return np.einsum("qc,yxc->qyx", feat_q.reshape(H2 * W2, C), feat_a, optimize=True)


def patch_split(S, patch: int, query_hw) -> np.ndarray:
    """(H2*W2, H1, W1) -> (N_p, P^2, H2, W2)."""
    Q, H1, W1 = S.shape
    H2, W2 = query_hw
    P = patch
    if H1 % P or W1 % P or H2 % P or W2 % P or Q != H2 * W2:
        raise ValidationError(f"dims {(H1, W1)} / {(H2, W2)} not divisible by patch {P}")
    G1, G2 = H1 // P, W1 // P
    x = S.reshape(H2, W2, G1, P, G2, P).transpose(2, 4, 3, 5, 0, 1)
    return np.ascontiguousarray(x).reshape(G1 * G2, P * P, H2, W2)


def patch_unsplit(X, patch: int, anchor_hw) -> np.ndarray:
    Np, P2, H2, W2 = X.shape
    H1, W1 = anchor_hw
    P = patch
    G1, G2 = H1 // P, W1 // P
    if G1 * G2 != Np or P * P != P2:
        raise ValidationError("patch tensor inconsistent with anchor dims")
    x = X.reshape(G1, G2, P, P, H2, W2).transpose(4, 5, 0, 2, 1, 3)
    return np.ascontiguousarray(x).reshape(H2 * W2, H1, W1)


def pcp_forward(params: PcpParams, feat_a, feat_q) -> PatchCorrelationMap:
    H1, W1, _ = np.shape(feat_a)
    H2, W2, _ = np.shape(feat_q)
    P = params.patch
    if H1 % P or W1 % P or H2 % P or W2 % P:
        raise ValidationError(f"feature grids {(H1, W1)} / {(H2, W2)} not divisible by patch {P}")
    x = patch_split(similarity_map(feat_a, feat_q), P, (H2, W2))
    for block in params.blocks:
        x = block(x)
    logits = conv2d(x, params.final_weight, params.final_bias, stride=P)[:, 0]
    Np = logits.shape[0]
    probs = softmax(logits.reshape(Np, -1), axis=1)
    return PatchCorrelationMap(probs.reshape(Np, H2 // P, W2 // P), (H1 // P, W1 // P))


def binarize(values, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Query patch masks: cells strictly above ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    if isinstance(values, PatchCorrelationMap):
        values = values.values
    return np.asarray(values) > tau


def anchor_patch_mask(n: int, grid, shape) -> np.ndarray:
    """Full-resolution footprint of anchor patch ``n`` on a ``grid`` = (G1, G2) layout."""
    G1, G2 = grid
    H, W = shape
    ch, cw = H // G1, W // G2
    m = np.zeros((H, W), dtype=bool)
    gy, gx = divmod(n, G2)
    m[gy * ch:(gy + 1) * ch, gx * cw:(gx + 1) * cw] = True
    return m
