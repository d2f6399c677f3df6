"""Training objectives with analytic gradients, plus finite-difference checking.

``loss_feature`` is a hardest-contrastive hinge loss on d = 1 - cos, and
``loss_correlation`` a positive-weighted binary cross-entropy over the patch
correlation map. Gradients are taken with respect to the raw inputs, so the
unit-norm precondition of :class:`MatchBatch` is not needed for them to be
exact (descriptors are renormalised inside).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
M_POS = 0.2
M_NEG = 0.9
SAFE_RADIUS = 4.0


@dataclass
class LossResult:
    value: float
    grad: object
    diagnostics: dict = field(default_factory=dict)


@dataclass
class MatchBatch:
    anchor_feats: np.ndarray       # N x C
    positive_feats: np.ndarray     # N x C, GT partners of the anchors
    positive_pixels: np.ndarray    # N x 2, query pixel (u, v) of each GT partner
    negative_feats: np.ndarray     # M x C, candidate pool
    negative_pixels: np.ndarray    # M x 2

    def __post_init__(self):
        a = self.anchor_feats = np.asarray(self.anchor_feats, dtype=np.float64)
        p = self.positive_feats = np.asarray(self.positive_feats, dtype=np.float64)
        n = self.negative_feats = np.asarray(self.negative_feats, dtype=np.float64).reshape(-1, a.shape[-1])
        self.positive_pixels = np.asarray(self.positive_pixels, dtype=np.float64).reshape(-1, 2)
        self.negative_pixels = np.asarray(self.negative_pixels, dtype=np.float64).reshape(-1, 2)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValidationError("need at least one anchor descriptor (N_m >= 1)")
        if p.shape != a.shape or self.positive_pixels.shape[0] != a.shape[0]:
            raise ValidationError(f"positives {p.shape} do not pair with anchors {a.shape}")
        if self.negative_pixels.shape[0] != n.shape[0]:
            raise ValidationError("one pixel coordinate per negative candidate required")

    def check_unit_norm(self, tol=1e-6):
        for name in ("anchor_feats", "positive_feats", "negative_feats"):
            x = getattr(self, name)
            if len(x) and np.abs(np.linalg.norm(x, axis=1) - 1).max() > tol:
                raise ValidationError(f"{name} rows are not unit-norm")
        return self


def _cosine(a, b):
    """Row-wise cosine and its gradients with respect to a and b."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    ga = b / (na * nb) - cos * a / na ** 2
    gb = a / (na * nb) - cos * b / nb ** 2
    return cos[..., 0], ga, gb


def hardest_negatives(batch: MatchBatch, safe_radius: float = SAFE_RADIUS):
    """Index of the hardest admissible negative per anchor, -1 when none is left."""
    N = batch.anchor_feats.shape[0]
    if batch.negative_feats.shape[0] == 0:
        return np.full(N, -1, dtype=np.int64)
    a = batch.anchor_feats / np.linalg.norm(batch.anchor_feats, axis=1, keepdims=True)
    n = batch.negative_feats / np.linalg.norm(batch.negative_feats, axis=1, keepdims=True)
    dist = 1.0 - a @ n.T
    far = np.linalg.norm(batch.positive_pixels[:, None, :] - batch.negative_pixels[None, :, :],
                         axis=2) > safe_radius
    dist = np.where(far, dist, np.inf)
    idx = np.argmin(dist, axis=1)
    idx[~far.any(axis=1)] = -1
    return idx


def loss_feature(batch: MatchBatch, m_p: float = M_POS, m_n: float = M_NEG,
                 safe_radius: float = SAFE_RADIUS, neg_index=None) -> LossResult:
    """L_P + L_N. ``grad`` holds arrays shaped like the three descriptor inputs.

    ``neg_index`` overrides the mined negatives (one pool index per anchor,
    -1 for none).
    """
    if not 0.0 < m_p < m_n < 2.0:
        raise ValidationError(f"margins must satisfy 0 < m_p < m_n < 2, got {m_p}, {m_n}")
    a, p, n = batch.anchor_feats, batch.positive_feats, batch.negative_feats
    N = a.shape[0]
    ga = np.zeros_like(a)
    gp = np.zeros_like(p)
    gn = np.zeros_like(n)

    cos_p, dca, dcp = _cosine(a, p)
    hinge_p = np.maximum(0.0, (1.0 - cos_p) - m_p)
    L_P = float(np.mean(hinge_p ** 2))
    # dL/dcos = 2 h * (-1) / N
    coef = -2.0 * hinge_p / N
    ga += coef[:, None] * dca
    gp += coef[:, None] * dcp

    idx = hardest_negatives(batch, safe_radius) if neg_index is None else np.asarray(neg_index)
    has = idx >= 0
    L_N = 0.0
    if has.any():
        rows = np.nonzero(has)[0]
        cos_n, dca_n, dcn = _cosine(a[rows], n[idx[rows]])
        hinge_n = np.maximum(0.0, m_n - (1.0 - cos_n))
        L_N = float(np.sum(hinge_n ** 2) / N)
        coef = 2.0 * hinge_n / N
        ga[rows] += coef[:, None] * dca_n
        np.add.at(gn, idx[rows], coef[:, None] * dcn)
    diag = {"L_P": L_P, "L_N": L_N, "n_without_negative": int((~has).sum()),
            "empty_negative_pool": bool(n.shape[0] == 0), "neg_index": idx}
    if not has.all():
        log.debug("loss_feature: %d anchors without an admissible negative", int((~has).sum()))
    return LossResult(L_P + L_N, {"anchor": ga, "positive": gp, "negative": gn}, diag)


def positive_weight(C_gt) -> float:
    """w_p = N_neg / N_pos, or 1 when there are no positives."""
    C_gt = np.asarray(C_gt)
    n_pos = int(np.count_nonzero(C_gt))
    if n_pos == 0:
        return 1.0
    return (C_gt.size - n_pos) / n_pos


def loss_correlation(C_p, C_gt, eps: float = CLAMP_EPS) -> LossResult:
    """Weighted BCE averaged over every entry; ``grad`` is dL/dC_p.

    Entries clamped to [eps, 1-eps] get zero gradient.
    """
    C_p = np.asarray(C_p, dtype=np.float64)
    C_gt = np.asarray(C_gt)
    if C_p.shape != C_gt.shape:
        raise ValidationError(f"C_p {C_p.shape} and C_gt {C_gt.shape} differ")
    if not np.all((C_gt == 0) | (C_gt == 1)):
        raise ValidationError("C_gt must be binary")
    g = C_gt.astype(np.float64)
    diag = {}
    if not g.any():
        log.warning("loss_correlation: ground truth has no positives, using w_p = 1")
        diag["all_negative"] = True
    w_p = positive_weight(g)
    p = np.clip(C_p, eps, 1.0 - eps)
    N = g.size
    loss = -np.sum(w_p * g * np.log(p) + (1.0 - g) * np.log1p(-p)) / N
    grad = -(w_p * g / p - (1.0 - g) / (1.0 - p)) / N
    grad = np.where((C_p < eps) | (C_p > 1.0 - eps), 0.0, grad)
    diag["w_p"] = w_p
    return LossResult(float(loss), grad, diag)


def loss_total(L_F: float, L_C: float, lambda1: float = 1.0, lambda2: float = 1.0) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ValidationError("loss weights must be nonnegative")
    return lambda1 * L_F + lambda2 * L_C


# --------------------------------------------------------------------------
# finite-difference checking

FD_STEP = 1e-5
FD_TOL = 1e-4


def numerical_gradient(f, x, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (which is restored afterwards)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max over components of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_match_batch(rng: np.random.Generator, n_anchor=6, n_neg=10, dim=8,
                       kink_gap: float = 1e-3) -> MatchBatch:
    """Random unit-norm batch kept at least ``kink_gap`` away from hinge and argmin ties.

    Finite differences are only meaningful where the loss is locally smooth,
    so instances sitting on a kink are redrawn.
    """
    while True:
        a = rng.normal(size=(n_anchor, dim))
        # positives near the anchors so some positive hinges are active and some not
        p = a + rng.normal(scale=rng.uniform(0.2, 1.2), size=a.shape)
        neg = rng.normal(size=(n_neg, dim))
        a, p, neg = (x / np.linalg.norm(x, axis=1, keepdims=True) for x in (a, p, neg))
        pix_p = rng.uniform(0, 32, size=(n_anchor, 2))
        pix_n = rng.uniform(0, 32, size=(n_neg, 2))
        b = MatchBatch(a, p, pix_p, neg, pix_n)
        d_pos = 1 - np.sum(a * p, axis=1)
        if np.min(np.abs(d_pos - M_POS)) < kink_gap:
            continue
        dist = 1 - a @ neg.T
        far = np.linalg.norm(pix_p[:, None] - pix_n[None], axis=2) > SAFE_RADIUS
        dist = np.where(far, dist, np.inf)
        srt = np.sort(dist, axis=1)
        ok = True
        for i in range(n_anchor):
            finite = srt[i][np.isfinite(srt[i])]
            if len(finite) >= 2 and finite[1] - finite[0] < kink_gap:
                ok = False
            if len(finite) and abs(finite[0] - M_NEG) < kink_gap:
                ok = False
        if ok:
            return b


def random_correlation_instance(rng: np.random.Generator, shape=(4, 3, 3)):
    C_gt = (rng.random(shape) < 0.3).astype(np.uint8)
    if not C_gt.any():
        C_gt.flat[rng.integers(C_gt.size)] = 1
    C_p = rng.uniform(0.05, 0.95, size=shape)
    return C_p, C_gt


def gradcheck_feature(batch: MatchBatch, h: float = FD_STEP, grad_bias: float = 0.0) -> float:
    """Max relative error of the L_F gradient over all three descriptor inputs.

    ``grad_bias`` perturbs the analytic gradient; it exists to prove the check
    can fail.
    """
    res = loss_feature(batch)
    worst = 0.0
    for key, attr in (("anchor", "anchor_feats"), ("positive", "positive_feats"),
                      ("negative", "negative_feats")):
        x = getattr(batch, attr)
        num = numerical_gradient(lambda: loss_feature(batch).value, x, h)
        worst = max(worst, relative_error(res.grad[key] + grad_bias, num))
    return worst


def gradcheck_correlation(C_p, C_gt, h: float = FD_STEP, grad_bias: float = 0.0) -> float:
    C_p = np.array(C_p, dtype=np.float64)
    res = loss_correlation(C_p, C_gt)
    num = numerical_gradient(lambda: loss_correlation(C_p, C_gt).value, C_p, h)
    return relative_error(res.grad + grad_bias, num)


def run_gradchecks(trials: int = 100, seed: int = 0, grad_bias: float = 0.0,
                   tol: float = FD_TOL) -> list:
    """Rows of (loss name, trial, max relative error, passed)."""
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(trials):
        err = gradcheck_feature(random_match_batch(rng), grad_bias=grad_bias)
        rows.append(("loss_feature", t, err, err < tol))
    for t in range(trials):
        C_p, C_gt = random_correlation_instance(rng)
        err = gradcheck_correlation(C_p, C_gt, grad_bias=grad_bias)
        rows.append(("loss_correlation", t, err, err < tol))
    return rows
