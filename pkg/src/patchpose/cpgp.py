"""Cross-view transformer, text-fusion stand-in and mask-guided decoder.

Forward passes only. Layers are pre-layer-norm residual blocks: per-view
self-attention, then bidirectional cross-attention (anchor tokens attend to
query tokens and vice versa), then a feed-forward sublayer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ValidationError
from .nn import avg_pool, conv2d, layer_norm, relu, softmax, upsample_bilinear2x, xavier_uniform
from .tensorio import load_param_dir, save_param_dir


@dataclass
class FusedFeatures:
    tokens: np.ndarray      # (H*W) x C
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.height * self.width:
            raise ValidationError(
                f"{self.tokens.shape[0]} tokens for a {self.height}x{self.width} grid")

    @classmethod
    def from_map(cls, fmap) -> "FusedFeatures":
        fmap = np.asarray(fmap, dtype=np.float64)
        H, W, C = fmap.shape
        return cls(fmap.reshape(H * W, C), H, W)

    def as_map(self):
        return self.tokens.reshape(self.height, self.width, -1)


# --------------------------------------------------------------------------
# text fusion

@dataclass
class FusionParams:
    w_visual: np.ndarray    # C_v x C_in
    w_text: np.ndarray      # C_t x C_in
    ln_gain: np.ndarray
    ln_bias: np.ndarray

    @classmethod
    def init(cls, c_visual, c_text, c_in, seed=0):
        rng = np.random.default_rng(seed)
        return cls(xavier_uniform(rng, c_visual, c_in), xavier_uniform(rng, c_text, c_in),
                   np.ones(c_in), np.zeros(c_in))

    @classmethod
    def identity(cls, c_visual, c_text):
        return cls(np.eye(c_visual), np.zeros((c_text, c_visual)) + np.eye(c_text, c_visual),
                   np.ones(c_visual), np.zeros(c_visual))


def fuse_text(params: FusionParams, visual, text_embed) -> FusedFeatures:
    """Per pixel: LN(v' + (W_t e) * v') with v' = W_v v."""
    visual = np.asarray(visual, dtype=np.float64)
    text_embed = np.asarray(text_embed, dtype=np.float64).reshape(-1)
    if visual.ndim != 3 or visual.shape[-1] != params.w_visual.shape[0]:
        raise ValidationError(f"visual features {visual.shape} do not match W_v {params.w_visual.shape}")
    if text_embed.shape[0] != params.w_text.shape[0]:
        raise ValidationError(f"text embedding dim {text_embed.shape[0]} != {params.w_text.shape[0]}")
    H, W, Cv = visual.shape
    v = visual.reshape(H * W, Cv) @ params.w_visual
    g = text_embed @ params.w_text
    out = layer_norm(v + g[None, :] * v, params.ln_gain, params.ln_bias)
    return FusedFeatures(out, H, W)


# --------------------------------------------------------------------------
# transformer

@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __call__(self, x_q, x_kv, n_heads, trace=None):
        n, d = x_q.shape
        m = x_kv.shape[0]
        dh = d // n_heads
        q = (x_q @ self.wq).reshape(n, n_heads, dh).transpose(1, 0, 2)
        k = (x_kv @ self.wk).reshape(m, n_heads, dh).transpose(1, 0, 2)
        v = (x_kv @ self.wv).reshape(m, n_heads, dh).transpose(1, 0, 2)
        attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
        if trace is not None:
            trace.append(attn)
        out = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        return out @ self.wo


@dataclass
class CpgpLayer:
    self_attn: Attention
    cross_attn: Attention
    ln_self: tuple          # (gain, bias)
    ln_cross: tuple
    ln_ffn: tuple
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, xa, xq, n_heads, trace=None):
        ha = layer_norm(xa, *self.ln_self)
        hq = layer_norm(xq, *self.ln_self)
        xa = xa + self.self_attn(ha, ha, n_heads, trace)
        xq = xq + self.self_attn(hq, hq, n_heads, trace)
        ha = layer_norm(xa, *self.ln_cross)
        hq = layer_norm(xq, *self.ln_cross)
        xa, xq = (xa + self.cross_attn(ha, hq, n_heads, trace),
                  xq + self.cross_attn(hq, ha, n_heads, trace))
        x = np.concatenate([xa, xq])
        h = layer_norm(x, *self.ln_ffn)
        x = x + relu(h @ self.w1 + self.b1) @ self.w2 + self.b2
        return x[:len(xa)], x[len(xa):]


@dataclass
class CpgpParams:
    c_in: int
    c_down: int
    n_heads: int
    down_w: np.ndarray
    down_b: np.ndarray
    up_w: np.ndarray
    up_b: np.ndarray
    layers: List[CpgpLayer] = field(default_factory=list)
    positional: bool = True

    def __post_init__(self):
        if self.c_down % self.n_heads:
            raise ValidationError(f"C_down={self.c_down} not divisible by n_heads={self.n_heads}")
        if self.down_w.shape != (self.c_in, self.c_down) or self.up_w.shape != (self.c_down, self.c_in):
            raise ValidationError("projection shapes inconsistent with C_in / C_down")
        for layer in self.layers:
            for att in (layer.self_attn, layer.cross_attn):
                for w in (att.wq, att.wk, att.wv, att.wo):
                    if w.shape != (self.c_down, self.c_down):
                        raise ValidationError(f"attention weight {w.shape} != C_down square")
            if layer.w1.shape[0] != self.c_down or layer.w2.shape[1] != self.c_down:
                raise ValidationError("feed-forward weights inconsistent with C_down")

    @property
    def n_layers(self):
        return len(self.layers)

    @classmethod
    def init(cls, c_in=64, c_down=32, n_layers=2, n_heads=4, ffn_mult=2, seed=0,
             positional=True) -> "CpgpParams":
        rng = np.random.default_rng(seed)
        d = c_down

        def att():
            return Attention(*(xavier_uniform(rng, d, d) for _ in range(4)))

        def ln():
            return (np.ones(d), np.zeros(d))

        layers = [CpgpLayer(att(), att(), ln(), ln(), ln(),
                            xavier_uniform(rng, d, ffn_mult * d), np.zeros(ffn_mult * d),
                            xavier_uniform(rng, ffn_mult * d, d), np.zeros(d))
                  for _ in range(n_layers)]
        return cls(c_in, c_down, n_heads, xavier_uniform(rng, c_in, c_down), np.zeros(c_down),
                   xavier_uniform(rng, c_down, c_in), np.zeros(c_in), layers, positional)

    @classmethod
    def identity(cls, c_in=64, n_heads=4) -> "CpgpParams":
        """Zero layers, identity projections: the forward pass returns its inputs."""
        return cls(c_in, c_in, n_heads, np.eye(c_in), np.zeros(c_in), np.eye(c_in),
                   np.zeros(c_in), [], positional=False)

    def save(self, out_dir):
        t = {"down_w": self.down_w, "down_b": self.down_b, "up_w": self.up_w, "up_b": self.up_b}
        for i, L in enumerate(self.layers):
            for pre, att in (("self", L.self_attn), ("cross", L.cross_attn)):
                for n in ("wq", "wk", "wv", "wo"):
                    t[f"layer{i}_{pre}_{n}"] = getattr(att, n)
            for pre in ("ln_self", "ln_cross", "ln_ffn"):
                t[f"layer{i}_{pre}_gain"], t[f"layer{i}_{pre}_bias"] = getattr(L, pre)
            for n in ("w1", "b1", "w2", "b2"):
                t[f"layer{i}_ffn_{n}"] = getattr(L, n)
        cfg = {"c_in": self.c_in, "c_down": self.c_down, "n_heads": self.n_heads,
               "n_layers": self.n_layers, "positional": self.positional}
        save_param_dir(out_dir, t, cfg, "cpgp")

    @classmethod
    def load(cls, in_dir) -> "CpgpParams":
        t, cfg = load_param_dir(in_dir, "cpgp")
        layers = []
        for i in range(cfg["n_layers"]):
            atts = [Attention(*(t[f"layer{i}_{pre}_{n}"] for n in ("wq", "wk", "wv", "wo")))
                    for pre in ("self", "cross")]
            lns = [(t[f"layer{i}_{pre}_gain"], t[f"layer{i}_{pre}_bias"])
                   for pre in ("ln_self", "ln_cross", "ln_ffn")]
            ffn = [t[f"layer{i}_ffn_{n}"] for n in ("w1", "b1", "w2", "b2")]
            layers.append(CpgpLayer(*atts, *lns, *ffn))
        return cls(cfg["c_in"], cfg["c_down"], cfg["n_heads"], t["down_w"], t["down_b"],
                   t["up_w"], t["up_b"], layers, bool(cfg["positional"]))


def sinusoidal_2d(height, width, dim) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, (H*W) x dim; half the channels per axis."""
    quarter = max(dim // 4, 1)
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    parts = []
    for coord in (ys.ravel(), xs.ravel()):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    enc = np.concatenate(parts, axis=1)
    out = np.zeros((height * width, dim))
    out[:, :min(dim, enc.shape[1])] = enc[:, :dim]
    return out


def cpgp_forward(params: CpgpParams, anchor: FusedFeatures, query: FusedFeatures,
                 positional: Optional[bool] = None, trace: Optional[list] = None):
    """Return refined ``(anchor, query)`` features with the input token layout.

    ``trace``, if given, collects every attention matrix (heads x n x m).
    """
    if anchor.tokens.shape[1] != params.c_in or query.tokens.shape[1] != params.c_in:
        raise ValidationError(
            f"token channels {anchor.tokens.shape[1]}/{query.tokens.shape[1]} != C_in={params.c_in}")
    use_pos = params.positional if positional is None else positional
    na = anchor.tokens.shape[0]
    x = np.concatenate([anchor.tokens, query.tokens]).astype(np.float64)
    x = x @ params.down_w + params.down_b
    xa, xq = x[:na], x[na:]
    if use_pos:
        xa = xa + sinusoidal_2d(anchor.height, anchor.width, params.c_down)
        xq = xq + sinusoidal_2d(query.height, query.width, params.c_down)
    for layer in params.layers:
        xa, xq = layer(xa, xq, params.n_heads, trace)
    x = np.concatenate([xa, xq]) @ params.up_w + params.up_b
    return (FusedFeatures(x[:na], anchor.height, anchor.width),
            FusedFeatures(x[na:], query.height, query.width))


# --------------------------------------------------------------------------
# decoder

@dataclass
class DecoderParams:
    weights: List[np.ndarray]   # three (C, C+1, 3, 3)
    biases: List[np.ndarray]

    @classmethod
    def init(cls, channels=64, seed=0):
        rng = np.random.default_rng(seed)
        fan = (channels + 1) * 9
        return cls([xavier_uniform(rng, fan, channels * 9, (channels, channels + 1, 3, 3))
                    for _ in range(3)], [np.zeros(channels) for _ in range(3)])

    @classmethod
    def identity(cls, channels=64):
        w = np.zeros((channels, channels + 1, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls([w.copy() for _ in range(3)], [np.zeros(channels) for _ in range(3)])


N_UPSAMPLE = 3


def decode(params: DecoderParams, feat, mask, target_hw) -> np.ndarray:
    """Upsample an H x W x C map by 8 with mask guidance; unit-norm descriptors out."""
    feat = np.asarray(feat, dtype=np.float64)
    H, W, C = feat.shape
    H0, W0 = target_hw
    f = 2 ** N_UPSAMPLE
    if H0 != H * f or W0 != W * f:
        raise ValidationError(f"target {H0}x{W0} is not {f}x the feature grid {H}x{W}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (H0, W0):
        raise ValidationError(f"mask {mask.shape} does not match target {(H0, W0)}")
    x = np.moveaxis(feat, -1, 0)[None]
    for stage in range(N_UPSAMPLE):
        x = upsample_bilinear2x(x)
        m = avg_pool(mask, H0 // x.shape[-2])[None, None]
        x = np.concatenate([x, m], axis=1)
        x = relu(conv2d(x, params.weights[stage], params.biases[stage], padding=1))
    out = np.moveaxis(x[0], 0, -1)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return out / np.maximum(norm, 1e-12)
