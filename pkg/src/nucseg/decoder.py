"""Two-stage mask decoder and the semantic-mask loss.

Stage one runs self-attention over the position prompts concatenated with
learned per-category query embeddings. Stage two fuses image embeddings with
the semantic prompts, lets every image token attend to the updated queries
(projection-free, residual, applied twice), upsamples and takes per-pixel dot
products with an MLP of the category queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, clip, concat, log, matmul, reshape, transpose


@dataclass
class LossWeights:
    alpha: float = 0.8  # dice
    beta: float = 0.2  # focal
    gamma: float = 2.0
    eps: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SemanticMask:
    probs: Tensor  # C×H×W in (0, 1)
    threshold: float = 0.5

    def binary(self) -> np.ndarray:
        return self.probs.data > self.threshold


@dataclass
class DecoderParams:
    """Trainable decoder weights.

    ``sa_*`` are the prompt/query self-attention projections (absent when the
    self-attention stage is disabled). ``ca_*`` are optional learned
    cross-attention projections; the default decoder is projection-free.
    """

    query: Tensor  # C×c_p
    point_embed: Tensor  # c_p
    up1_w: Tensor  # c_p×c1×4×4 (transpose-conv layout)
    up1_b: Tensor
    up_ln_g: Tensor
    up_ln_b: Tensor
    up2_w: Tensor  # c1×c2×4×4
    up2_b: Tensor
    mlp: list[tuple[Tensor, Tensor]]
    sa_q: Tensor | None = None
    sa_k: Tensor | None = None
    sa_v: Tensor | None = None
    ca: list[dict[str, Tensor]] = field(default_factory=list)
    iterations: int = 2

    @property
    def width(self) -> int:
        return self.query.shape[1]

    @property
    def categories(self) -> int:
        return self.query.shape[0]

    @property
    def self_attention(self) -> bool:
        return self.sa_q is not None

    @classmethod
    def init(
        cls,
        c_p: int,
        rng: np.random.Generator,
        categories: int = 1,
        self_attention: bool = True,
        iterations: int = 2,
        cross_projections: bool = False,
        share_cross: bool = True,
        c1: int | None = None,
        c2: int | None = None,
    ):
        c1 = c1 or max(1, c_p // 4)
        c2 = c2 or max(1, c_p // 8)

        def w(shape, fan_in):
            return Tensor(rng.normal(0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

        def z(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        mlp = [(w((c_p, c_p), c_p), z(c_p)), (w((c_p, c_p), c_p), z(c_p)), (w((c_p, c2), c_p), z(c2))]
        p = cls(
            query=Tensor(rng.normal(0, 1.0, (categories, c_p)), requires_grad=True),
            point_embed=Tensor(rng.normal(0, 1.0, c_p), requires_grad=True),
            up1_w=w((c_p, c1, 4, 4), c_p * 4),
            up1_b=z(c1),
            up_ln_g=Tensor(np.ones(c1), requires_grad=True),
            up_ln_b=z(c1),
            up2_w=w((c1, c2, 4, 4), c1 * 4),
            up2_b=z(c2),
            mlp=mlp,
            iterations=iterations,
        )
        if self_attention:
            p.sa_q, p.sa_k, p.sa_v = (w((c_p, c_p), c_p) for _ in range(3))
        if cross_projections:
            n = 1 if share_cross else iterations
            p.ca = [{k: w((c_p, c_p), c_p) for k in ("q", "k", "v")} for _ in range(n)]
        return p

    def named(self, prefix: str = "dec.") -> dict[str, Tensor]:
        out = {
            prefix + "query": self.query,
            prefix + "point_embed": self.point_embed,
            prefix + "up1_w": self.up1_w,
            prefix + "up1_b": self.up1_b,
            prefix + "up_ln_g": self.up_ln_g,
            prefix + "up_ln_b": self.up_ln_b,
            prefix + "up2_w": self.up2_w,
            prefix + "up2_b": self.up2_b,
        }
        for i, (wt, b) in enumerate(self.mlp):
            out[f"{prefix}mlp{i}_w"] = wt
            out[f"{prefix}mlp{i}_b"] = b
        if self.self_attention:
            out[prefix + "sa_q"], out[prefix + "sa_k"], out[prefix + "sa_v"] = self.sa_q, self.sa_k, self.sa_v
        for i, proj in enumerate(self.ca):
            for k, t in proj.items():
                out[f"{prefix}ca{i}_{k}"] = t
        return out


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return matmul(F.softmax(matmul(q, transpose(k)) * scale, axis=-1), v)


def decoder_self_attention(query: Tensor, p_pos, params: DecoderParams) -> Tensor:
    """Self-attention over ``[p_pos ; query]`` -> (L+C)×c_p, prompt rows first."""
    tokens = concat([p_pos, query], axis=0) if p_pos.shape[0] else query
    if not params.self_attention:
        return tokens
    if tokens.shape[1] != params.sa_q.shape[0]:
        raise DimensionError("prompt and query widths differ")
    return _attend(matmul(tokens, params.sa_q), matmul(tokens, params.sa_k), matmul(tokens, params.sa_v))


def query_rows(q_prime: Tensor, categories: int) -> Tensor:
    """The category rows of the updated queries (they follow the prompt rows)."""
    n = q_prime.shape[0]
    return q_prime[n - categories :]


def fuse_embeddings(h, p_sem) -> Tensor:
    """Flatten the c_p×h×w image embedding to T×c_p and add the semantic prompts."""
    c, gh, gw = h.shape
    flat = transpose(reshape(h, (c, gh * gw)))
    if p_sem is None:
        return flat
    if p_sem.shape != flat.shape:
        raise DimensionError(f"semantic prompts {p_sem.shape} do not match tokens {flat.shape}")
    return flat + p_sem


def cross_attention_step(h, q_prime, psi, proj: dict[str, Tensor] | None = None) -> Tensor:
    """``softmax((h + psi) q'ᵀ / √c) q' + h``."""
    queries = h + psi
    keys = values = q_prime
    if proj:
        queries, keys, values = matmul(queries, proj["q"]), matmul(q_prime, proj["k"]), matmul(q_prime, proj["v"])
    return _attend(queries, keys, values) + h


def decoder_cross_attention(h, q_prime, psi, params: DecoderParams | None = None, iterations: int | None = None) -> Tensor:
    """Image tokens attend to the updated queries; repeated with the same positional term."""
    if h.shape != getattr(psi, "shape", h.shape):
        raise DimensionError("positional encodings must match the image tokens")
    n = iterations if iterations is not None else (params.iterations if params is not None else 2)
    projs = params.ca if params is not None else []
    g = h
    for i in range(n):
        proj = projs[min(i, len(projs) - 1)] if projs else None
        g = cross_attention_step(g, q_prime, psi, proj)
    return g


def upscale(g, grid: tuple[int, int], params: DecoderParams) -> Tensor:
    """Two stride-2 4×4 transpose convolutions on the token grid."""
    t, c = g.shape
    gh, gw = grid
    if t != gh * gw:
        raise DimensionError(f"{t} tokens do not fill a {gh}x{gw} grid")
    x = reshape(transpose(g), (c, gh, gw))
    x = F.transpose_conv2d(x, params.up1_w, 2, params.up1_b)
    x = F.gelu(F.layer_norm_channels(x, params.up_ln_g, params.up_ln_b))
    return F.gelu(F.transpose_conv2d(x, params.up2_w, 2, params.up2_b))


def mask_mlp(rows: Tensor, params: DecoderParams) -> Tensor:
    x = rows
    last = len(params.mlp) - 1
    for i, (w, b) in enumerate(params.mlp):
        x = F.linear(x, w, b)
        if i < last:
            x = F.gelu(x)
    return x


def mask_logits(g, q_prime, grid, out_h: int, out_w: int, params: DecoderParams) -> Tensor:
    feat = upscale(g, grid, params)  # c2×h'×w'
    c2, uh, uw = feat.shape
    weights = mask_mlp(query_rows(q_prime, params.categories), params)  # C×c2
    low = reshape(matmul(weights, reshape(feat, (c2, uh * uw))), (params.categories, uh, uw))
    return F.bilinear_resize(low, out_h, out_w)


def predict_mask(g, q_prime, grid, out_h: int, out_w: int, params: DecoderParams, threshold: float = 0.5) -> SemanticMask:
    """Per-category foreground probabilities at full resolution."""
    return SemanticMask(F.sigmoid(mask_logits(g, q_prime, grid, out_h, out_w, params)), threshold)


PROB_CLAMP = 1e-7


def loss_sem(pred, target, w: LossWeights | None = None) -> Tensor:
    """``alpha * dice + beta * focal`` for probabilities ``pred`` and binary ``target``."""
    w = w or LossWeights()
    p = pred.probs if isinstance(pred, SemanticMask) else pred
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} vs target {t.shape}")
    p = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inter = (p * t).sum()
    dice = 1.0 - (inter * 2.0 + w.eps) / (p.sum() + float(t.sum()) + w.eps)
    # probability of the true class, kept differentiable in p
    p_t = p * t + (1.0 - p) * (1.0 - t)
    focal = ((1.0 - p_t) ** w.gamma * log(p_t) * -1.0).mean()
    return dice * w.alpha + focal * w.beta
