"""Heterogeneous-space adapter attention and the toy image encoder.

A frozen ViT-style block is augmented with ``N`` low-rank down/up projection
pairs per branch (query, value, feed-forward). Each pair projects into a
feature space of a different width, and a per-token softmax gate mixes the
spaces before the result is added to the frozen path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, matmul, reshape, transpose


def default_space_dims(d: int, n_spaces: int) -> list[int]:
    """Distinct inner widths d/4, d/8, ... (at least 1)."""
    dims = [max(1, d // 2 ** (i + 2)) for i in range(n_spaces)]
    if len(set(dims)) != len(dims):
        raise ValueError(f"cannot build {n_spaces} distinct spaces for d={d}")
    return dims


@dataclass
class HeterogeneousSpaceParams:
    """Per-branch down (``e_*``) and up (``t_*``) projections plus the two gates."""

    e_que: list[Tensor]
    t_que: list[Tensor]
    e_val: list[Tensor]
    t_val: list[Tensor]
    e_ffn: list[Tensor]
    t_ffn: list[Tensor]
    gate_attn: Tensor  # d×N, shared by the query and value branches
    gate_ffn: Tensor  # d×N

    def __post_init__(self):
        dims = self.dims
        if len(set(dims)) != len(dims):
            raise ValueError(f"space dims must be pairwise distinct, got {dims}")

    @property
    def n_spaces(self) -> int:
        return len(self.e_que)

    @property
    def dims(self) -> list[int]:
        return [e.shape[1] for e in self.e_que]

    @classmethod
    def init(cls, d: int, dims, rng: np.random.Generator, zero_up: bool = True):
        """Fresh adapter. With ``zero_up`` the up-projections start at zero."""

        def down(di):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, di)), requires_grad=True)

        def up(di):
            w = np.zeros((di, d)) if zero_up else rng.normal(0.0, 1.0 / math.sqrt(di), size=(di, d))
            return Tensor(w, requires_grad=True)

        n = len(dims)
        return cls(
            e_que=[down(di) for di in dims],
            t_que=[up(di) for di in dims],
            e_val=[down(di) for di in dims],
            t_val=[up(di) for di in dims],
            e_ffn=[down(di) for di in dims],
            t_ffn=[up(di) for di in dims],
            gate_attn=Tensor(np.zeros((d, n)), requires_grad=True),
            gate_ffn=Tensor(np.zeros((d, n)), requires_grad=True),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for branch in ("que", "val", "ffn"):
            for i, (e, t) in enumerate(zip(getattr(self, f"e_{branch}"), getattr(self, f"t_{branch}"))):
                out[f"{prefix}e_{branch}.{i}"] = e
                out[f"{prefix}t_{branch}.{i}"] = t
        out[f"{prefix}gate_attn"] = self.gate_attn
        out[f"{prefix}gate_ffn"] = self.gate_ffn
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named().values())

    def zero_(self) -> None:
        for t in self.named().values():
            t.data[...] = 0.0


@dataclass
class EncoderBlockParams:
    """Frozen attention/FFN weights of one block plus its (optional) adapter."""

    q: Tensor
    k: Tensor
    v: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int
    adapter: HeterogeneousSpaceParams | None = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def d(self) -> int:
        return self.q.shape[0]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or 2 * d
        s = 1.0 / math.sqrt(d)
        return cls(
            q=Tensor(rng.normal(0, s, (d, d))),
            k=Tensor(rng.normal(0, s, (d, d))),
            v=Tensor(rng.normal(0, s, (d, d))),
            ffn_w1=Tensor(rng.normal(0, s, (d, hidden))),
            ffn_b1=Tensor(np.zeros(hidden)),
            ffn_w2=Tensor(rng.normal(0, 1.0 / math.sqrt(hidden), (hidden, d))),
            ffn_b2=Tensor(np.zeros(d)),
            ln1_g=Tensor(np.ones(d)),
            ln1_b=Tensor(np.zeros(d)),
            ln2_g=Tensor(np.ones(d)),
            ln2_b=Tensor(np.zeros(d)),
            heads=heads,
        )

    def frozen(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("q", "k", "v", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        return {f"{prefix}{n}": getattr(self, n) for n in names}


def space_gate(x, gate) -> Tensor:
    """Per-token softmax over the N feature-space weights: T×d, d×N -> T×N."""
    return F.softmax(matmul(x, gate), axis=-1)


def _mixed_projection(x, weights: Tensor, downs, ups, act=None):
    total = None
    for i, (e, t) in enumerate(zip(downs, ups)):
        z = matmul(x, e)
        if act is not None:
            z = act(z)
        term = weights[:, i : i + 1] * matmul(z, t)
        total = term if total is None else total + term
    return total


def adapted_query(mu, p: EncoderBlockParams) -> Tensor:
    """Frozen query projection plus the gate-weighted heterogeneous update."""
    base = matmul(mu, p.q)
    if p.adapter is None:
        return base
    w = space_gate(mu, p.adapter.gate_attn)
    return base + _mixed_projection(mu, w, p.adapter.e_que, p.adapter.t_que)


def adapted_value(mu, p: EncoderBlockParams) -> Tensor:
    """Frozen value projection plus the gate-weighted heterogeneous update."""
    base = matmul(mu, p.v)
    if p.adapter is None:
        return base
    w = space_gate(mu, p.adapter.gate_attn)
    return base + _mixed_projection(mu, w, p.adapter.e_val, p.adapter.t_val)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(q kᵀ / √d_head) v per head, heads re-merged along channels."""
    t_q, d = q.shape
    t_k = k.shape[0]
    dh = d // heads
    qh = transpose(reshape(q, (t_q, heads, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (t_k, heads, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (t_k, heads, dh)), (1, 0, 2))
    attn = F.softmax(matmul(qh, kh) * (1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(attn, vh)
    return reshape(transpose(out, (1, 0, 2)), (t_q, d))


def hs_attention(mu, p: EncoderBlockParams) -> Tensor:
    """Multi-head self-attention with adapted query and value projections."""
    h_que = adapted_query(mu, p)
    h_val = adapted_value(mu, p)
    keys = matmul(mu, p.k)
    return multi_head_attention(h_que, keys, h_val, p.heads)


def frozen_ffn(x, p: EncoderBlockParams) -> Tensor:
    z = F.layer_norm(x, p.ln2_g, p.ln2_b)
    return F.linear(F.gelu(F.linear(z, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)


def hs_ffn(a, p: EncoderBlockParams) -> Tensor:
    """``a + ffn(a) + Σ_i gate(a)_i · up_i(gelu(down_i(a)))``."""
    out = a + frozen_ffn(a, p)
    if p.adapter is None:
        return out
    w = space_gate(a, p.adapter.gate_ffn)
    return out + _mixed_projection(a, w, p.adapter.e_ffn, p.adapter.t_ffn, act=F.gelu)


def encoder_block(x, p: EncoderBlockParams) -> Tensor:
    """Pre-norm residual attention followed by the adapted feed-forward stage."""
    a = x + hs_attention(F.layer_norm(x, p.ln1_g, p.ln1_b), p)
    return hs_ffn(a, p)


@dataclass
class ImageEncoder:
    """Linear patch projection, positional embedding and a stack of blocks."""

    patch_w: Tensor  # (C·p·p)×d
    patch_b: Tensor  # d
    pos: Tensor  # T×d
    patch: int
    grid: tuple[int, int]
    blocks: list[EncoderBlockParams] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.patch_w.shape[1]

    @classmethod
    def init(
        cls,
        image_hw: tuple[int, int],
        channels: int = 3,
        d: int = 64,
        heads: int = 4,
        n_blocks: int = 2,
        patch: int = 16,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        h, w = image_hw
        if h % patch or w % patch:
            raise DimensionError(f"image {h}x{w} not divisible by patch side {patch}")
        grid = (h // patch, w // patch)
        fan_in = channels * patch * patch
        return cls(
            patch_w=Tensor(rng.normal(0, 1.0 / math.sqrt(fan_in), (fan_in, d))),
            patch_b=Tensor(np.zeros(d)),
            pos=Tensor(rng.normal(0, 0.5, (grid[0] * grid[1], d))),
            patch=patch,
            grid=grid,
            blocks=[EncoderBlockParams.init(d, heads, rng) for _ in range(n_blocks)],
        )

    def attach_adapters(self, n_spaces: int, rng: np.random.Generator, dims=None, zero_up=True):
        dims = dims or default_space_dims(self.d, n_spaces)
        for b in self.blocks:
            b.adapter = HeterogeneousSpaceParams.init(self.d, dims, rng, zero_up=zero_up)

    def detach_adapters(self) -> None:
        for b in self.blocks:
            b.adapter = None

    def frozen(self) -> dict[str, Tensor]:
        out = {"enc.patch_w": self.patch_w, "enc.patch_b": self.patch_b, "enc.pos": self.pos}
        for i, b in enumerate(self.blocks):
            out.update(b.frozen(f"enc.block{i}."))
        return out

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            if b.adapter is not None:
                out.update(b.adapter.named(f"enc.block{i}.adapter."))
        return out


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """C×H×W image -> T×(C·p·p) rows in raster order of patches."""
    c, h, w = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch side {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, c * patch * patch))


def encode_tokens(image, enc: ImageEncoder) -> Tensor:
    """Token matrix T×d after all blocks."""
    image = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    rows = patchify(image, enc.patch)
    if rows.shape[0] != enc.pos.shape[0] or rows.shape[1] != enc.patch_w.shape[0]:
        raise DimensionError(
            f"image gives {rows.shape} patch rows, encoder expects "
            f"{(enc.pos.shape[0], enc.patch_w.shape[0])}"
        )
    x = F.linear(Tensor(rows), enc.patch_w, enc.patch_b) + enc.pos
    for block in enc.blocks:
        x = encoder_block(x, block)
    return x


def encode_image(image, enc: ImageEncoder) -> Tensor:
    """Image embeddings laid out as d × (H/p) × (W/p)."""
    tokens = encode_tokens(image, enc)
    gh, gw = enc.grid
    return reshape(transpose(tokens), (enc.d, gh, gw))


def trainable_count_formula(d: int, dims, n_blocks: int) -> int:
    """Adapter parameters: Σ_i 2·d·d_i per branch, three branches, two d×N gates."""
    per_block = 3 * sum(2 * d * di for di in dims) + 2 * d * len(dims)
    return per_block * n_blocks
