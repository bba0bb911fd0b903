"""End-to-end segmentation model: encoder, prompt encoder, decoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .adapter import ImageEncoder, default_space_dims, encode_image
from .decoder import (
    DecoderParams,
    SemanticMask,
    decoder_cross_attention,
    decoder_self_attention,
    fuse_embeddings,
    predict_mask,
)
from .prompt import (
    PointPromptSet,
    PositionEncoding,
    SemanticPromptParams,
    default_sigma,
    encode_position_prompt,
    encode_semantic_prompt,
    render_density,
)
from .tensor import Tensor


class ConfigError(ValueError):
    """Model dimensions disagree with the configuration or the data."""


@dataclass
class ModelSpec:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    d: int = 64
    heads: int = 4
    blocks: int = 2
    patch: int = 16
    c_p: int = 64
    n_spaces: int = 2
    r: int = 10
    sigma: float | None = None
    categories: int = 1
    threshold: float = 0.5
    hs_adapter: bool = True
    gkp_encoder: bool = True
    tsm_decoder: bool = True
    cross_projections: bool = False
    share_cross: bool = True
    seed: int = 0

    @property
    def kernel_sigma(self) -> float:
        return default_sigma(self.r) if self.sigma is None else self.sigma


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-channel standardization of a C×H×W image."""
    image = np.asarray(image, dtype=np.float64)
    mu = image.mean(axis=(1, 2), keepdims=True)
    sd = image.std(axis=(1, 2), keepdims=True)
    return (image - mu) / np.maximum(sd, 1e-6)


class SegmentationModel:
    """Frozen toy encoder with adapters, point-prompt encoder and mask decoder."""

    def __init__(self, spec: ModelSpec):
        if spec.d != spec.c_p:
            raise ConfigError(f"encoder width d={spec.d} must equal prompt width c_p={spec.c_p}")
        self.spec = spec
        # frozen weights come from their own stream so toggles never change them
        frozen_rng = np.random.default_rng([spec.seed, 0])
        self.encoder = ImageEncoder.init(
            spec.image_size, spec.channels, spec.d, spec.heads, spec.blocks, spec.patch, frozen_rng
        )
        self.pe = PositionEncoding.init(spec.c_p, np.random.default_rng([spec.seed, 1]))
        if spec.hs_adapter:
            self.encoder.attach_adapters(
                spec.n_spaces, np.random.default_rng([spec.seed, 2]), default_space_dims(spec.d, spec.n_spaces)
            )
        self.gkp = (
            SemanticPromptParams.init(spec.c_p, spec.patch, np.random.default_rng([spec.seed, 3]))
            if spec.gkp_encoder
            else None
        )
        self.decoder = DecoderParams.init(
            spec.c_p,
            np.random.default_rng([spec.seed, 4]),
            categories=spec.categories,
            self_attention=spec.tsm_decoder,
            iterations=2 if spec.tsm_decoder else 1,
            cross_projections=spec.cross_projections,
            share_cross=spec.share_cross,
        )
        self._psi = Tensor(self.pe.grid(*self.encoder.grid))

    # -- parameter views -----------------------------------------------------
    def frozen(self) -> dict[str, Tensor]:
        out = self.encoder.frozen()
        out["pe.basis"] = Tensor(self.pe.basis)
        return out

    def trainable(self) -> dict[str, Tensor]:
        out = self.encoder.trainable()
        if self.gkp is not None:
            out.update(self.gkp.named())
        out.update(self.decoder.named())
        return out

    def state(self) -> dict[str, Tensor]:
        return {**self.frozen(), **self.trainable()}

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def parameter_groups(self) -> dict[str, int]:
        """Trainable scalars per component plus the frozen total."""
        groups = {"adapter": 0, "gkp": 0, "decoder": 0}
        for name, t in self.trainable().items():
            key = {"enc": "adapter", "gkp": "gkp", "dec": "decoder"}[name.split(".", 1)[0]]
            groups[key] += t.size
        groups["trainable"] = sum(groups.values())
        groups["frozen"] = sum(t.size for t in self.frozen().values())
        return groups

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.frozen().items()):
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        state = self.state()
        missing = set(state) - set(tensors)
        extra = set(tensors) - set(state)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in state.items():
            arr = np.asarray(tensors[name])
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr
        self.pe.basis[...] = state["pe.basis"].data

    # -- forward -------------------------------------------------------------
    def density(self, points: PointPromptSet) -> np.ndarray:
        return render_density(points, self.spec.r, self.spec.kernel_sigma).raster

    def forward(self, image: np.ndarray, points: PointPromptSet, density: np.ndarray | None = None) -> SemanticMask:
        image = np.asarray(image, dtype=np.float64)
        c, h, w = image.shape
        if (h, w) != tuple(self.spec.image_size) or c != self.spec.channels:
            raise ConfigError(f"image {image.shape} does not match model input {self.spec.image_size}")
        emb = encode_image(normalize_image(image), self.encoder)
        p_pos = encode_position_prompt(points, self.pe, self.decoder.point_embed)
        q_prime = decoder_self_attention(self.decoder.query, p_pos, self.decoder)
        p_sem = None
        if self.gkp is not None:
            dens = self.density(points) if density is None else density
            p_sem = encode_semantic_prompt(dens, self.gkp)
        fused = fuse_embeddings(emb, p_sem)
        g = decoder_cross_attention(fused, q_prime, self._psi, self.decoder)
        return predict_mask(g, q_prime, self.encoder.grid, h, w, self.decoder, self.spec.threshold)

    __call__ = forward
