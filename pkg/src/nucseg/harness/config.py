"""Run configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import get_type_hints

from ..decoder import LossWeights
from ..model import ModelSpec


@dataclass
class RunConfig:
    # prompt kernel
    r: int = 10
    sigma: float = -1.0  # <= 0 selects r/3
    # encoder
    n_spaces: int = 2
    d: int = 64
    heads: int = 4
    blocks: int = 2
    patch: int = 16
    size: int = 64
    # decoder
    c_p: int = 64
    categories: int = 1
    cross_projections: bool = False
    share_cross: bool = True
    # loss
    alpha: float = 0.8
    beta: float = 0.2
    gamma: float = 2.0
    dice_eps: float = 1.0
    # instance conversion
    tau: float = 0.5
    min_separation: float = 10.0
    split: bool = True
    # optimization
    lr: float = 1e-4
    lr_decay: float = 0.98
    epochs: int = 100
    batch_size: int = 2
    seed: int = 0
    # module toggles
    hs_adapter: bool = True
    gkp_encoder: bool = True
    tsm_decoder: bool = True
    # protocol / data
    protocol: str = "lodo"
    domains: str = "S1,S2,S3,S4"
    n_images: int = 10
    hd_percentile: float = -1.0  # <= 0 means plain max Hausdorff
    oracle_cc: bool = False

    def __post_init__(self):
        if self.protocol not in ("lodo", "adaptability"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def domain_list(self) -> list[str]:
        return [d.strip() for d in self.domains.split(",") if d.strip()]

    @property
    def kernel_sigma(self) -> float | None:
        return self.sigma if self.sigma > 0 else None

    @property
    def hd_pct(self) -> float | None:
        return self.hd_percentile if self.hd_percentile > 0 else None

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            image_size=(self.size, self.size),
            d=self.d,
            heads=self.heads,
            blocks=self.blocks,
            patch=self.patch,
            c_p=self.c_p,
            n_spaces=self.n_spaces,
            r=self.r,
            sigma=self.kernel_sigma,
            categories=self.categories,
            threshold=self.tau,
            hs_adapter=self.hs_adapter,
            gkp_encoder=self.gkp_encoder,
            tsm_decoder=self.tsm_decoder,
            cross_projections=self.cross_projections,
            share_cross=self.share_cross,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.dice_eps)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def field_types() -> dict[str, type]:
    hints = get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    types = field_types()
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
