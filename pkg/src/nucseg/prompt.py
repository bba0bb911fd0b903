"""Point prompts: Gaussian density maps and the two prompt embeddings.

Single-point annotations are rendered into a density raster where each
point deposits a window-normalized Gaussian. A small strided conv stack turns
the raster into one prompt vector per image token (semantic prompts); the
points themselves become position prompts via a fixed Fourier encoding plus a
learned point embedding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, reshape, transpose


@dataclass
class PointPromptSet:
    """Integer pixel positions ``(x, y)`` = (column, row) inside an H×W image."""

    points: np.ndarray  # L×2 int
    height: int
    width: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        if len(pts) and (
            pts[:, 0].min() < 0
            or pts[:, 1].min() < 0
            or pts[:, 0].max() >= self.width
            or pts[:, 1].max() >= self.height
        ):
            raise ValueError("point outside the image")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    raster: np.ndarray  # H×W, non-negative
    r: int
    sigma: float


def default_sigma(r: int) -> float:
    return r / 3.0 if r > 0 else 1.0


def gaussian_kernel(r: int, sigma: float) -> np.ndarray:
    """(2r+1)×(2r+1) isotropic Gaussian normalized to unit window sum."""
    if r < 0 or sigma <= 0:
        raise ValueError("need r >= 0 and sigma > 0")
    off = np.arange(-r, r + 1, dtype=np.float64)
    sq = off[:, None] ** 2 + off[None, :] ** 2
    g = np.exp(-sq / (2.0 * sigma * sigma))
    return g / g.sum()


def render_density(pts: PointPromptSet, r: int = 10, sigma: float | None = None) -> DensityMap:
    """Sum of kernels stamped at every point, clipped (not renormalized) at borders."""
    sigma = default_sigma(r) if sigma is None else sigma
    kern = gaussian_kernel(r, sigma)
    h, w = pts.height, pts.width
    raster = np.zeros((h, w))
    for x, y in pts.points:
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        raster[y0:y1, x0:x1] += kern[y0 - (y - r) : y1 - (y - r), x0 - (x - r) : x1 - (x - r)]
    return DensityMap(raster, r, sigma)


@dataclass
class SemanticPromptParams:
    """Conv stack: 2×2/2 conv, channel LayerNorm, GELU, 2×2/2 conv, GELU, then
    a k×k/k alignment conv bringing the grid down to the image-token grid."""

    conv1_w: Tensor
    conv1_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    input_scale: float = 1.0

    @property
    def downsample(self) -> int:
        return 4 * self.conv3_w.shape[-1]

    @classmethod
    def init(cls, c_p: int, patch: int, rng: np.random.Generator, c1: int = 8, c2: int = 32,
             input_scale: float = 1.0):
        if patch % 4:
            raise ValueError("patch side must be a multiple of 4")
        k3 = patch // 4

        def w(shape):
            fan_in = int(np.prod(shape[1:]))
            return Tensor(rng.normal(0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

        def z(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(
            conv1_w=w((c1, 1, 2, 2)),
            conv1_b=z(c1),
            ln_g=Tensor(np.ones(c1), requires_grad=True),
            ln_b=z(c1),
            conv2_w=w((c2, c1, 2, 2)),
            conv2_b=z(c2),
            conv3_w=w((c_p, c2, k3, k3)),
            conv3_b=z(c_p),
            input_scale=input_scale,
        )

    def named(self, prefix: str = "gkp.") -> dict[str, Tensor]:
        names = ("conv1_w", "conv1_b", "ln_g", "ln_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b")
        return {prefix + n: getattr(self, n) for n in names}


def encode_semantic_prompt(density, params: SemanticPromptParams) -> Tensor:
    """Density raster (H×W) -> T×c_p semantic prompt tokens, raster order."""
    raster = density.raster if isinstance(density, DensityMap) else density
    raster = raster if isinstance(raster, Tensor) else Tensor(raster)
    h, w = raster.shape
    f = params.downsample
    if h % f or w % f:
        raise DimensionError(f"density {h}x{w} not divisible by downsampling factor {f}")
    x = reshape(raster, (1, h, w))
    if params.input_scale != 1.0:
        x = x * params.input_scale
    x = F.conv2d(x, params.conv1_w, 2, params.conv1_b)
    x = F.gelu(F.layer_norm_channels(x, params.ln_g, params.ln_b))
    x = F.gelu(F.conv2d(x, params.conv2_w, 2, params.conv2_b))
    k3 = params.conv3_w.shape[-1]
    x = F.conv2d(x, params.conv3_w, k3, params.conv3_b)
    c, gh, gw = x.shape
    return transpose(reshape(x, (c, gh * gw)))


@dataclass
class PositionEncoding:
    """Random Fourier features of normalized coordinates."""

    basis: np.ndarray  # 2×(c_p/2), fixed

    @classmethod
    def init(cls, c_p: int, rng: np.random.Generator, scale: float = 1.0):
        if c_p % 2:
            raise ValueError("position encoding width must be even")
        return cls(scale * rng.normal(size=(2, c_p // 2)))

    @property
    def width(self) -> int:
        return 2 * self.basis.shape[1]

    def encode(self, coords: np.ndarray) -> np.ndarray:
        """``coords``: L×2 normalized (x, y) in [0, 1] -> L×c_p."""
        c = 2.0 * np.asarray(coords, dtype=np.float64).reshape(-1, 2) - 1.0
        proj = 2.0 * math.pi * (c @ self.basis)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def grid(self, gh: int, gw: int) -> np.ndarray:
        """Encoding at token centers of a gh×gw grid, raster order -> (gh·gw)×c_p."""
        ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
        return self.encode(np.stack([xs.ravel(), ys.ravel()], axis=1))


def normalized_coords(pts: PointPromptSet) -> np.ndarray:
    if len(pts) == 0:
        return np.zeros((0, 2))
    return (pts.points + 0.5) / np.array([pts.width, pts.height], dtype=np.float64)


def encode_position_prompt(pts: PointPromptSet, pe: PositionEncoding, point_embed: Tensor) -> Tensor:
    """One row per point: Fourier encoding of its location plus the learned point embedding."""
    enc = Tensor(pe.encode(normalized_coords(pts)))
    if len(pts) == 0:
        return enc
    return enc + point_embed


def centroids_from_instances(labels: np.ndarray) -> PointPromptSet:
    """Rounded centroid of every nonzero label, snapped onto the label if needed."""
    labels = np.asarray(labels)
    h, w = labels.shape
    ids = np.unique(labels)
    ids = ids[ids != 0]
    pts = []
    for lab in ids:
        rows, cols = np.nonzero(labels == lab)
        cy, cx = rows.mean(), cols.mean()
        y, x = int(math.floor(cy + 0.5)), int(math.floor(cx + 0.5))
        if labels[y, x] != lab:
            d2 = (rows - cy) ** 2 + (cols - cx) ** 2
            k = int(np.argmin(d2))
            y, x = int(rows[k]), int(cols[k])
        pts.append((x, y))
    return PointPromptSet(np.array(pts, dtype=np.int64).reshape(-1, 2), h, w)


# -- file formats ------------------------------------------------------------
def write_points_csv(path, pts: PointPromptSet) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y"])
        for x, y in pts.points:
            wr.writerow([int(x), int(y)])


def read_points_csv(path, height: int, width: int) -> PointPromptSet:
    with open(path, newline="") as fh:
        rows = [(int(r["x"]), int(r["y"])) for r in csv.DictReader(fh)]
    return PointPromptSet(np.array(rows, dtype=np.int64).reshape(-1, 2), height, width)


def write_density(path, raster: np.ndarray) -> None:
    """ASCII ``H W`` header line followed by H·W little-endian float32 values."""
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"{h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_density(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = (int(v) for v in fh.readline().decode("ascii").split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"density file holds {data.size} values, header says {h}x{w}")
    return data.reshape(h, w).astype(np.float64)


def write_density_preview(path, raster: np.ndarray) -> None:
    from PIL import Image

    peak = raster.max()
    scaled = raster / peak if peak > 0 else raster
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(Path(path))
