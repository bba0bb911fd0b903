"""Synthetic multi-domain nuclei images.

Each :class:`DomainStyle` fixes the ranges that nuclei count, size, shape,
intensity, noise and texture are drawn from. The four built-in styles use
non-overlapping intensity/noise settings so that every domain looks different
while the segmentation task stays the same.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..instances import read_instance_png, relabel_contiguous, write_instance_png
from ..prompt import PointPromptSet, centroids_from_instances, read_points_csv, write_points_csv


@dataclass(frozen=True)
class DomainStyle:
    name: str
    count_range: tuple[int, int]
    radius_range: tuple[float, float]
    aspect_range: tuple[float, float]  # major/minor axis ratio
    fg_mean: float
    fg_std: float  # spread of per-nucleus intensity
    bg_mean: float
    bg_std: float  # spread of per-image background level
    noise: float
    texture_freq: float  # cycles per pixel
    texture_amp: float
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blur: float = 0.7


BUILTIN_STYLES: dict[str, DomainStyle] = {
    # bright nuclei on dark ground, fluorescence-like
    "S1": DomainStyle("S1", (4, 7), (6.0, 8.0), (1.0, 1.3), 0.80, 0.05, 0.10, 0.02, 0.03, 0.05, 0.02,
                      (0.6, 0.8, 1.6)),
    # dark purple nuclei on pale pink ground
    "S2": DomainStyle("S2", (5, 8), (6.5, 8.5), (1.0, 1.4), 0.35, 0.04, 0.85, 0.02, 0.05, 0.12, 0.04,
                      (1.15, 0.75, 1.10)),
    # very dark, sparse, larger nuclei
    "S3": DomainStyle("S3", (3, 6), (7.0, 9.0), (1.0, 1.3), 0.18, 0.03, 0.70, 0.03, 0.07, 0.20, 0.05,
                      (1.05, 0.65, 1.30)),
    # low contrast, noisy, frozen-section-like
    "S4": DomainStyle("S4", (4, 7), (6.0, 8.5), (1.0, 1.4), 0.28, 0.04, 0.58, 0.02, 0.09, 0.30, 0.03,
                      (1.20, 0.85, 0.95)),
}


@dataclass
class Sample:
    image: np.ndarray  # C×H×W float
    labels: np.ndarray  # H×W int
    points: PointPromptSet
    image_id: str
    domain: str
    intensities: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per-nucleus gray level
    background: float = 0.0


@dataclass
class DomainDataset:
    domain_id: str
    samples: list[Sample]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx) -> "DomainDataset":
        return DomainDataset(self.domain_id, [self.samples[i] for i in idx], self.seed)


def _ellipse(h: int, w: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_sample(style: DomainStyle, rng: np.random.Generator, size=(64, 64), max_tries: int = 500):
    """Labels, image and per-nucleus intensities for one synthetic image."""
    h, w = size
    labels = np.zeros((h, w), dtype=np.int32)
    n_target = int(rng.integers(style.count_range[0], style.count_range[1] + 1))
    placed = 0
    tries = 0
    while placed < n_target and tries < max_tries:
        tries += 1
        r = rng.uniform(*style.radius_range)
        aspect = rng.uniform(*style.aspect_range)
        a, b = r * math.sqrt(aspect), r / math.sqrt(aspect)
        theta = rng.uniform(0, math.pi)
        cy, cx = rng.uniform(a * 0.5, h - 1 - a * 0.5), rng.uniform(a * 0.5, w - 1 - a * 0.5)
        shape = _ellipse(h, w, cy, cx, a, b, theta)
        if shape.sum() < 4 or (labels[shape] != 0).any():
            continue
        # keep the new object a single 8-connected piece after border clipping
        _, pieces = ndimage.label(shape, structure=np.ones((3, 3)))
        if pieces != 1:
            continue
        placed += 1
        labels[shape] = placed
    labels = relabel_contiguous(labels)
    k = int(labels.max())
    intens = rng.normal(style.fg_mean, style.fg_std, size=k)
    bg = float(rng.normal(style.bg_mean, style.bg_std))
    yy, xx = np.mgrid[:h, :w]
    phase = rng.uniform(0, 2 * math.pi, size=2)
    f = style.texture_freq * 2 * math.pi
    texture = style.texture_amp * np.sin(f * xx + phase[0]) * np.cos(f * yy + phase[1])
    gray = np.full((h, w), bg)
    for lab in range(1, k + 1):
        gray[labels == lab] = intens[lab - 1]
    gray = ndimage.gaussian_filter(gray, style.blur) if style.blur > 0 else gray
    gray = gray + texture + rng.normal(0.0, style.noise, size=(h, w))
    tint = np.asarray(style.tint, dtype=np.float64)
    tint = tint / tint.mean()
    image = tint[:, None, None] * gray[None]
    return image, labels, intens, bg


def generate_domain(style: DomainStyle | str, n_images: int, seed: int, size=(64, 64)) -> DomainDataset:
    """Seed-deterministic synthetic dataset for one domain."""
    if isinstance(style, str):
        style = BUILTIN_STYLES[style]
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng([seed, sum(map(ord, style.name))])
    samples = []
    for i in range(n_images):
        image, labels, intens, bg = render_sample(style, rng, size)
        samples.append(
            Sample(image, labels, centroids_from_instances(labels), f"{style.name}_{i:04d}", style.name, intens, bg)
        )
    return DomainDataset(style.name, samples, seed)


def generate_domains(names, n_images: int, seed: int, size=(64, 64)) -> list[DomainDataset]:
    return [generate_domain(n, n_images, seed, size) for n in names]


# -- on-disk layout ----------------------------------------------------------
# <root>/<domain>/<image_id>.npy        float64 C×H×W image
# <root>/<domain>/<image_id>_labels.png 16-bit instance map
# <root>/<domain>/<image_id>_points.csv centroid prompts
def save_domain(ds: DomainDataset, root) -> Path:
    out = Path(root) / ds.domain_id
    out.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        np.save(out / f"{s.image_id}.npy", s.image)
        write_instance_png(out / f"{s.image_id}_labels.png", s.labels)
        write_points_csv(out / f"{s.image_id}_points.csv", s.points)
    return out


def load_domain(root, domain_id: str) -> DomainDataset:
    base = Path(root) / domain_id
    samples = []
    for img_path in sorted(base.glob("*.npy")):
        image_id = img_path.stem
        image = np.load(img_path)
        labels = read_instance_png(base / f"{image_id}_labels.png")
        pts_path = base / f"{image_id}_points.csv"
        pts = (
            read_points_csv(pts_path, *labels.shape) if pts_path.exists() else centroids_from_instances(labels)
        )
        samples.append(Sample(image, labels, pts, image_id, domain_id))
    if not samples:
        raise FileNotFoundError(f"no samples under {base}")
    return DomainDataset(domain_id, samples)
