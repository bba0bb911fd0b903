"""Semantic-to-instance conversion.

Instance maps are plain integer arrays: 0 is background, objects are labelled
1..K. Touching nuclei that end up in one connected component are separated
by a marker-based split on the exact Euclidean distance transform.
"""

from __future__ import annotations

import csv
import heapq
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)


class InstanceSeparator(Protocol):
    """Anything that turns a semantic mask into an instance map."""

    def __call__(self, probs: np.ndarray, threshold: float = 0.5) -> np.ndarray: ...


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Remap nonzero labels to 1..K in order of first appearance in raster scan."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = {int(old): new for new, old in enumerate(order, start=1)}
    out = np.zeros(labels.shape, dtype=np.int32)
    for old, new in lut.items():
        out[labels == old] = new
    return out


def connected_components(binary: np.ndarray) -> np.ndarray:
    """8-connected labelling, labels in raster order of each component's first pixel."""
    lab, _ = ndimage.label(np.asarray(binary) != 0, structure=EIGHT)
    return relabel_contiguous(lab)


_BIG = 1e20


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: d(p) = min_q (p - q)^2 + f(q)."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance of every foreground pixel to the nearest background pixel.

    Separable two-pass lower-envelope algorithm (columns, then rows). Pixels
    outside the image are not background, so a mask with no background pixel
    gets ``inf`` everywhere.
    """
    mask = np.asarray(mask) != 0
    f = np.where(mask, _BIG, 0.0)
    cols = np.empty_like(f)
    for j in range(f.shape[1]):
        cols[:, j] = _edt_1d(f[:, j])
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        out[i, :] = _edt_1d(cols[i, :])
    out[out >= _BIG / 2] = np.inf
    return np.sqrt(out)


def find_markers(dist: np.ndarray, region: np.ndarray, min_separation: float) -> list[tuple[int, int]]:
    """Local maxima of ``dist`` inside ``region``, greedily thinned to ``min_separation``."""
    padded = np.where(region, dist, -np.inf)
    peak = padded >= ndimage.maximum_filter(padded, footprint=EIGHT, mode="constant", cval=-np.inf)
    peak &= region
    rows, cols = np.nonzero(peak)
    vals = dist[rows, cols]
    # descending distance, raster order among ties
    order = np.lexsort((cols, rows, -vals))
    kept: list[tuple[int, int]] = []
    for i in order:
        y, x = int(rows[i]), int(cols[i])
        if all((y - ky) ** 2 + (x - kx) ** 2 >= min_separation**2 for ky, kx in kept):
            kept.append((y, x))
    return kept


def _grow(cost: np.ndarray, region: np.ndarray, markers: list[tuple[int, int]]) -> np.ndarray:
    """Priority flood from markers over ``region`` ordered by ``cost`` (8-connected)."""
    out = np.zeros(region.shape, dtype=np.int32)
    heap: list[tuple[float, int, int, int, int]] = []
    counter = 0
    for lab, (y, x) in enumerate(markers, start=1):
        out[y, x] = lab
        heapq.heappush(heap, (cost[y, x], counter, y, x, lab))
        counter += 1
    h, w = region.shape
    while heap:
        _, _, y, x, lab = heapq.heappop(heap)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if (dy or dx) and 0 <= ny < h and 0 <= nx < w and region[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = lab
                    heapq.heappush(heap, (cost[ny, nx], counter, ny, nx, lab))
                    counter += 1
    return out


def split_touching(labels: np.ndarray, min_separation: float = 10.0) -> np.ndarray:
    """Split components holding several distance-transform maxima.

    Each component with two or more markers is partitioned by flooding the
    negated distance transform from its markers; components with a single
    marker are kept as they are. Pixels never leave their component.
    """
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.int32)
    next_id = 1
    for lab in range(1, int(labels.max(initial=0)) + 1):
        region = labels == lab
        if not region.any():
            continue
        ys, xs = np.nonzero(region)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        # one-pixel margin so the crop border counts as background
        sub = np.pad(region[y0:y1, x0:x1], 1)
        dist = distance_transform(sub)
        markers = find_markers(dist, sub, min_separation)
        if len(markers) < 2:
            out[region] = next_id
            next_id += 1
            continue
        parts = _grow(-dist, sub, markers)[1:-1, 1:-1]
        crop = out[y0:y1, x0:x1]
        for k in range(1, len(markers) + 1):
            piece = parts == k
            crop[piece] = next_id
            next_id += 1
    return relabel_contiguous(out)


def instances_from_probs(
    probs: np.ndarray, threshold: float = 0.5, min_separation: float = 10.0, split: bool = True
) -> np.ndarray:
    """Threshold -> connected components -> marker split, gated by the binary mask."""
    probs = np.asarray(probs)
    if probs.ndim == 3:
        probs = probs[0]
    binary = probs > threshold
    inst = connected_components(binary)
    if split:
        inst = split_touching(inst, min_separation)
    inst[~binary] = 0
    return inst


def validate_instance_map(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0:
        raise ValueError("negative label")
    ids = np.unique(labels[labels != 0])
    if len(ids) and not np.array_equal(ids, np.arange(1, len(ids) + 1)):
        raise ValueError("labels are not contiguous 1..K")
    for lab in ids:
        _, n = ndimage.label(labels == lab, structure=EIGHT)
        if n != 1:
            raise ValueError(f"label {lab} is not 8-connected")


# -- file formats ------------------------------------------------------------
def write_instance_png(path, labels: np.ndarray) -> None:
    from PIL import Image

    labels = np.asarray(labels)
    if labels.max(initial=0) >= 65536:
        raise ValueError("16-bit instance maps hold at most 65535 labels")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path))


def read_instance_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im).astype(np.int32)


def write_instance_csv(path, labels: np.ndarray) -> None:
    """Sidecar table ``label,area,centroid_x,centroid_y``."""
    labels = np.asarray(labels)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label", "area", "centroid_x", "centroid_y"])
        for lab in range(1, int(labels.max(initial=0)) + 1):
            ys, xs = np.nonzero(labels == lab)
            if len(ys):
                wr.writerow([lab, len(ys), f"{xs.mean():.4f}", f"{ys.mean():.4f}"])
