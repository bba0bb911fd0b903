"""Semantic and instance segmentation metrics.

Ratio metrics are reported on a percent scale, Hausdorff distance in pixels.
Conventions for empty masks:

* Dice / F1 / per-class IoU of two empty sets: 100.
* Hausdorff distance: 0 if both masks are empty, the image diagonal if only one is.
* AJI of two empty maps: 100.
* Panoptic quality with no matched pair: DQ = SQ = PQ = 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

CSV_FIELDS = ("dataset", "domain", "image_id", "dice", "miou", "f1", "hd", "aji", "dq", "sq", "pq")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    p, g = p != 0, g != 0
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return 200.0 * np.logical_and(p, g).sum() / denom


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def miou(pred, gt) -> float:
    """Mean of background and foreground IoU."""
    p, g = _pair(pred, gt)
    p, g = p != 0, g != 0
    return 50.0 * (_iou(p, g) + _iou(~p, ~g))


def f1(pred, gt) -> float:
    """Pixel-level foreground F1 (2·precision·recall / (precision + recall))."""
    p, g = _pair(pred, gt)
    p, g = p != 0, g != 0
    tp = np.logical_and(p, g).sum()
    fp = np.logical_and(p, ~g).sum()
    fn = np.logical_and(~p, g).sum()
    if tp + fp + fn == 0:
        return 100.0
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image edge."""
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hausdorff(pred, gt, percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets.

    ``percentile`` (e.g. 95) replaces the max of each directed distance set
    with that percentile.
    """
    p, g = _pair(pred, gt)
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return float(math.hypot(*p.shape))
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    if percentile is None:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def _overlaps(pred: np.ndarray, gt: np.ndarray):
    """Intersection matrix (gt × pred) and areas, for labels 1..max."""
    kp, kg = int(pred.max(initial=0)), int(gt.max(initial=0))
    joint = np.bincount((gt.astype(np.int64) * (kp + 1) + pred).ravel(), minlength=(kg + 1) * (kp + 1))
    joint = joint.reshape(kg + 1, kp + 1)
    area_g = joint.sum(axis=1)[1:]
    area_p = joint.sum(axis=0)[1:]
    return joint[1:, 1:].astype(np.float64), area_g.astype(np.float64), area_p.astype(np.float64)


def iou_matrix(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    inter, ag, ap = _overlaps(p, g)
    union = ag[:, None] + ap[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def aji(pred, gt) -> float:
    """Aggregated Jaccard Index.

    GT objects are visited in label order; each takes the unused predicted
    object of highest IoU. Unused predictions and GT objects without any
    overlapping candidate are added to the union.
    """
    p, g = _pair(pred, gt)
    inter, ag, ap = _overlaps(p, g)
    exists_g, exists_p = ag > 0, ap > 0
    if not exists_g.any() and not exists_p.any():
        return 100.0
    union = ag[:, None] + ap[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    used = np.zeros(len(ap), dtype=bool)
    num = den = 0.0
    for i in np.nonzero(exists_g)[0]:
        cand = np.where(used | ~exists_p, -1.0, iou[i])
        j = int(np.argmax(cand)) if len(cand) else -1
        if j < 0 or cand[j] <= 0:
            den += ag[i]
            continue
        used[j] = True
        num += inter[i, j]
        den += union[i, j]
    den += ap[exists_p & ~used].sum()
    return 100.0 * num / den if den > 0 else 0.0


@dataclass
class PanopticResult:
    dq: float
    sq: float
    pq: float
    tp: int
    fp: int
    fn: int


def panoptic(pred, gt, iou_thresh: float = 0.5) -> PanopticResult:
    """Detection, segmentation and panoptic quality under IoU > ``iou_thresh`` matching."""
    p, g = _pair(pred, gt)
    inter, ag, ap = _overlaps(p, g)
    iou = iou_matrix(p, g)
    exists_g, exists_p = ag > 0, ap > 0
    matched = iou > iou_thresh
    tp = int(matched.sum())
    fn = int(exists_g.sum()) - int(matched.any(axis=1).sum())
    fp = int(exists_p.sum()) - int(matched.any(axis=0).sum())
    if tp == 0:
        return PanopticResult(0.0, 0.0, 0.0, 0, fp, fn)
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(iou[matched].mean())
    return PanopticResult(100.0 * dq, 100.0 * sq, 100.0 * dq * sq, tp, fp, fn)


@dataclass
class MetricsReport:
    dice: float
    miou: float
    f1: float
    hd: float
    aji: float
    dq: float
    sq: float
    pq: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    dataset: str = ""
    domain: str = ""
    image_id: str = ""

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_FIELDS}


def score(pred_inst, gt_inst, hd_percentile: float | None = None, **tags) -> MetricsReport:
    """All eight metrics for one predicted/GT instance-map pair."""
    p, g = _pair(pred_inst, gt_inst)
    pan = panoptic(p, g)
    return MetricsReport(
        dice=dice(p, g),
        miou=miou(p, g),
        f1=f1(p, g),
        hd=hausdorff(p, g, hd_percentile),
        aji=aji(p, g),
        dq=pan.dq,
        sq=pan.sq,
        pq=pan.pq,
        tp=pan.tp,
        fp=pan.fp,
        fn=pan.fn,
        **tags,
    )


METRIC_NAMES = ("dice", "miou", "f1", "hd", "aji", "dq", "sq", "pq")


def mean_report(reports: list[MetricsReport], **tags) -> MetricsReport:
    vals = {m: float(np.mean([getattr(r, m) for r in reports])) for m in METRIC_NAMES}
    counts = {c: int(sum(getattr(r, c) for r in reports)) for c in ("tp", "fp", "fn")}
    return MetricsReport(**vals, **counts, **tags)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_reports_csv(path_or_file, reports: list[MetricsReport]) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        wr = csv.writer(fh)
        wr.writerow(CSV_FIELDS)
        for r in reports:
            row = r.row()
            wr.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    finally:
        if own:
            fh.close()
