"""Evaluation: voxel mIoU/IoU, RayIoU, planning L2, collision rate, Copy&Paste."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridGeometry, Pose, SemanticGrid, transform_point
from .raycast import cast_rays
from .raygen import RayBundle

RAYIOU_THRESHOLDS = (1.0, 2.0, 4.0)
EGO_BOX = (4.08, 1.85)


@dataclass
class ConfusionCounts:
    """Per-category TP/FP/FN tallies; accumulate with ``+``."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    geo: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))  # occupied TP, FP, FN

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.geo + other.geo)

    def iou(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


def confusion(pred: SemanticGrid, gt: SemanticGrid, mask: np.ndarray | None = None) -> ConfusionCounts:
    if pred.geometry != gt.geometry or pred.num_classes != gt.num_classes:
        raise ValueError("prediction and ground truth grids differ in geometry or taxonomy")
    c = gt.num_classes
    p = pred.categories.ravel().astype(np.int64)
    g = gt.categories.ravel().astype(np.int64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape[0] != p.shape[0]:
            raise ValueError("mask does not match grid size")
        p, g = p[m], g[m]
    cm = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    free = gt.free_id
    po, go = p != free, g != free
    geo = np.array([np.sum(po & go), np.sum(po & ~go), np.sum(~po & go)], dtype=np.int64)
    return ConfusionCounts(tp, fp, fn, geo)


def summarize(counts: ConfusionCounts, free_id: int) -> tuple[float, np.ndarray, float]:
    """(mIoU, per-category IoU with nan for absent categories, geometric IoU)."""
    iou = counts.iou()
    present = (counts.tp + counts.fp + counts.fn) > 0
    present[free_id] = False
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    tp, fp, fn = counts.geo
    geo = float(tp / (tp + fp + fn)) if tp + fp + fn > 0 else float("nan")
    per = iou.copy()
    per[free_id] = np.nan
    return miou, per, geo


def miou(pred: SemanticGrid, gt: SemanticGrid, mask=None) -> tuple[float, np.ndarray, float]:
    """mIoU over categories present in gt or pred (free excluded), per-category IoU, geometric IoU."""
    return summarize(confusion(pred, gt, mask), gt.free_id)


# -- RayIoU ---------------------------------------------------------------------------

@dataclass
class RayIoUReport:
    thresholds: tuple[float, ...]
    tp: np.ndarray   # (n_thresholds, C)
    fp: np.ndarray
    fn: np.ndarray
    free_id: int

    def __add__(self, other: "RayIoUReport") -> "RayIoUReport":
        return RayIoUReport(self.thresholds, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                            self.free_id)

    def per_threshold(self) -> np.ndarray:
        out = []
        for t in range(len(self.thresholds)):
            denom = self.tp[t] + self.fp[t] + self.fn[t]
            present = denom > 0
            present[self.free_id] = False
            out.append(float(np.mean(self.tp[t][present] / denom[present])) if present.any() else float("nan"))
        return np.array(out)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_threshold()))

    def as_dict(self) -> dict:
        vals = self.per_threshold()
        d = {f"{t:g}m": float(v) for t, v in zip(self.thresholds, vals)}
        d["mean"] = float(np.mean(vals))
        return d


def rayiou_counts(pred_hit: tuple[np.ndarray, np.ndarray], gt_hit: tuple[np.ndarray, np.ndarray],
                  num_classes: int, thresholds=RAYIOU_THRESHOLDS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tally TP/FP/FN from per-ray first hits (depth, category; category -1 = miss)."""
    pd, pc = pred_hit
    gd, gc = gt_hit
    tp = np.zeros((len(thresholds), num_classes), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    both = (pc >= 0) & (gc >= 0) & (pc == gc)
    for ti, tau in enumerate(thresholds):
        with np.errstate(invalid="ignore"):
            match = both & (np.abs(pd - gd) < tau)
        tp[ti] = np.bincount(gc[match], minlength=num_classes)
        fp_rays = (pc >= 0) & ~match
        fn_rays = (gc >= 0) & ~match
        fp[ti] = np.bincount(pc[fp_rays], minlength=num_classes)
        fn[ti] = np.bincount(gc[fn_rays], minlength=num_classes)
    return tp, fp, fn


def ray_iou(pred: SemanticGrid, gt: SemanticGrid, rays: RayBundle,
            thresholds=RAYIOU_THRESHOLDS) -> RayIoUReport:
    """A ray is a TP for category c at threshold tau when both grids' first hits
    have category c and depths within tau. Otherwise a pred hit counts as FP for
    the predicted category and a gt hit as FN for the gt category."""
    if pred.geometry != gt.geometry:
        raise ValueError("prediction and ground truth grids differ in geometry")
    p = cast_rays(pred, rays.origins, rays.dirs)
    g = cast_rays(gt, rays.origins, rays.dirs)
    tp, fp, fn = rayiou_counts(p, g, gt.num_classes, thresholds)
    return RayIoUReport(tuple(thresholds), tp, fp, fn, gt.free_id)


# -- planning --------------------------------------------------------------------------

def planning_l2(pred, gt, horizons=(1, 2, 3)) -> dict[str, float]:
    """L2 distance at each horizon step (1-based) and their average.

    ``pred``/``gt`` are (f, 2) or batched (S, f, 2) waypoint arrays.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if max(horizons) > pred.shape[1]:
        raise ValueError(f"horizon {max(horizons)} exceeds trajectory length {pred.shape[1]}")
    out = {}
    for h in horizons:
        out[str(h)] = float(np.mean(np.linalg.norm(pred[:, h - 1] - gt[:, h - 1], axis=1)))
    out["avg"] = float(np.mean([out[str(h)] for h in horizons]))
    return out


def waypoint_headings(waypoints: np.ndarray) -> np.ndarray:
    """Heading at each waypoint from the previous one (start at the ego origin)."""
    pts = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=float)])
    seg = np.diff(pts, axis=0)
    heads = np.zeros(len(seg))
    last = 0.0
    for i, (dx, dy) in enumerate(seg):
        if math.hypot(dx, dy) > 1e-6:
            last = math.atan2(dy, dx)
        heads[i] = last
    return heads


def footprint_voxels(geometry: GridGeometry, center, heading: float, box=EGO_BOX) -> np.ndarray:
    """(i, j) columns whose voxel centers fall inside the ego rectangle."""
    length, width = box
    x0, y0 = float(center[0]), float(center[1])
    r = 0.5 * math.hypot(length, width)
    res = geometry.resolution
    ox, oy = geometry.origin[0], geometry.origin[1]
    i_lo = max(0, int(math.floor((x0 - r - ox) / res)))
    i_hi = min(geometry.dims[0] - 1, int(math.floor((x0 + r - ox) / res)))
    j_lo = max(0, int(math.floor((y0 - r - oy) / res)))
    j_hi = min(geometry.dims[1] - 1, int(math.floor((y0 + r - oy) / res)))
    if i_lo > i_hi or j_lo > j_hi:
        return np.zeros((0, 2), dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    cx = ox + res * (ii + 0.5) - x0
    cy = oy + res * (jj + 0.5) - y0
    c, s = math.cos(heading), math.sin(heading)
    along = c * cx + s * cy
    across = -s * cx + c * cy
    inside = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
    return np.stack([ii[inside], jj[inside]], axis=1)


def collision_rate(pred, gt_grids, dynamic_categories, box=EGO_BOX,
                   frame_transforms=None) -> dict[str, float]:
    """Fraction of samples whose ego footprint overlaps a dynamic voxel, per horizon.

    ``pred`` is (f, 2) or (S, f, 2) in the current ego frame; ``gt_grids`` is a
    list (per sample) of f future grids. ``frame_transforms`` optionally gives,
    per sample and horizon, the Pose from the current ego frame into that
    future grid's frame.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.ndim == 2:
        pred = pred[None]
        gt_grids = [gt_grids]
        if frame_transforms is not None:
            frame_transforms = [frame_transforms]
    s, f, _ = pred.shape
    if len(gt_grids) != s:
        raise ValueError("need one list of future grids per trajectory")
    dyn = np.asarray(sorted(dynamic_categories), dtype=np.int64)
    hits = np.zeros((s, f), dtype=bool)
    for si in range(s):
        grids = gt_grids[si]
        if grids is None or len(grids) < f or any(g is None for g in grids[:f]):
            raise ValueError(f"missing ground-truth grid for sample {si}")
        heads = waypoint_headings(pred[si])
        for h in range(f):
            center = np.array([pred[si, h, 0], pred[si, h, 1], 0.0])
            heading = heads[h]
            if frame_transforms is not None:
                tf: Pose = frame_transforms[si][h]
                center = transform_point(tf, center)
                heading += tf.yaw
            cols = footprint_voxels(grids[h].geometry, center, heading, box)
            if len(cols):
                column_cats = grids[h].categories[cols[:, 0], cols[:, 1], :]
                hits[si, h] = bool(np.isin(column_cats, dyn).any())
    out = {str(h + 1): float(hits[:, h].mean()) for h in range(f)}
    out["avg"] = float(hits.mean())
    return out


def copy_paste_baseline(current: SemanticGrid, horizon: int) -> list[SemanticGrid]:
    """Repeat the current prediction for every future frame."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return [current] * horizon
