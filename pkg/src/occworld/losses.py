"""Training objectives for 2D rendering supervision, 3D occupancy and trajectories."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .render import OPACITY_GUARD, RenderOutput

SILOG_BETA = 0.85
DEPTH_CLAMP = 1e-3
FOCAL_GAMMA = 2.0
_LOG_FLOOR = 1e-12


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0
    semantic: float = 1.0
    rgb: float = 1.0
    focal: float = 1.0
    lovasz: float = 1.0
    scal_sem: float = 1.0
    scal_geo: float = 1.0
    trajectory: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _mask(mask, n: int) -> np.ndarray:
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("loss mask selects no elements")
    return m


# -- 2D rendering terms -------------------------------------------------------------

def silog_depth_loss(pred: Tensor, gt, mask=None, beta: float = SILOG_BETA) -> Tensor:
    """Scale-invariant log depth error: sqrt(mean(g^2) - beta * mean(g)^2), g = log pred - log gt."""
    gt = np.asarray(gt)
    m = _mask(mask, gt.shape[0])
    sel = np.flatnonzero(m)
    p = ag.gather(pred, sel)
    g = ag.log(ag.clamp_min(p, DEPTH_CLAMP)) - np.log(gt[sel]).astype(p.dtype)
    inner = ag.mean(g * g) - beta * ag.mean(g) ** 2
    return ag.sqrt(ag.clamp_min(inner, 1e-14))


def semantic_ce_loss(logits: Tensor, gt, mask=None) -> Tensor:
    """Mean cross-entropy of softmax(accumulated logits) against per-ray categories."""
    gt = np.asarray(gt, dtype=np.int64)
    m = _mask(mask, gt.shape[0])
    sel = np.flatnonzero(m)
    if gt[sel].min() < 0 or gt[sel].max() >= logits.shape[1]:
        raise ValueError("semantic targets out of range")
    logp = ag.log_softmax(ag.gather(logits, sel))
    picked = ag.take_along(logp, gt[sel][:, None], axis=1)
    return -ag.mean(picked)


def rgb_l1_loss(pred: Tensor, gt) -> Tensor:
    gt = np.asarray(gt, dtype=pred.dtype)
    return ag.mean(ag.abs_(pred - gt))


@dataclass
class FrameLabels:
    depth: np.ndarray
    semantic: np.ndarray   # -1 where no surface
    rgb: np.ndarray


def frame_2d_terms(rendered: RenderOutput, labels: FrameLabels,
                   opacity_guard: float = OPACITY_GUARD) -> dict[str, Tensor | None]:
    """Depth, semantic and RGB terms for one frame. Depth and semantic terms use
    rays with a surface label and rendered opacity >= guard; RGB uses all rays.
    A term whose mask is empty comes back as None."""
    valid = (np.asarray(labels.semantic) >= 0) & (rendered.opacity.data >= opacity_guard)
    terms: dict[str, Tensor | None] = {"depth": None, "semantic": None}
    if valid.any():
        terms["depth"] = silog_depth_loss(rendered.depth, labels.depth, valid)
        terms["semantic"] = semantic_ce_loss(rendered.semantics, labels.semantic, valid)
    terms["rgb"] = rgb_l1_loss(rendered.color, labels.rgb)
    return terms


def temporal_2d_loss(frames: list[tuple[RenderOutput, FrameLabels]], weights: LossWeights,
                     components: dict[str, float] | None = None) -> Tensor:
    """Sum over frames of weighted depth, semantic and RGB terms.

    ``components`` (if given) receives the unweighted per-term totals.
    """
    total = None
    acc = {"depth": 0.0, "semantic": 0.0, "rgb": 0.0}
    lam = {"depth": weights.depth, "semantic": weights.semantic, "rgb": weights.rgb}
    for rendered, labels in frames:
        for name, term in frame_2d_terms(rendered, labels).items():
            if term is None:
                continue
            acc[name] += term.item()
            contrib = term * lam[name]
            total = contrib if total is None else total + contrib
    if components is not None:
        components.update(acc)
    if total is None:
        return Tensor(np.zeros(()))
    return total


# -- 3D occupancy terms ----------------------------------------------------------------

def focal_loss(logits: Tensor, gt, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean over voxels of -(1 - p_gt)^gamma * log p_gt."""
    gt = np.asarray(gt, dtype=np.int64).reshape(-1, 1)
    logp = ag.take_along(ag.log_softmax(logits), gt, axis=1)
    if gamma == 0:
        return -ag.mean(logp)
    p = ag.exp(logp)
    mod = ag.clamp_min(1.0 - p, 0.0) ** gamma
    return -ag.mean(mod * logp)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at a sorted indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.shape[0] > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(probs: Tensor, gt, classes: str = "present") -> Tensor:
    """Lovasz-softmax over voxels; ``probs`` is (N, C) probabilities."""
    gt = np.asarray(gt, dtype=np.int64).ravel()
    c_total = probs.shape[1]
    cats = np.unique(gt) if classes == "present" else np.arange(c_total)
    losses = []
    for c in cats:
        fg = (gt == c).astype(probs.dtype)
        pc = probs[:, int(c)]
        err = ag.abs_(pc - fg)
        order = np.argsort(-err.data, kind="stable")
        err_sorted = ag.gather(err, order)
        grad = lovasz_grad(fg[order]).astype(probs.dtype)
        losses.append(ag.tsum(err_sorted * grad))
    if not losses:
        return Tensor(np.zeros((), dtype=probs.dtype))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def _safe_log(x: Tensor) -> Tensor:
    return ag.log(ag.clamp_min(x, _LOG_FLOOR))


def _affinity_terms(p: Tensor, target: np.ndarray) -> list[Tensor]:
    """-log precision, -log recall, -log specificity for one soft/binary pair;
    terms with empty denominators are skipped."""
    target = target.astype(p.dtype)
    terms = []
    inter = ag.tsum(p * target)
    p_sum = ag.tsum(p)
    if p_sum.item() > 0:
        terms.append(-_safe_log(inter / p_sum))
    t_sum = float(target.sum())
    if t_sum > 0:
        terms.append(-_safe_log(inter * (1.0 / t_sum)))
    neg = 1.0 - target
    n_sum = float(neg.sum())
    if n_sum > 0:
        terms.append(-_safe_log(ag.tsum((1.0 - p) * neg) * (1.0 / n_sum)))
    return terms


def scene_class_affinity_losses(probs: Tensor, gt, free_id: int) -> tuple[Tensor, Tensor]:
    """Semantic and geometric scene-class affinity losses on (N, C) probabilities."""
    gt = np.asarray(gt, dtype=np.int64).ravel()
    zero = Tensor(np.zeros((), dtype=probs.dtype))
    sem_total, count = zero, 0
    for c in range(probs.shape[1]):
        target = gt == c
        if not target.any():
            continue
        count += 1
        for t in _affinity_terms(probs[:, c], target):
            sem_total = sem_total + t
    sem = sem_total * (1.0 / count) if count else zero
    occupied_p = 1.0 - probs[:, free_id]
    geo = zero
    for t in _affinity_terms(occupied_p, gt != free_id):
        geo = geo + t
    return sem, geo


def occupancy_3d_loss(logits: Tensor, gt, weights: LossWeights, free_id: int,
                      components: dict[str, float] | None = None) -> Tensor:
    """Weighted focal + Lovasz-softmax + semantic/geometric affinity losses."""
    gt = np.asarray(gt).ravel()
    total = Tensor(np.zeros((), dtype=logits.dtype))
    parts: dict[str, float] = {}
    if weights.focal:
        t = focal_loss(logits, gt)
        parts["focal"] = t.item()
        total = total + t * weights.focal
    need_probs = weights.lovasz or weights.scal_sem or weights.scal_geo
    if need_probs:
        probs = ag.softmax(logits, axis=1)
        if weights.lovasz:
            t = lovasz_softmax_loss(probs, gt)
            parts["lovasz"] = t.item()
            total = total + t * weights.lovasz
        if weights.scal_sem or weights.scal_geo:
            sem, geo = scene_class_affinity_losses(probs, gt, free_id)
            parts["scal_sem"], parts["scal_geo"] = sem.item(), geo.item()
            total = total + sem * weights.scal_sem + geo * weights.scal_geo
    if components is not None:
        components.update(parts)
    return total


def trajectory_l2_loss(pred: Tensor, gt) -> Tensor:
    """Mean over horizon steps of squared Euclidean waypoint error."""
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"trajectory horizon mismatch: pred {pred.shape} vs gt {gt.shape}")
    diff = pred - gt
    return ag.mean(ag.tsum(diff * diff, axis=1))


class LossLog:
    """Append-only CSV of (step, stage, component, value)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(["step", "stage", "component", "value"])

    def append(self, step: int, stage: str, components: dict[str, float]) -> None:
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for name, value in components.items():
                w.writerow([step, stage, name, repr(float(value))])
