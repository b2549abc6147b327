"""Perturbation and segmentation tests for saliency maps.

Every ranking breaks ties by row-major pixel index, lower index first, so
all results are deterministic for a fixed dataset and model.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError

FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray          # [H, W, C] in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ContractError(
                f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")


@dataclass(frozen=True)
class PerturbationResult:
    fractions: tuple
    accuracy: tuple
    auc: float


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    map: float
    pixel_acc: float
    mf1: float

    def as_dict(self):
        return {"mIoU": self.miou, "mAP": self.map, "Pixel Acc": self.pixel_acc, "mF1": self.mf1}


def thread_count(default: Optional[int] = None) -> int:
    """Worker count, capped by ``ATTNLENS_THREADS`` when it is set."""
    n = default or os.cpu_count() or 1
    cap = os.environ.get("ATTNLENS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ContractError(f"ATTNLENS_THREADS must be an integer, got {cap!r}") from None
    return n


def _parallel_map(fn, items):
    workers = thread_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- perturbation -----------------------------------------------------------

def removal_order(pixel_map, polarity: str) -> np.ndarray:
    """Flat pixel indices in removal order."""
    flat = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if polarity == "positive":
        return np.argsort(-flat, kind="stable")
    if polarity == "negative":
        return np.argsort(flat, kind="stable")
    raise ContractError(f"polarity must be positive or negative, got {polarity!r}")


def removal_count(fraction: float, n_pixels: int) -> int:
    # Guard against 0.1*30 -> 3.0000000000000004 rounding up to 4.
    return int(math.ceil(fraction * n_pixels - 1e-9))


def perturb_image(image, pixel_map, fraction: float, polarity: str, fill: float = 0.0):
    """Replace the ``ceil(fraction * H * W)`` most (positive) or least
    (negative) relevant pixels by ``fill`` across all channels."""
    if not 0 <= fraction < 1:
        raise ContractError(f"fraction must lie in [0, 1), got {fraction}")
    image = np.array(image, copy=True)
    h, w = image.shape[:2]
    if np.shape(pixel_map) != (h, w):
        raise ContractError(f"pixel map {np.shape(pixel_map)} does not match image {(h, w)}")
    k = removal_count(fraction, h * w)
    if k:
        idx = removal_order(pixel_map, polarity)[:k]
        rows, cols = np.unravel_index(idx, (h, w))
        image[rows, cols] = fill
    return image


def auc(fractions: Sequence[float], accuracy: Sequence[float]) -> float:
    """Trapezoid area under the accuracy curve over the fraction axis."""
    return float(np.trapezoid(np.asarray(accuracy, dtype=np.float64),
                              np.asarray(fractions, dtype=np.float64)))


def perturbation_curve(model, dataset, heatmap_fn: Callable, polarity: str,
                       target_mode: str = "top", *, fractions=FRACTIONS,
                       upsample_method: str = "nearest", fill: float = 0.0,
                       pixel_maps=None) -> PerturbationResult:
    """Accuracy as pixels are removed in relevance order.

    ``heatmap_fn(model, image, class_index) -> pixel map [H, W]`` is called
    once per image. In ``top`` mode both the explained class and the
    reference for accuracy are the prediction on the clean image; in
    ``target`` mode both are the ground-truth label. ``pixel_maps`` may
    supply precomputed maps (one per sample) instead.
    """
    if not dataset:
        raise ContractError("perturbation needs a non-empty dataset")
    if target_mode not in ("top", "target"):
        raise ContractError(f"target mode must be top or target, got {target_mode!r}")
    fractions = tuple(fractions)
    if list(fractions) != sorted(set(fractions)):
        raise ContractError("fractions must be strictly increasing")

    def one(i):
        sample = dataset[i]
        ref = model.predict(sample.image) if target_mode == "top" else sample.label
        pmap = pixel_maps[i] if pixel_maps is not None else heatmap_fn(model, sample.image, ref)
        hits = []
        for f in fractions:
            img = sample.image if f == 0 else perturb_image(sample.image, pmap, f, polarity, fill)
            hits.append(model.predict(img) == ref)
        return hits

    hits = np.array(_parallel_map(one, list(range(len(dataset)))), dtype=np.float64)
    acc = tuple(float(a) for a in hits.mean(axis=0))
    return PerturbationResult(fractions=fractions, accuracy=acc, auc=auc(fractions, acc))


# --- segmentation -----------------------------------------------------------

def binarize(pixel_map) -> np.ndarray:
    """Foreground where the map exceeds its own mean."""
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    return pixel_map > pixel_map.mean()


def average_precision(scores, positives) -> float:
    """AP of a ranking by descending score (ties: lower pixel index first)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=bool).reshape(-1)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive")
    ranked = positives[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, ranked.size + 1)
    return float(precision[ranked].sum() / n_pos)


def _iou(pred, gt):
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


def _f1(pred, gt):
    tp = np.logical_and(pred, gt).sum()
    denom = pred.sum() + gt.sum()
    return 1.0 if denom == 0 else float(2 * tp / denom)


def seg_metrics(pixel_map, gt_mask) -> SegMetrics:
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    gt = np.asarray(gt_mask, dtype=bool)
    if pixel_map.shape != gt.shape:
        raise ContractError(f"pixel map {pixel_map.shape} and mask {gt.shape} differ")
    if gt.all() or not gt.any():
        raise ContractError("ground-truth mask needs both foreground and background")
    pred = binarize(pixel_map)
    return SegMetrics(
        miou=(_iou(pred, gt) + _iou(~pred, ~gt)) / 2,
        map=average_precision(pixel_map, gt),
        pixel_acc=float((pred == gt).mean()),
        mf1=(_f1(pred, gt) + _f1(~pred, ~gt)) / 2,
    )


def segmentation_scores(dataset, pixel_maps) -> SegMetrics:
    """Per-sample metrics averaged over the dataset."""
    per = [seg_metrics(p, s.mask) for s, p in zip(dataset, pixel_maps)]
    if not per:
        raise ContractError("segmentation needs a non-empty dataset")
    return SegMetrics(*(float(np.mean([getattr(m, f) for m in per]))
                        for f in ("miou", "map", "pixel_acc", "mf1")))


# --- data -------------------------------------------------------------------

def make_synthetic_dataset(seed: int, n: int, size: int = 16, noise: float = 0.1,
                           channels: int = 1) -> list:
    """Bright rectangles on a noisy background; the label is the quadrant.

    Quadrants are numbered 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right. Each rectangle lies entirely inside its quadrant and
    its mask is the ground-truth foreground.
    """
    if n < 1:
        raise ContractError("dataset size must be at least 1")
    if size < 4 or size % 2:
        raise ContractError("image size must be even and at least 4")
    rng = np.random.default_rng(seed)
    half = size // 2
    out = []
    for _ in range(n):
        label = int(rng.integers(4))
        rh = int(rng.integers(2, half + 1))
        rw = int(rng.integers(2, half + 1))
        top = (label // 2) * half + int(rng.integers(0, half - rh + 1))
        left = (label % 2) * half + int(rng.integers(0, half - rw + 1))
        background = rng.uniform(0.0, noise, size=(size, size, channels)) if noise > 0 \
            else np.zeros((size, size, channels))
        image = background.astype(np.float32)
        mask = np.zeros((size, size), dtype=bool)
        mask[top:top + rh, left:left + rw] = True
        image[mask] = 1.0
        out.append(LabeledSample(image=image, label=label, mask=mask))
    return out
