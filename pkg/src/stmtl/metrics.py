"""Segmentation, saliency and scanpath metrics plus throughput measurement."""
from __future__ import annotations

import csv
import io
import math
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion
from scipy.spatial.distance import cdist

from .errors import ContractError, ShapeError

EIGHT = np.ones((3, 3), dtype=bool)
BCE_EPS = 1e-7


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


# -- segmentation --------------------------------------------------------------------

def dice(pred_mask, gt_mask) -> float:
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _present_classes(pred: np.ndarray, gt: np.ndarray) -> List[int]:
    return sorted(int(c) for c in np.union1d(np.unique(pred), np.unique(gt)) if c != 0)


def type_dice(pred_labels, gt_labels) -> float:
    """Mean per-class Dice over instrument classes present in either map."""
    p, g = np.asarray(pred_labels), np.asarray(gt_labels)
    _same_shape(p, g)
    classes = _present_classes(p, g)
    if not classes:
        return 1.0
    return float(np.mean([dice(p == c, g == c) for c in classes]))


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 8-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, bool)
    return m & ~binary_erosion(m, structure=EIGHT, border_value=0)


def hausdorff(pred_mask, gt_mask) -> float:
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    _same_shape(a, b)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return math.hypot(*a.shape)
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d = cdist(pa, pb)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def type_hausdorff(pred_labels, gt_labels) -> float:
    p, g = np.asarray(pred_labels), np.asarray(gt_labels)
    _same_shape(p, g)
    classes = _present_classes(p, g)
    if not classes:
        return 0.0
    return float(np.mean([hausdorff(p == c, g == c) for c in classes]))


# -- saliency ----------------------------------------------------------------------------

def saliency_bce(pred, target) -> float:
    p = np.clip(np.asarray(pred, np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target, np.float64)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p)))


def roc_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Area under the ROC curve from a threshold sweep over all scores (trapezoidal)."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tpr = [0.0] + [(len(pos) - np.searchsorted(pos_sorted, th, "left")) / len(pos) for th in thresholds]
    fpr = [0.0] + [(len(neg) - np.searchsorted(neg_sorted, th, "left")) / len(neg) for th in thresholds]
    return float(np.trapezoid(tpr, fpr) if hasattr(np, "trapezoid") else np.trapz(tpr, fpr))


def auc_borji(pred_sal, fixations: Sequence[Tuple[float, float]], n_splits: int = 100, seed: int = 0) -> float:
    """Mean ROC-AUC of fixation scores against uniformly sampled non-fixation pixels."""
    sal = np.asarray(pred_sal, np.float64)
    if len(fixations) == 0:
        raise ContractError("auc_borji needs at least one fixation")
    H, W = sal.shape
    rows = np.clip(np.round([f[1] for f in fixations]).astype(int), 0, H - 1)
    cols = np.clip(np.round([f[0] for f in fixations]).astype(int), 0, W - 1)
    fix = np.zeros((H, W), bool)
    fix[rows, cols] = True
    pool = np.flatnonzero(~binary_dilation(fix, structure=EIGHT).ravel())
    if pool.size == 0:
        raise ContractError("no pixels left to sample negatives from")
    pos = sal[rows, cols]
    flat = sal.ravel()
    rng = np.random.default_rng(seed)
    n = len(pos)
    scores = []
    for _ in range(n_splits):
        neg = flat[rng.choice(pool, size=n, replace=pool.size < n)]
        scores.append(roc_auc(pos, neg))
    return float(np.mean(scores))


# -- scanpaths ---------------------------------------------------------------------------

def extract_scanpath(pred_sal, pred_masks: Mapping[int, np.ndarray], reduce: str = "mean") -> List[int]:
    """Rank instruments by predicted saliency inside their predicted masks."""
    sal = np.asarray(pred_sal, np.float64)
    priority = {}
    for iid, m in pred_masks.items():
        m = np.asarray(m, bool)
        if not m.any():
            priority[iid] = 0.0
        elif reduce == "mean":
            priority[iid] = float(sal[m].mean())
        elif reduce == "sum":
            priority[iid] = float(sal[m].sum())
        else:
            raise ContractError(f"unknown reduction {reduce!r}")
    return sorted(priority, key=lambda i: (-priority[i], i))


def scanpath_accuracy(pred_paths: Sequence[Sequence[int]], gt_paths: Sequence[Sequence[int]]) -> Tuple[float, float]:
    """(top-1 match rate, mean positional match rate); frames with empty GT are skipped."""
    if len(pred_paths) != len(gt_paths):
        raise ShapeError(f"frame counts differ: {len(pred_paths)} vs {len(gt_paths)}")
    top1, avg = [], []
    for pred, gt in zip(pred_paths, gt_paths):
        if not gt:
            continue
        top1.append(float(bool(pred) and pred[0] == gt[0]))
        n = min(len(pred), len(gt))
        avg.append(sum(pred[r] == gt[r] for r in range(n)) / n if n else 0.0)
    if not top1:
        return 1.0, 1.0
    return float(np.mean(top1)), float(np.mean(avg))


# -- throughput --------------------------------------------------------------------------

def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()}"


def fps_benchmark(model, input_shape=(3, 64, 64), n_warmup: int = 2, n_timed: int = 10, seed: int = 0) -> float:
    """Median frames/sec of single-frame forward passes (batch size 1)."""
    from .blocks import stmtl_forward
    from .tensor import Tensor, no_grad

    if n_timed < 10:
        raise ContractError("n_timed must be at least 10")
    rng = np.random.default_rng(seed)
    dtype = np.float32 if model.cfg.dtype == "f32" else np.float64
    frames = [Tensor(rng.random((1,) + tuple(input_shape)).astype(dtype)) for _ in range(2)]
    was_training = model.training
    model.eval()
    rates = []
    try:
        with no_grad():
            for k in range(n_warmup + n_timed):
                start = time.perf_counter()
                stmtl_forward(frames[0], frames[1], None, model)
                elapsed = time.perf_counter() - start
                if k >= n_warmup:
                    rates.append(1.0 / max(elapsed, 1e-9))
    finally:
        if was_training:
            model.train()
    return float(statistics.median(rates))


# -- reports -------------------------------------------------------------------------------

METRIC_KEYS = ("binary_dice", "type_dice", "binary_hausdorff", "type_hausdorff",
               "saliency_bce", "auc_b", "scanpath_top1", "scanpath_avg")


@dataclass
class EvalReport:
    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fps: Optional[float] = None
    hardware: str = ""
    wall_clock_s: Optional[float] = None

    @property
    def mean(self) -> Dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in METRIC_KEYS}
        return {k: float(np.mean([r[k] for r in self.rows.values()])) for k in METRIC_KEYS}

    def to_csv(self) -> str:
        """Deterministic CSV: one row per sequence and a final mean row (timing lives in the summary)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sequence",) + METRIC_KEYS)
        for name, row in self.rows.items():
            w.writerow([name] + [f"{row[k]:.6f}" for k in METRIC_KEYS])
        m = self.mean
        w.writerow(["mean"] + [f"{m[k]:.6f}" for k in METRIC_KEYS])
        return buf.getvalue()

    def summary(self) -> str:
        m = self.mean
        width = max(len(k) for k in METRIC_KEYS) + 2
        lines = [f"{k:<{width}}{m[k]:.4f}" for k in METRIC_KEYS]
        if self.fps is not None:
            lines.append(f"{'fps':<{width}}{self.fps:.2f}  ({self.hardware})")
        if self.wall_clock_s is not None:
            lines.append(f"{'wall_clock_s':<{width}}{self.wall_clock_s:.1f}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def read_csv(text: str) -> Dict[str, Dict[str, float]]:
        reader = csv.DictReader(io.StringIO(text))
        return {row["sequence"]: {k: float(row[k]) for k in METRIC_KEYS} for row in reader}


def evaluate_sequence(seq, seg_labels: np.ndarray, saliency: np.ndarray, n_splits: int = 100,
                      seed: int = 0) -> Tuple[Dict[str, float], List[List[int]]]:
    """Score one sequence's predictions (label maps [T,H,W], saliency [T,H,W]).

    Returns the metric row and the predicted scanpaths.
    """
    T = seq.frames.shape[0]
    if seg_labels.shape != seq.masks.shape or saliency.shape != seq.heatmaps.shape:
        raise ShapeError("prediction shapes do not match the sequence")
    bd, td, bh, th, bce, auc, paths = [], [], [], [], [], [], []
    for t in range(T):
        p, g = seg_labels[t], seq.masks[t]
        bd.append(dice(p > 0, g > 0))
        td.append(type_dice(p, g))
        bh.append(hausdorff(p > 0, g > 0))
        th.append(type_hausdorff(p, g))
        bce.append(saliency_bce(saliency[t], seq.heatmaps[t]))
        if seq.fixations[t]:
            auc.append(auc_borji(saliency[t], [(x, y) for x, y, _ in seq.fixations[t]], n_splits, seed + t))
        masks = {iid: p == cls for iid, cls in seq.class_ids.items()}
        paths.append(extract_scanpath(saliency[t], masks))
    top1, avg = scanpath_accuracy(paths, seq.scanpaths)
    row = {
        "binary_dice": float(np.mean(bd)), "type_dice": float(np.mean(td)),
        "binary_hausdorff": float(np.mean(bh)), "type_hausdorff": float(np.mean(th)),
        "saliency_bce": float(np.mean(bce)), "auc_b": float(np.mean(auc)) if auc else float("nan"),
        "scanpath_top1": top1, "scanpath_avg": avg,
    }
    return row, paths
