"""Segmentation and classification metrics.

Saliency maps are compared with masks on the mask's grid: a coarser map is
nearest-resampled up first. Metrics that are undefined for an input (no
positive pixels, a single class) return ``None``; such entries are left out
of means.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from glam.maps import CLASSES


def to_grid(saliency, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-resample a 2-D map to ``shape`` (source index = floor(i*h/H))."""
    s = np.asarray(saliency, dtype=np.float64)
    h, w = s.shape
    H, W = shape
    if (h, w) == (H, W):
        return s
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return s[rows[:, None], cols[None, :]]


def dice(saliency, mask) -> float:
    """Soft Dice ``2 sum(S*G) / (sum(S^2) + sum(G^2))``; 0 when both are empty."""
    g = np.asarray(mask, dtype=np.float64)
    s = to_grid(saliency, g.shape)
    denom = float((s * s).sum() + (g * g).sum())
    if denom == 0.0:
        return 0.0
    return 2.0 * float((s * g).sum()) / denom


def _ap_from_sorted(scores_desc: np.ndarray, positives_desc: np.ndarray,
                    thresholds_desc: Optional[np.ndarray] = None) -> Optional[float]:
    n_pos = int(positives_desc.sum())
    if n_pos == 0:
        return None
    tp_cum = np.cumsum(positives_desc)
    if thresholds_desc is None:
        # last index of each run of equal scores = prediction set at that threshold
        ends = np.flatnonzero(np.r_[scores_desc[1:] != scores_desc[:-1], True])
        counts = ends + 1
        tps = tp_cum[ends]
    else:
        # number of scores >= tau, via search on the ascending view
        asc = scores_desc[::-1]
        counts = len(asc) - np.searchsorted(asc, thresholds_desc, side="left")
        keep = counts > 0
        counts = counts[keep]
        tps = tp_cum[counts - 1]
    precision = tps / counts
    recall = tps / n_pos
    increments = np.diff(np.r_[0.0, recall])
    return float((precision * increments).sum())


def _pxap(scores: np.ndarray, positives: np.ndarray, mode: str) -> Optional[float]:
    if mode not in ("exact", "grid256"):
        raise ValueError(f"unknown PxAP mode {mode!r}")
    order = np.argsort(-scores, kind="stable")
    thresholds = np.arange(255, -1, -1) / 255.0 if mode == "grid256" else None
    return _ap_from_sorted(scores[order], positives[order], thresholds)


def pxap_image(saliency, mask, mode: str = "exact") -> Optional[float]:
    """Average precision of one image's pixels, thresholds swept high to low."""
    g = np.asarray(mask) > 0
    s = to_grid(saliency, g.shape)
    return _pxap(s.ravel(), g.ravel(), mode)


@dataclass
class EvalPair:
    saliency: np.ndarray  # [h, w] for one class
    mask: np.ndarray      # [H, W] binary


def pxap_dataset(pairs: Iterable, mode: str = "exact") -> Optional[float]:
    """PxAP of all pixels of all pairs pooled into one precision-recall sweep."""
    scores, positives = [], []
    for pair in pairs:
        s, m = (pair.saliency, pair.mask) if isinstance(pair, EvalPair) else pair
        g = np.asarray(m) > 0
        scores.append(to_grid(s, g.shape).ravel())
        positives.append(g.ravel())
    if not scores:
        return None
    return _pxap(np.concatenate(scores), np.concatenate(positives), mode)


def auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """ROC AUC as the Mann-Whitney statistic, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_std(values: Iterable[Optional[float]]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def segmentation_report(maps: Sequence[np.ndarray], masks: Sequence[Optional[np.ndarray]],
                        classes: Sequence[str] = CLASSES) -> dict:
    """Table-style segmentation metrics for one map type.

    ``maps[i]`` is ``[C, h, w]`` and ``masks[i]`` is ``[C, H, W]`` (or
    ``None`` for an image without annotations). Per class, only images with
    a nonempty mask are scored.
    """
    report = {}
    for ci, name in enumerate(classes):
        dices, aps, pairs = [], [], []
        for s, m in zip(maps, masks):
            if m is None or not np.any(m[ci]):
                continue
            dices.append(dice(s[ci], m[ci]))
            aps.append(pxap_image(s[ci], m[ci]))
            pairs.append((s[ci], m[ci]))
        report[name] = {
            "dice": mean_std(dices),
            "pxap_image": mean_std(aps),
            "pxap_dataset": pxap_dataset(pairs) if pairs else None,
        }
    return report


def mean_dice(maps: Sequence[np.ndarray], masks: Sequence[Optional[np.ndarray]],
              classes: Sequence[str] = CLASSES) -> tuple[float, list[Optional[float]]]:
    """Mean over classes of the per-class mean Dice; the model-selection score."""
    per_class = []
    for ci in range(len(classes)):
        vals = [dice(s[ci], m[ci]) for s, m in zip(maps, masks)
                if m is not None and np.any(m[ci])]
        per_class.append(float(np.mean(vals)) if vals else None)
    defined = [v for v in per_class if v is not None]
    return (float(np.mean(defined)) if defined else 0.0), per_class
