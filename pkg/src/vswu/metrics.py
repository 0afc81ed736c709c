"""Segmentation quality metrics.

Surface distances use four-connectivity boundaries (image border counts as
outside) and pool the bidirectional nearest-surface distances into one set
before taking the percentile or mean, so HD95 and ASD are symmetric by
construction.  Empty masks make the distance metrics undefined; they are
flagged rather than poisoning aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|); two empty masks count as 1.0."""
    pred, gt = _check_pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / denom


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one of their 4-neighbours outside, or on
    the image border; returned as a [K, 2] array of (y, x) coordinates."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def _pooled_surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    pa = boundary_pixels(a)
    pb = boundary_pixels(b)
    if len(pa) == 0 or len(pb) == 0:
        return None
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return np.concatenate([d_ab, d_ba])


def hd95(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """95th percentile of pooled bidirectional surface distances, in
    pixels; None when either mask is empty."""
    pred, gt = _check_pair(pred, gt)
    pooled = _pooled_surface_distances(pred, gt)
    if pooled is None:
        return None
    return float(np.percentile(pooled, 95))


def asd(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Mean pooled bidirectional surface distance; None when either mask
    is empty."""
    pred, gt = _check_pair(pred, gt)
    pooled = _pooled_surface_distances(pred, gt)
    if pooled is None:
        return None
    return float(pooled.mean())


def sens_spec(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(sensitivity, specificity); empty denominators fall back to 1.0."""
    pred, gt = _check_pair(pred, gt)
    tp = np.logical_and(pred, gt).sum()
    tn = np.logical_and(~pred, ~gt).sum()
    fp = np.logical_and(pred, ~gt).sum()
    fn = np.logical_and(~pred, gt).sum()
    sens = tp / (tp + fn) if tp + fn > 0 else 1.0
    spec = tn / (tn + fp) if tn + fp > 0 else 1.0
    return float(sens), float(spec)


CHANNEL_NAMES = ("bolus", "pharynx")


@dataclass
class ChannelMetrics:
    dsc: float
    hd95: float | None
    asd: float | None
    sensitivity: float
    specificity: float
    n_pairs: int = 1
    n_distance_undefined: int = 0

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "hd95": self.hd95, "asd": self.asd,
                "sensitivity": self.sensitivity, "specificity": self.specificity,
                "n_pairs": self.n_pairs,
                "n_distance_undefined": self.n_distance_undefined}


@dataclass
class MetricsReport:
    channels: dict[str, ChannelMetrics]
    params: int = 0
    flops: int = 0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"channels": {k: v.to_dict() for k, v in self.channels.items()},
                "model": {"params": self.params, "flops": self.flops},
                "notes": self.notes}


def evaluate_pairs(pairs_by_channel: dict[str, list[tuple[np.ndarray, np.ndarray]]],
                   params: int = 0, flops: int = 0) -> MetricsReport:
    """Aggregate per-channel metrics over (pred, gt) mask pairs.

    DSC/sensitivity/specificity average over all pairs; HD95/ASD average
    over the pairs where both masks are nonempty, with the undefined count
    recorded.
    """
    channels = {}
    for name, pairs in pairs_by_channel.items():
        dscs, senss, specs, hd95s, asds = [], [], [], [], []
        undefined = 0
        for pred, gt in pairs:
            dscs.append(dsc(pred, gt))
            se, sp = sens_spec(pred, gt)
            senss.append(se)
            specs.append(sp)
            h = hd95(pred, gt)
            a = asd(pred, gt)
            if h is None:
                undefined += 1
            else:
                hd95s.append(h)
                asds.append(a)
        channels[name] = ChannelMetrics(
            dsc=float(np.mean(dscs)),
            hd95=float(np.mean(hd95s)) if hd95s else None,
            asd=float(np.mean(asds)) if asds else None,
            sensitivity=float(np.mean(senss)),
            specificity=float(np.mean(specs)),
            n_pairs=len(pairs),
            n_distance_undefined=undefined)
    return MetricsReport(
        channels=channels, params=params, flops=flops,
        notes={"flop_convention": "multiply+add counted as 2 operations",
               "distance_units": "pixels at input resolution"})
