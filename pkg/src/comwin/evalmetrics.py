"""Overlap, surface-distance and pseudo-label quality metrics on 2D label maps.

Distances use unit pixel spacing. ``None`` marks an undefined value; such
values are left out of aggregates and counted as missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def _mask(labels, c: int) -> np.ndarray:
    return np.asarray(labels) == c


def _check(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def overlap_metrics(pred, truth, c: int) -> tuple[float, float]:
    """``(dice, jaccard)`` for class ``c``; both masks empty gives ``(1, 1)``."""
    pred, truth = _check(pred, truth)
    p, t = _mask(pred, c), _mask(truth, c)
    inter = int(np.count_nonzero(p & t))
    union = int(np.count_nonzero(p | t))
    size = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if size == 0:
        return 1.0, 1.0
    return 2.0 * inter / size, inter / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask pixels 4-adjacent to a non-mask pixel or to the image edge."""
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~interior


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every surface pixel of ``src`` to the surface of ``dst``."""
    s_src, s_dst = surface(src), surface(dst)
    dist = ndimage.distance_transform_edt(~s_dst)
    return dist[s_src]


def surface_metrics(pred, truth, c: int) -> tuple[float, float] | None:
    """``(asd, hd95)`` over pooled directed distances, or ``None`` if exactly one mask is empty."""
    pred, truth = _check(pred, truth)
    p, t = _mask(pred, c), _mask(truth, c)
    p_any, t_any = bool(p.any()), bool(t.any())
    if not p_any and not t_any:
        return 0.0, 0.0
    if p_any != t_any:
        return None
    pooled = np.concatenate([directed_distances(p, t), directed_distances(t, p)])
    return float(pooled.mean()), float(np.percentile(pooled, 95, method="linear"))


def pseudo_quality(pseudo, truth, c: int = 1) -> tuple[float | None, float | None]:
    """Foreground ``(precision, recall)`` for class ``c``; zero denominators give ``None``."""
    pseudo, truth = _check(pseudo, truth)
    p, t = _mask(pseudo, c), _mask(truth, c)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def _mean_std(values: list[float | None]) -> dict:
    present = [v for v in values if v is not None]
    out = {"mean": None, "std": None, "n": len(present), "missing": len(values) - len(present)}
    if present:
        arr = np.asarray(present, dtype=np.float64)
        out["mean"] = float(arr.mean())
        out["std"] = float(arr.std())
    return out


METRICS = ("dice", "jaccard", "asd", "hd95")


@dataclass
class MetricReport:
    classes: list[int]
    sample_names: list[str] = field(default_factory=list)
    # per_sample[i][c] = {"dice": .., "jaccard": .., "asd": .., "hd95": ..}
    per_sample: list[dict[int, dict[str, float | None]]] = field(default_factory=list)

    def add(self, name: str, pred, truth) -> None:
        row = {}
        for c in self.classes:
            dice, jac = overlap_metrics(pred, truth, c)
            surf = surface_metrics(pred, truth, c)
            asd, hd = surf if surf is not None else (None, None)
            row[c] = {"dice": dice, "jaccard": jac, "asd": asd, "hd95": hd}
        self.sample_names.append(name)
        self.per_sample.append(row)

    def sample_mean(self, i: int, metric: str) -> float | None:
        vals = [self.per_sample[i][c][metric] for c in self.classes]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def aggregate(self) -> dict:
        agg = {}
        for c in self.classes:
            agg[str(c)] = {m: _mean_std([row[c][m] for row in self.per_sample]) for m in METRICS}
        agg["mean"] = {
            m: _mean_std([self.sample_mean(i, m) for i in range(len(self.per_sample))])
            for m in METRICS
        }
        return agg

    @property
    def mean_dice(self) -> float:
        value = self.aggregate()["mean"]["dice"]["mean"]
        return math.nan if value is None else value

    def to_json(self) -> dict:
        return {
            "classes": self.classes,
            "samples": [
                {"name": n, "metrics": {str(c): row[c] for c in self.classes}}
                for n, row in zip(self.sample_names, self.per_sample)
            ],
            "aggregate": self.aggregate(),
        }

    def csv_rows(self) -> list[list]:
        header = ["sample", "class"] + list(METRICS)
        rows = [header]
        for n, row in zip(self.sample_names, self.per_sample):
            for c in self.classes:
                rows.append([n, c] + [row[c][m] for m in METRICS])
        agg = self.aggregate()
        for key, block in agg.items():
            rows.append([f"mean[{key}]", key] + [block[m]["mean"] for m in METRICS])
            rows.append([f"std[{key}]", key] + [block[m]["std"] for m in METRICS])
        return rows
