"""Center-distance detection metrics.

Detections are matched greedily, highest confidence first, to the nearest
unmatched ground-truth object of the same class in the same frame within the
match radius (one cell by default).  ``toy_ap`` is the class-averaged
all-point area under the precision/recall curve.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

RANGE_BINS = ((0.0, 15.0), (15.0, math.inf))


@dataclass
class ToyMetrics:
    center_mae: float
    hit_rate: float
    toy_ap: float
    n_gt: int = 0
    n_det: int = 0
    n_matched: int = 0
    per_class: dict = field(default_factory=dict)
    per_range: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"toy_ap": self.toy_ap, "hit_rate": self.hit_rate, "center_mae": self.center_mae,
               "n_gt": self.n_gt, "n_det": self.n_det}
        for c, m in sorted(self.per_class.items()):
            out[f"ap_class{c}"] = m["toy_ap"]
        for name, m in self.per_range.items():
            out[f"ap_{name}"] = m["toy_ap"]
        return out

    def to_json(self) -> dict:
        return asdict(self)


def _det_tuple(d):
    if isinstance(d, Mapping):
        return int(d["frame"]), int(d["class"]), float(d["conf"]), float(d["box"][0]), float(d["box"][1])
    return int(d.frame), int(d.cls), float(d.confidence), float(d.box[0]), float(d.box[1])


def _gt_tuple(g):
    if isinstance(g, Mapping):
        return int(g["class"]), float(g["box"][0]), float(g["box"][1])
    return int(g.cls), float(g.box[0]), float(g.box[1])


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP for detections already sorted by confidence."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def _match(dets, gts, radius):
    """Greedy matching; returns per-detection TP flags (sorted order), distances, matched GT count, per-class data."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], dets[i][0], i))
    by_frame: dict[tuple[int, int], list[int]] = {}
    for j, (f, c, _, _) in enumerate(gts):
        by_frame.setdefault((f, c), []).append(j)
    used = np.zeros(len(gts), bool)
    tp = np.zeros(len(order), bool)
    dist = []
    for pos, i in enumerate(order):
        f, c, _, x, y = dets[i]
        best, best_d = -1, radius
        for j in by_frame.get((f, c), ()):
            if used[j]:
                continue
            d = math.hypot(gts[j][2] - x, gts[j][3] - y)
            if d <= best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
            tp[pos] = True
            dist.append(best_d)
    return order, tp, dist, used


def _summary(dets, gts, radius, classes) -> dict:
    order, tp, dist, used = _match(dets, gts, radius)
    cls_sorted = np.array([dets[i][1] for i in order], dtype=np.int64)
    gt_cls = np.array([g[1] for g in gts], dtype=np.int64)
    per_class = {}
    aps = []
    for c in classes:
        n = int((gt_cls == c).sum())
        ap = average_precision(tp[cls_sorted == c].astype(float), n)
        hits = int(used[gt_cls == c].sum())
        per_class[int(c)] = {"toy_ap": ap, "hit_rate": hits / n if n else 0.0, "n_gt": n}
        if n:
            aps.append(ap)
    return {"toy_ap": float(np.mean(aps)) if aps else 0.0,
            "hit_rate": float(used.mean()) if len(gts) else 0.0,
            "center_mae": float(np.mean(dist)) if dist else 0.0,
            "n_gt": len(gts), "n_det": len(dets), "n_matched": len(dist), "per_class": per_class}


def evaluate(dets: Iterable, gt: Mapping[int, Sequence], radius: float = 0.6,
             num_classes: int = 2) -> ToyMetrics:
    """Score detections (objects or JSON dicts) against per-frame ground truth."""
    D = [_det_tuple(d) for d in dets]
    G = [(int(f),) + _gt_tuple(g) for f, gs in gt.items() for g in gs]
    classes = range(num_classes)
    s = _summary(D, G, radius, classes)
    per_range = {}
    for lo, hi in RANGE_BINS:
        name = f"{lo:g}-{hi:g}m" if math.isfinite(hi) else f"{lo:g}m+"
        Dr = [d for d in D if lo <= math.hypot(d[3], d[4]) < hi]
        Gr = [g for g in G if lo <= math.hypot(g[2], g[3]) < hi]
        r = _summary(Dr, Gr, radius, classes)
        per_range[name] = {k: r[k] for k in ("toy_ap", "hit_rate", "center_mae", "n_gt")}
    return ToyMetrics(s["center_mae"], s["hit_rate"], s["toy_ap"], s["n_gt"], s["n_det"],
                      s["n_matched"], s["per_class"], per_range)
