"""Point extraction from score maps and the radius-based evaluation protocol."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

NMS_THRESHOLD = 0.5
NMS_RADIUS = 6.0
MATCH_RADIUS = 6.0


@dataclass
class DetectedPoint:
    row: int
    col: int
    objectness: float
    category: int = 0
    class_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0 + 1e-12:
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")


def nms(p_obj: np.ndarray, threshold: float = NMS_THRESHOLD, radius: float = NMS_RADIUS) -> List[DetectedPoint]:
    """Greedy non-maximum suppression on a 2-D score map.

    Pixels scoring at least ``threshold`` are visited by descending score
    (row-major order on ties); a pixel is kept unless an already kept pixel
    lies within Euclidean distance ``radius``.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    p = np.asarray(p_obj, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"nms expects a 2-D map, got shape {p.shape}")
    h, w = p.shape
    flat = p.ravel()
    cand = np.flatnonzero(flat >= threshold)
    cand = cand[np.argsort(-flat[cand], kind="stable")]
    suppressed = np.zeros((h, w), dtype=bool)
    r_int = int(math.floor(radius))
    dr, dc = np.mgrid[-r_int:r_int + 1, -r_int:r_int + 1]
    disk = dr * dr + dc * dc <= radius * radius
    offsets = np.stack([dr[disk], dc[disk]], axis=1)
    kept = []
    for idx in cand:
        r, c = divmod(int(idx), w)
        if suppressed[r, c]:
            continue
        kept.append(DetectedPoint(r, c, float(min(flat[idx], 1.0))))
        rr, cc = offsets[:, 0] + r, offsets[:, 1] + c
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        suppressed[rr[ok], cc[ok]] = True
    return kept


def assign_categories(points: Sequence[DetectedPoint], p_obj: np.ndarray, p_cond: np.ndarray) -> List[DetectedPoint]:
    """Label each point with the argmax of ``p_obj * p_cond`` over classes 0..K.

    Ties go to the lower class index, so a point can come out as background (0).
    """
    p_obj = np.asarray(p_obj)
    p_cond = np.asarray(p_cond)
    out = []
    for pt in points:
        probs = p_obj[pt.row, pt.col] * p_cond[:, pt.row, pt.col]
        out.append(DetectedPoint(pt.row, pt.col, pt.objectness, int(np.argmax(probs)), probs))
    return out


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: List[tuple]
    confusion: np.ndarray  # [annotated category, predicted category], TP pairs only


def _augment(det, adj, match_ann, match_det, seen) -> bool:
    for a in adj[det]:
        if a in seen:
            continue
        seen.add(a)
        if match_ann[a] is None or _augment(match_ann[a], adj, match_ann, match_det, seen):
            match_ann[a] = det
            match_det[det] = a
            return True
    return False


def match(points: Sequence[DetectedPoint], annotations: Sequence, radius: float = MATCH_RADIUS,
          num_categories: int = 4, repair: bool = True) -> MatchResult:
    """One-to-one matching of detections to annotated centroids within ``radius``.

    Pairs are taken greedily by increasing distance. With ``repair`` on, an
    augmenting-path pass then raises the pair count to the maximum possible,
    which pure greedy can miss when one detection sits in two disks.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    nd, na = len(points), len(annotations)
    cand = []
    for i, p in enumerate(points):
        for j, a in enumerate(annotations):
            d2 = (p.row - a.row) ** 2 + (p.col - a.col) ** 2
            if d2 <= radius * radius:
                cand.append((d2, i, j))
    cand.sort()
    match_det: list = [None] * nd
    match_ann: list = [None] * na
    for _, i, j in cand:
        if match_det[i] is None and match_ann[j] is None:
            match_det[i], match_ann[j] = j, i

    if repair:
        adj = [[] for _ in range(nd)]
        for _, i, j in cand:
            adj[i].append(j)
        for i in range(nd):
            if match_det[i] is None and adj[i]:
                _augment(i, adj, match_ann, match_det, set())

    pairs = sorted((i, j) for i, j in enumerate(match_det) if j is not None)
    conf = np.zeros((num_categories + 1, num_categories + 1), dtype=np.int64)
    for i, j in pairs:
        conf[annotations[j].category, points[i].category] += 1
    tp = len(pairs)
    return MatchResult(tp=tp, fp=nd - tp, fn=na - tp, pairs=pairs, confusion=conf)


# ------------------------------------------------------------------- metrics


def prf(tp: int, fp: int, fn: int) -> tuple:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class MetricsReport:
    det_precision: float
    det_recall: float
    det_f1: float
    per_category: List[tuple]
    weights: List[float]
    cls_precision: float
    cls_recall: float
    cls_f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_images: int = 0
    warning: str = ""

    def csv_row(self) -> dict:
        row = {
            "n_images": self.n_images, "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "det_precision": f"{self.det_precision:.6f}", "det_recall": f"{self.det_recall:.6f}",
            "det_f1": f"{self.det_f1:.6f}",
            "cls_precision": f"{self.cls_precision:.6f}", "cls_recall": f"{self.cls_recall:.6f}",
            "cls_f1": f"{self.cls_f1:.6f}",
        }
        for k, (p, r, f) in enumerate(self.per_category, start=1):
            row[f"cat{k}_precision"] = f"{p:.6f}"
            row[f"cat{k}_recall"] = f"{r:.6f}"
            row[f"cat{k}_f1"] = f"{f:.6f}"
            row[f"cat{k}_weight"] = f"{self.weights[k - 1]:.6f}"
        row["warning"] = self.warning
        return row

    def to_csv(self) -> str:
        row = self.csv_row()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()

    def summary(self, names: Optional[Sequence[str]] = None) -> str:
        lines = [
            f"images: {self.n_images}  TP {self.tp}  FP {self.fp}  FN {self.fn}",
            f"detection       P {self.det_precision:.4f}  R {self.det_recall:.4f}  F1 {self.det_f1:.4f}",
            f"classification  P {self.cls_precision:.4f}  R {self.cls_recall:.4f}  F1 {self.cls_f1:.4f}  (weighted)",
        ]
        for k, (p, r, f) in enumerate(self.per_category, start=1):
            label = names[k - 1] if names and k - 1 < len(names) else f"category {k}"
            lines.append(f"  {label:<15} P {p:.4f}  R {r:.4f}  F1 {f:.4f}  weight {self.weights[k - 1]:.4f}")
        if self.warning:
            lines.append(f"WARNING: {self.warning}")
        return "\n".join(lines) + "\n"


def category_frequencies(annotations_per_image, num_categories: int) -> List[float]:
    counts = np.zeros(num_categories)
    for anns in annotations_per_image:
        for a in anns:
            if 1 <= a.category <= num_categories:
                counts[a.category - 1] += 1
    total = counts.sum()
    if total == 0:
        return [1.0 / num_categories] * num_categories
    return list(counts / total)


def weighted_average(values: Sequence[float], weights: Sequence[float]) -> float:
    return float(np.dot(np.asarray(values, dtype=float), np.asarray(weights, dtype=float)))


def metrics(results: Sequence[MatchResult], category_weights: Sequence[float]) -> MetricsReport:
    """Pool match results and compute detection and weighted classification scores.

    Classification scores use TP pairs only; a TP pair whose detection was
    labelled background (0) is left out of them entirely.
    """
    weights = list(category_weights)
    k = len(weights)
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("category weights must sum to 1")
    if not results:
        zeros = [(0.0, 0.0, 0.0)] * k
        return MetricsReport(0.0, 0.0, 0.0, zeros, weights, 0.0, 0.0, 0.0, warning="empty evaluation set")

    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    dp, dr, df = prf(tp, fp, fn)
    conf = sum(r.confusion for r in results)
    per_cat = []
    for c in range(1, k + 1):
        tp_c = int(conf[c, c])
        fp_c = int(conf[:, c].sum() - tp_c)
        fn_c = int(conf[c, 1:].sum() - tp_c)
        per_cat.append(prf(tp_c, fp_c, fn_c))
    cp = weighted_average([p for p, _, _ in per_cat], weights)
    cr = weighted_average([r for _, r, _ in per_cat], weights)
    cf = weighted_average([f for _, _, f in per_cat], weights)
    warning = "" if tp + fp + fn else "no annotations and no detections"
    return MetricsReport(dp, dr, df, per_cat, weights, cp, cr, cf, tp, fp, fn, len(results), warning)
