"""Run a trained model over images and score it against annotations."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .inference import (
    MATCH_RADIUS,
    NMS_RADIUS,
    NMS_THRESHOLD,
    DetectedPoint,
    MatchResult,
    MetricsReport,
    assign_categories,
    category_frequencies,
    match,
    metrics,
    nms,
)
from .model import Parameters, forward


def predict_maps(params: Parameters, images: np.ndarray, batch_size: int = 32):
    """Eval-mode objectness ``(B, H, W)`` and class maps ``(B, K+1, H, W)``.

    For a single-head model the objectness map is the summed nuclei channels.
    """
    objs, conds = [], []
    for start in range(0, len(images), batch_size):
        out = forward(params, np.asarray(images[start:start + batch_size]), mode="eval")
        objs.append(out.objectness())
        conds.append(out.cls_cond_probs.data)
    return np.concatenate(objs), np.concatenate(conds)


def detect(p_obj: np.ndarray, p_cond: np.ndarray, threshold: float = NMS_THRESHOLD,
           radius: float = NMS_RADIUS) -> List[DetectedPoint]:
    return assign_categories(nms(p_obj, threshold, radius), p_obj, p_cond)


def score_points(points_per_image, annotations_per_image, num_categories: int,
                 weights: Sequence[float] | None = None, radius: float = MATCH_RADIUS):
    results: List[MatchResult] = [
        match(pts, anns, radius=radius, num_categories=num_categories)
        for pts, anns in zip(points_per_image, annotations_per_image)
    ]
    if weights is None:
        weights = category_frequencies(annotations_per_image, num_categories)
    return metrics(results, weights), results


def evaluate(params: Parameters, annotated_images, weights=None, threshold: float = NMS_THRESHOLD,
             nms_radius: float = NMS_RADIUS, match_radius: float = MATCH_RADIUS) -> MetricsReport:
    k = params.config.num_categories
    if not annotated_images:
        return metrics([], weights or [1.0 / k] * k)
    pixels = np.stack([im.pixels for im in annotated_images])
    p_obj, p_cond = predict_maps(params, pixels)
    points = [detect(p_obj[i], p_cond[i], threshold, nms_radius) for i in range(len(annotated_images))]
    report, _ = score_points(points, [im.nuclei for im in annotated_images], k, weights, match_radius)
    return report
