"""Responsibility assignment between ground-truth shapes and anchors.

Hard rules pick winning anchors per ground-truth box. The soft rule
spreads responsibility over all anchors with a temperature-controlled
softmax so that every anchor receives gradient early in training; the
temperature and the clustering-term coefficient both decay linearly
over a warm-up window, after which training falls back to the hard rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import AnchorSet, LogShape, Metric, log_shapes_array, shape_dist_matrix


class Assignment:
    """Sparse (gt_index, anchor_index, weight) responsibility triples.

    Entries are canonicalized to (gt_index, anchor_index, weight) order
    at construction so downstream reductions are independent of the
    order the caller produced them in, bit for bit.
    """

    __slots__ = ("gt_idx", "anchor_idx", "weights")

    def __init__(self, gt_idx, anchor_idx, weights) -> None:
        gt = np.asarray(gt_idx, dtype=np.intp).ravel()
        anc = np.asarray(anchor_idx, dtype=np.intp).ravel()
        w = np.asarray(weights, dtype=float).ravel()
        if not (gt.shape == anc.shape == w.shape):
            raise ValueError("gt_idx, anchor_idx and weights must have equal length")
        if w.size and (float(np.min(w)) < 0.0 or float(np.max(w)) > 1.0):
            raise ValueError("assignment weights must lie in [0, 1]")
        if gt.size and (int(gt.min()) < 0 or int(anc.min()) < 0):
            raise ValueError("assignment indices must be nonnegative")
        order = np.lexsort((w, anc, gt))
        self.gt_idx = gt[order]
        self.anchor_idx = anc[order]
        self.weights = w[order]
        for a in (self.gt_idx, self.anchor_idx, self.weights):
            a.setflags(write=False)

    def __len__(self) -> int:
        return int(self.gt_idx.size)

    def entries(self) -> list[tuple[int, int, float]]:
        return [
            (int(j), int(k), float(w))
            for j, k, w in zip(self.gt_idx, self.anchor_idx, self.weights)
        ]

    def __repr__(self) -> str:
        return f"Assignment(entries={len(self)})"


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear decay schedules for the soft-assignment temperature and the
    clustering-term coefficient.

    With ``warmup_iters == 0`` both warm-ups are disabled: training is
    hard from the first iteration and the clustering coefficient is 0.
    """

    warmup_iters: int = 1500
    temp_start: float = 2.0
    temp_floor: float = 1e-2
    lambda_start: float = 1.0

    def __post_init__(self) -> None:
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.temp_floor <= 0.0 or self.temp_start <= 0.0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.lambda_start <= 1.0:
            raise ValueError("lambda_start must lie in [0, 1]")


def temperature_at(t: int, sched: WarmupSchedule) -> Optional[float]:
    """Soft-assignment temperature at iteration ``t``.

    Returns ``None`` once the warm-up window has passed, which is the
    hard-mode sentinel: callers switch to their hard assignment rule.
    """
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    if sched.warmup_iters == 0 or t >= sched.warmup_iters:
        return None
    value = sched.temp_start * (1.0 - t / sched.warmup_iters)
    return max(sched.temp_floor, value)


def cluster_weight_at(t: int, sched: WarmupSchedule) -> float:
    """Clustering-term coefficient at iteration ``t`` (linear decay to 0)."""
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    if sched.warmup_iters == 0:
        return 0.0
    return sched.lambda_start * max(0.0, 1.0 - t / sched.warmup_iters)


def hard_assign_yolo(
    gts: "Sequence[LogShape] | np.ndarray",
    anchors: AnchorSet,
    metric: Metric = "one_minus_iou",
) -> Assignment:
    """Assign each ground truth to its single nearest anchor with weight 1.

    Exact distance ties break toward the lowest anchor index.
    """
    g = log_shapes_array(gts)
    n = g.shape[0]
    if n == 0:
        return Assignment([], [], [])
    dist = shape_dist_matrix(g, anchors.as_array(), metric)
    winners = np.argmin(dist, axis=1)
    return Assignment(np.arange(n), winners, np.ones(n))


def hard_assign_threshold(
    gts: "Sequence[LogShape] | np.ndarray",
    anchors: AnchorSet,
    tau: float,
) -> Assignment:
    """Weight-1 entries for every anchor whose aligned IoU reaches ``tau``.

    Each ground truth additionally activates its best-IoU anchor, so no
    ground truth is left unassigned even when no anchor clears ``tau``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    g = log_shapes_array(gts)
    n = g.shape[0]
    if n == 0:
        return Assignment([], [], [])
    iou = 1.0 - shape_dist_matrix(g, anchors.as_array(), "one_minus_iou")
    hit = iou >= tau
    hit[np.arange(n), np.argmax(iou, axis=1)] = True
    j, k = np.nonzero(hit)
    return Assignment(j, k, np.ones(j.size))


def soft_assign(
    gts: "Sequence[LogShape] | np.ndarray",
    anchors: AnchorSet,
    metric: Metric,
    temperature: float,
) -> Assignment:
    """Softmax responsibilities over all anchors per ground truth.

    Row weights are softmax(-distance / temperature) computed with the
    usual max subtraction, so they are finite for any positive
    temperature and sum to 1 per ground truth.
    """
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    g = log_shapes_array(gts)
    n = g.shape[0]
    if n == 0:
        return Assignment([], [], [])
    num_anchors = len(anchors)
    z = -shape_dist_matrix(g, anchors.as_array(), metric) / temperature
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    j = np.repeat(np.arange(n), num_anchors)
    k = np.tile(np.arange(num_anchors), n)
    return Assignment(j, k, w.ravel())


def utilization_counts(assign: Assignment, num_anchors: int, soft: bool = False) -> np.ndarray:
    """Per-anchor counts of ground truths the assignment makes it responsible for.

    Hard assignments count every entry (the threshold rule may count a
    ground truth toward several anchors). Soft assignments count only
    the highest-weight anchor per ground truth, ties toward the lowest
    anchor index.
    """
    counts = np.zeros(num_anchors, dtype=np.int64)
    if len(assign) == 0:
        return counts
    if not soft:
        np.add.at(counts, assign.anchor_idx, 1)
        return counts
    best_w: dict[int, float] = {}
    best_k: dict[int, int] = {}
    for j, k, w in zip(assign.gt_idx, assign.anchor_idx, assign.weights):
        j = int(j)
        if j not in best_w or w > best_w[j] or (w == best_w[j] and k < best_k[j]):
            best_w[j] = float(w)
            best_k[j] = int(k)
    np.add.at(counts, list(best_k.values()), 1)
    return counts
