"""IoU k-means over box shapes, plus standard anchor initializations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import AnchorSet, BoxShape, iou_aligned_matrix
from .ingest import CanonicalDataset

UNIFORM_MULTIPLIERS = ((3.0, 3.0), (3.0, 9.0), (9.0, 9.0), (9.0, 3.0), (6.0, 6.0))
IDENTICAL_MULTIPLIER = (5.0, 5.0)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: tuple[BoxShape, ...]
    assignments: np.ndarray
    mean_best_iou: float
    iterations_run: int


def _assign_step(wh: np.ndarray, cents: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so exact ties go to the lowest cluster
    return np.argmax(iou_aligned_matrix(wh, cents), axis=1)


def _update_step(wh: np.ndarray, cents: np.ndarray, assignments: np.ndarray) -> np.ndarray:
    new = cents.copy()
    empty = []
    for c in range(cents.shape[0]):
        members = assignments == c
        if np.any(members):
            new[c] = wh[members].mean(axis=0)
        else:
            empty.append(c)
    if empty:
        # re-seed each empty cluster at the currently worst-covered shape
        best = iou_aligned_matrix(wh, new).max(axis=1)
        order = np.argsort(best, kind="stable")
        for c, idx in zip(empty, order):
            new[c] = wh[idx]
    return new


def _seed_plus_plus(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Farthest-in-IoU seeding: sample new seeds with probability (1 - best IoU)^2."""
    n = wh.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(k - 1):
        best = iou_aligned_matrix(wh, wh[chosen]).max(axis=1)
        weight = (1.0 - best) ** 2
        weight[chosen] = 0.0
        total = weight.sum()
        if total <= 0.0:
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(remaining[0])
        else:
            chosen.append(int(rng.choice(n, p=weight / total)))
    return wh[chosen].copy()


def kmeans_iou(
    shapes: Sequence[BoxShape],
    num_clusters: int,
    init: Optional[Sequence[BoxShape]] = None,
    max_iter: int = 300,
    seed: int = 0,
) -> KMeansResult:
    """Lloyd's alternation with aligned IoU as the similarity.

    Assignment maximizes aligned IoU; the update is the arithmetic mean
    of member widths and heights. Stops when assignments stop changing
    or after max_iter rounds. Empty clusters are re-seeded at the shape
    the current centroids cover worst. When init is omitted, seeds are
    drawn by farthest-in-IoU sampling with the given seed, so the same
    seed always produces the same result.
    """
    wh = np.array([[s.w, s.h] for s in shapes], dtype=float)
    n = wh.shape[0]
    if num_clusters < 1:
        raise ValueError("num_clusters must be >= 1")
    if n < num_clusters:
        raise ValueError(f"need at least {num_clusters} shapes, got {n}")
    if init is not None:
        if len(init) != num_clusters:
            raise ValueError("init must provide exactly num_clusters shapes")
        cents = np.array([[s.w, s.h] for s in init], dtype=float)
    else:
        cents = _seed_plus_plus(wh, num_clusters, np.random.default_rng(seed))

    assignments = _assign_step(wh, cents)
    iterations_run = 0
    for _ in range(max_iter):
        iterations_run += 1
        cents = _update_step(wh, cents, assignments)
        new_assignments = _assign_step(wh, cents)
        converged = bool(np.array_equal(new_assignments, assignments))
        assignments = new_assignments
        if converged:
            break

    mean_best = float(iou_aligned_matrix(wh, cents).max(axis=1).mean())
    centroids = tuple(BoxShape(float(c[0]), float(c[1])) for c in cents)
    return KMeansResult(centroids, assignments, mean_best, iterations_run)


def init_uniform(stride: int = 32) -> AnchorSet:
    """Five hand-picked shapes spanning sizes and aspect ratios, in stride units."""
    shapes = [BoxShape(mw * stride, mh * stride) for mw, mh in UNIFORM_MULTIPLIERS]
    return AnchorSet.from_linear(shapes, stride)


def init_identical(stride: int = 32, num_anchors: int = 5) -> AnchorSet:
    """num_anchors copies of one square shape; training must break the tie."""
    if num_anchors < 1:
        raise ValueError("num_anchors must be >= 1")
    shape = BoxShape(IDENTICAL_MULTIPLIER[0] * stride, IDENTICAL_MULTIPLIER[1] * stride)
    return AnchorSet.from_linear([shape] * num_anchors, stride)


def init_kmeans(
    ds: CanonicalDataset,
    num_anchors: int = 5,
    seed: int = 0,
    stride: int = 32,
    max_iter: int = 300,
) -> AnchorSet:
    """Cluster the dataset's shapes and use the centroids, sorted by area."""
    if len(ds) == 0:
        raise ValueError("cannot cluster an empty dataset")
    shapes = [BoxShape(float(w), float(h)) for w, h in ds.shapes()]
    result = kmeans_iou(shapes, num_anchors, init=None, max_iter=max_iter, seed=seed)
    ordered = sorted(result.centroids, key=lambda s: s.area)
    return AnchorSet.from_linear(ordered, stride)
