"""Independent reference implementations the numerical tests check against.

Everything here is written directly on numpy, importing nothing from the
package, so a library bug cannot hide inside its own oracle.
"""

from __future__ import annotations

import numpy as np


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2.0 * eps)
        it.iternext()
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case elementwise error, relative where the value is large."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def lloyd_log_l2(points: np.ndarray, init: np.ndarray, max_iter: int = 1000) -> np.ndarray:
    """Plain Lloyd's with squared Euclidean distance (used in log space)."""
    pts = np.asarray(points, dtype=float)
    cents = np.asarray(init, dtype=float).copy()
    for _ in range(max_iter):
        d = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d, axis=1)
        new = cents.copy()
        for c in range(cents.shape[0]):
            members = labels == c
            if members.any():
                new[c] = pts[members].mean(axis=0)
        if np.array_equal(new, cents):
            break
        cents = new
    return cents


def iou_of_wh(a, b) -> float:
    """Aligned IoU of two (w, h) pairs, written out longhand."""
    inter = min(a[0], b[0]) * min(a[1], b[1])
    return inter / (a[0] * a[1] + b[0] * b[1] - inter)


def iou_table(wh: np.ndarray, cents: np.ndarray) -> np.ndarray:
    out = np.zeros((len(wh), len(cents)))
    for i, a in enumerate(wh):
        for j, b in enumerate(cents):
            out[i, j] = iou_of_wh(a, b)
    return out


def lloyd_iou_round(wh: np.ndarray, cents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One assign-then-update round of IoU k-means; empty clusters stay put."""
    labels = np.argmax(iou_table(wh, cents), axis=1)
    new = cents.copy()
    for c in range(cents.shape[0]):
        members = labels == c
        if members.any():
            new[c] = wh[members].mean(axis=0)
    return labels, new


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
