"""Unsupervised catheter extraction inside an aorta mask.

Bright pixels inside the mask are split into two clusters with k-means; the
catheter is the cluster with the smallest RMS positional variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BaselineInapplicable(ValueError):
    """Raised when a frame offers nothing to cluster."""


@dataclass(frozen=True)
class ClusterResult:
    points: np.ndarray        # (n, 2) as (x, y)
    assignments: np.ndarray   # (n,)
    centroids: np.ndarray     # (k, 2)
    variances: np.ndarray     # (k, 2) population (var_x, var_y)
    var_rms: np.ndarray       # (k,)
    iterations: int
    objective: float

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=len(self.centroids))


def threshold_in_mask(image, aorta_mask, level: float = 0.70) -> np.ndarray:
    """(x, y) points inside the mask with intensity >= level * masked max."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level {level} outside (0, 1)")
    img = np.asarray(image, dtype=np.float64)
    inside = np.asarray(aorta_mask) > 0.5
    if img.shape != inside.shape:
        raise ValueError(f"image {img.shape} and mask {inside.shape} differ")
    if not inside.any():
        raise BaselineInapplicable("aorta mask is empty")
    peak = img[inside].max()
    ys, xs = np.nonzero(inside & (img >= level * peak))
    return np.stack([xs, ys], axis=1).astype(np.float64)


def var_rms(points) -> float:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        return 0.0
    vx, vy = p.var(axis=0)
    return float(np.hypot(vx, vy))


def _assign(points, centroids):
    d = ((points[:, None, :] - centroids[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


def _objective(points, assignments, centroids) -> float:
    return float(((points - centroids[assignments]) ** 2).sum())


def _plus_plus(points, k, rng):
    centroids = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d = np.min([((points - c) ** 2).sum(1) for c in centroids], axis=0)
        total = d.sum()
        if total == 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=d / total)
        centroids.append(points[idx])
    return np.array(centroids)


def _lloyd(points, centroids, max_iter, history=None):
    labels = _assign(points, centroids)
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        if history is not None:
            history.append(_objective(points, labels, centroids))
        new = _assign(points, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centroids, it


def kmeans(points, k: int = 2, seed: int = 0, max_iter: int = 100, n_init: int = 10,
           history: list | None = None) -> ClusterResult:
    """k-means++ seeding and Lloyd iterations; best of ``n_init`` seeded restarts.

    ``history`` (if given) receives the objective after each centroid update
    of the winning restart.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < k:
        raise BaselineInapplicable(f"{len(pts)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        trace = []
        labels, cents, it = _lloyd(pts, _plus_plus(pts, k, rng), max_iter, trace)
        obj = _objective(pts, labels, cents)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, labels, cents, it, trace)
    obj, labels, cents, it, trace = best
    if history is not None:
        history.extend(trace)
    var = np.array([pts[labels == j].var(axis=0) if np.any(labels == j) else np.zeros(2)
                    for j in range(k)])
    return ClusterResult(pts, labels, cents, var, np.hypot(var[:, 0], var[:, 1]), it, obj)


def select_catheter(result: ClusterResult, shape=None):
    """Index of the tightest cluster and its points rasterized as a mask.

    Ties in VAR_rms go to the smaller cluster, then the lower index.
    """
    sizes = result.sizes
    order = sorted(range(len(result.var_rms)),
                   key=lambda j: (result.var_rms[j], sizes[j], j))
    idx = order[0]
    if shape is None:
        return idx, None
    mask = np.zeros(shape, dtype=np.float32)
    pts = result.points[result.assignments == idx].astype(int)
    mask[pts[:, 1], pts[:, 0]] = 1.0
    return idx, mask


def extract_catheter(image, aorta_mask, level: float = 0.70, seed: int = 0):
    """Full pipeline on one frame; returns ``(mask, ClusterResult, index)``."""
    pts = threshold_in_mask(image, aorta_mask, level)
    result = kmeans(pts, 2, seed)
    idx, mask = select_catheter(result, np.shape(image))
    return mask, result, idx
