"""k-means (Lloyd iterations, k-means++ seeding) over pooled instances."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterCenters:
    centers: np.ndarray
    assignments: np.ndarray | None = None
    inertia: float = float("nan")
    n_iter: int = 0
    history: tuple = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _sq_dists(X, C, xn=None):
    if xn is None:
        xn = np.einsum("ij,ij->i", X, X)
    cn = np.einsum("ij,ij->i", C, C)
    sq = xn[:, None] + cn[None, :] - 2.0 * (X @ C.T)
    return np.maximum(sq, 0.0)


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a center
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        np.minimum(closest, np.sum((X - X[idx]) ** 2, axis=1), out=closest)
    return X[chosen].copy()


def _update_centers(X, labels, k):
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k)
    return sums, counts


def kmeans(instances, k: int, seed: int = 0, max_iters: int = 100) -> ClusterCenters:
    """Cluster the rows of ``instances`` into ``k`` groups.

    Deterministic for a fixed seed.  A cluster left empty by the update step
    is re-seeded at the point farthest from its assigned center.
    """
    X = np.ascontiguousarray(np.asarray(instances, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("instances must be a 2-D array")
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"k-means needs at least k={k} instances, got {n}")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    rng = np.random.default_rng(seed)
    xn = np.einsum("ij,ij->i", X, X)
    C = kmeans_plus_plus(X, k, rng)

    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        sq = _sq_dists(X, C, xn)
        new_labels = np.argmin(sq, axis=1)
        history.append(float(sq[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums, counts = _update_centers(X, labels, k)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = np.sum((X - (sums / np.maximum(counts, 1)[:, None])[labels]) ** 2, axis=1)
            for c in empty:
                # never steal the only member of a cluster
                far = int(np.argmax(np.where(counts[labels] > 1, own, -1.0)))
                if counts[labels[far]] <= 1:
                    raise RuntimeError("cannot re-seed empty cluster: too few distinct instances")
                log.debug("re-seeding empty cluster %d at instance %d", c, far)
                old = labels[far]
                sums[old] -= X[far]
                counts[old] -= 1
                labels[far] = c
                sums[c] = X[far]
                counts[c] = 1
                own[far] = 0.0
        C = sums / counts[:, None]

    sq = _sq_dists(X, C, xn)
    labels = np.argmin(sq, axis=1)
    inertia = float(np.sum((X - C[labels]) ** 2))
    return ClusterCenters(C, labels, inertia, it, tuple(history))


def within_cluster_ss(X, centers, labels=None) -> float:
    X = np.asarray(X, dtype=np.float64)
    if labels is None:
        labels = np.argmin(_sq_dists(X, np.asarray(centers)), axis=1)
    return float(np.sum((X - np.asarray(centers)[labels]) ** 2))
