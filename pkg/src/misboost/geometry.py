"""Instance distances, exact and soft instance-to-bag distances.

The single-bag functions are the reference definitions.  ``PackedBags``
holds every instance of a bag collection in one matrix so that training can
evaluate many prototypes against all bags with a few matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SoftMinConfig:
    """Soft-min sharpness ``alpha`` and the gradient smoothing ``epsilon``."""

    alpha: float
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _instances(bag) -> np.ndarray:
    x = getattr(bag, "instances", bag)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[0] == 0:
        raise ValueError("bag has no instances")
    return x


def instance_distance(p, x) -> float:
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if p.shape != x.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {x.shape}")
    diff = p - x
    return float(np.sqrt(np.dot(diff, diff)))


def instance_distances(p, bag) -> np.ndarray:
    """Euclidean distance from ``p`` to every instance of ``bag``."""
    x = _instances(bag)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (x.shape[1],):
        raise ValueError(f"dimension mismatch: prototype {p.shape}, bag dimension {x.shape[1]}")
    return np.sqrt(np.sum((x - p) ** 2, axis=1))


def bag_distance(p, bag) -> tuple[float, int]:
    """Minimum instance distance and the index of the nearest instance.

    Ties go to the lowest index.
    """
    d = instance_distances(p, bag)
    j = int(np.argmin(d))
    return float(d[j]), j


def _softmin_weights(d: np.ndarray, alpha: float) -> np.ndarray:
    # shift by the minimum so the largest exponent is exactly 0
    e = np.exp(-alpha * (d - d.min()))
    return e / e.sum()


def soft_bag_distance(p, bag, cfg: SoftMinConfig) -> float:
    d = instance_distances(p, bag)
    pi = _softmin_weights(d, cfg.alpha)
    return float(np.clip(np.dot(pi, d), d.min(), d.max()))


def soft_bag_distance_gradient(p, bag, cfg: SoftMinConfig) -> np.ndarray:
    """Gradient of the soft bag distance with respect to the prototype.

    Differentiates through both the distances and the softmax weights:
    ``sum_j pi_j (1 - alpha (d_j - soft)) (p - x_j) / sqrt(|p - x_j|^2 + eps^2)``.
    """
    x = _instances(bag)
    p = np.asarray(p, dtype=np.float64)
    d = instance_distances(p, x)
    pi = _softmin_weights(d, cfg.alpha)
    soft = np.dot(pi, d)
    coef = pi * (1.0 - cfg.alpha * (d - soft)) / np.sqrt(d * d + cfg.epsilon ** 2)
    return coef @ (p - x)


class PackedBags:
    """A collection of bags stored as one ``(n_instances, d)`` matrix.

    ``offsets[i]`` is the first row of bag ``i``; ``bag_of[j]`` is the bag
    that row ``j`` belongs to.
    """

    def __init__(self, instance_blocks, labels=None):
        blocks = [_instances(b) for b in instance_blocks]
        if not blocks:
            raise ValueError("no bags")
        self.X = np.ascontiguousarray(np.concatenate(blocks, axis=0))
        self.sizes = np.array([b.shape[0] for b in blocks], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        self.bag_of = np.repeat(np.arange(len(blocks)), self.sizes)
        self.sqnorm = np.einsum("ij,ij->i", self.X, self.X)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.float64)

    @classmethod
    def from_dataset(cls, dataset) -> "PackedBags":
        labels = None
        if all(b.label is not None for b in dataset.bags):
            labels = [b.label for b in dataset.bags]
        return cls([b.instances for b in dataset.bags], labels)

    @property
    def n_bags(self) -> int:
        return len(self.sizes)

    @property
    def n_instances(self) -> int:
        return self.X.shape[0]

    @property
    def dimension(self) -> int:
        return self.X.shape[1]

    def bag(self, i: int) -> np.ndarray:
        return self.X[self.offsets[i]:self.offsets[i] + self.sizes[i]]

    def distances(self, P: np.ndarray) -> np.ndarray:
        """``(R, n_instances)`` distances from each row of ``P`` to every instance.

        Uses the expanded square, so tiny distances carry absolute error of
        order sqrt(machine eps) * |x|; training-only.
        """
        P = np.atleast_2d(P)
        sq = np.einsum("ij,ij->i", P, P)[:, None] + self.sqnorm[None, :] - 2.0 * (P @ self.X.T)
        np.maximum(sq, 0.0, out=sq)
        return np.sqrt(sq, out=sq)

    def exact_distances(self, p: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum((self.X - p) ** 2, axis=1))

    def min_per_bag(self, dist: np.ndarray) -> np.ndarray:
        return np.minimum.reduceat(dist, self.offsets, axis=-1)

    def exact_bag_distances(self, p: np.ndarray) -> np.ndarray:
        """Exact ``D(p, B_i)`` for every bag, by direct differences."""
        return self.min_per_bag(self.exact_distances(p))

    def nearest_in_bags(self, p: np.ndarray):
        """Per-bag exact distance and within-bag index of the nearest instance."""
        d = self.exact_distances(p)
        dmin = self.min_per_bag(d)
        out = np.empty(self.n_bags, dtype=np.int64)
        for i, (o, s) in enumerate(zip(self.offsets, self.sizes)):
            out[i] = int(np.argmin(d[o:o + s]))
        return dmin, out

    def softmin(self, dist: np.ndarray, alpha: float, clip: bool = True):
        """Soft bag distances and the per-instance softmax weights.

        ``dist`` is ``(R, n_instances)``; returns ``(soft (R, N), pi (R, n))``.
        ``clip=False`` skips clamping to the per-bag maximum, which only
        guards against rounding.
        """
        mins = np.minimum.reduceat(dist, self.offsets, axis=1)
        e = np.exp(-alpha * (dist - mins[:, self.bag_of]))
        denom = np.add.reduceat(e, self.offsets, axis=1)
        num = np.add.reduceat(e * dist, self.offsets, axis=1)
        soft = num / denom
        if clip:
            maxs = np.maximum.reduceat(dist, self.offsets, axis=1)
            np.clip(soft, mins, maxs, out=soft)
        pi = e / denom[:, self.bag_of]
        return soft, pi
