"""Small constructed MIL problems with a known optimal prototype."""

from __future__ import annotations

import numpy as np

from .data import Bag, Dataset


def _noise(rng, n, box, centers, exclusion):
    """``n`` uniform points in ``box`` at least ``exclusion`` away from every center."""
    lo, hi = box
    out = []
    while len(out) < n:
        pts = rng.uniform(lo, hi, size=(2 * n, 2))
        far = np.all(np.linalg.norm(pts[:, None, :] - centers[None], axis=2) >= exclusion, axis=1)
        out.extend(pts[far].tolist())
    return np.array(out[:n])


def _near(rng, center, radius):
    angle = rng.uniform(0, 2 * np.pi)
    r = radius * np.sqrt(rng.uniform())
    return center + r * np.array([np.cos(angle), np.sin(angle)])


def separable_dataset(n_pos: int = 20, n_neg: int = 20, target=(5.0, 5.0), radius: float = 0.1,
                      exclusion: float = 1.5, noise_per_bag=(3, 8), box=(0.0, 10.0),
                      seed: int = 0) -> Dataset:
    """2-D bags where one prototype at ``target`` separates the classes.

    Each positive bag holds one instance within ``radius`` of ``target``
    plus uniform noise; negative bags hold only noise.  All noise keeps at
    least ``exclusion`` away from ``target``.
    """
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    centers = target[None, :]
    bags = []
    labels = [1] * n_pos + [-1] * n_neg
    order = rng.permutation(len(labels))
    for k, i in enumerate(order):
        n_noise = int(rng.integers(noise_per_bag[0], noise_per_bag[1] + 1))
        x = _noise(rng, n_noise, box, centers, exclusion)
        if labels[i] == 1:
            x = np.insert(x, int(rng.integers(n_noise + 1)), _near(rng, target, radius), axis=0)
        bags.append(Bag(f"bag{k:03d}", x, labels[i]))
    return Dataset(tuple(bags), 2)


def multiclass_dataset(bags_per_class: int = 15, targets=((2.0, 2.0), (8.0, 8.0), (2.0, 8.0)),
                       radius: float = 0.1, exclusion: float = 1.5, noise_per_bag=(3, 6),
                       box=(0.0, 10.0), seed: int = 0) -> Dataset:
    """Each class has its own target; a bag of class c holds one instance near target c."""
    rng = np.random.default_rng(seed)
    targets = np.asarray(targets, dtype=np.float64)
    names = tuple(f"class{c}" for c in range(len(targets)))
    labels = np.repeat(np.arange(len(targets)), bags_per_class)
    labels = labels[rng.permutation(len(labels))]
    bags = []
    for k, c in enumerate(labels):
        n_noise = int(rng.integers(noise_per_bag[0], noise_per_bag[1] + 1))
        x = _noise(rng, n_noise, box, targets, exclusion)
        x = np.insert(x, int(rng.integers(n_noise + 1)), _near(rng, targets[c], radius), axis=0)
        bags.append(Bag(f"bag{k:03d}", x, int(c)))
    return Dataset(tuple(bags), 2, names)
