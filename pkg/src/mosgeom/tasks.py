"""Synthetic classification tasks with known geometric structure.

Two generators with controlled geometry plus their union: tree-structured
data (ancestor-path encodings, labels = root subtree), cyclic data
(wrap-around bump encodings on Z_m, labels = successor position), and a
mixed task interleaving both with disjoint label ranges.
"""
from dataclasses import dataclass, field

import numpy as np


class TaskError(Exception):
    pass


@dataclass
class SyntheticTask:
    kind: str
    features: np.ndarray   # (n, d)
    labels: np.ndarray     # (n,) int
    train_idx: np.ndarray
    test_idx: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise TaskError("non-finite features")
        n_classes = int(self.metadata["n_classes"])
        if self.labels.min() < 0 or self.labels.max() >= n_classes:
            raise TaskError("label out of range")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise TaskError("train/test overlap")

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return int(self.metadata["n_classes"])

    def split(self):
        return (self.features[self.train_idx], self.labels[self.train_idx],
                self.features[self.test_idx], self.labels[self.test_idx])


def _split_indices(n, test_fraction, rng):
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def gen_hierarchy_task(branching=3, depth=4, n_samples=2000, seed=0,
                       noise=0.1, test_fraction=0.2):
    """Noisy bag-of-ancestor-path encodings of random tree leaves.

    A complete branching^depth tree; each sample picks a leaf uniformly and
    marks every node on the root-to-leaf path (root excluded) in a
    bag-of-nodes indicator vector, plus gaussian feature noise. The label is
    the root subtree the leaf belongs to, so the class marginal is uniform
    over `branching` classes.
    """
    if branching < 2:
        raise TaskError("branching must be >= 2")
    if depth < 1:
        raise TaskError("depth must be >= 1")
    if n_samples < 2:
        raise TaskError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    level_sizes = [branching ** l for l in range(1, depth + 1)]
    offsets = np.concatenate([[0], np.cumsum(level_sizes)])
    dim = int(offsets[-1])
    features = rng.normal(scale=noise, size=(n_samples, dim))
    labels = np.empty(n_samples, dtype=np.int64)
    digits = rng.integers(0, branching, size=(n_samples, depth))
    for i in range(n_samples):
        node = 0
        for l in range(depth):
            node = node * branching + int(digits[i, l])
            features[i, offsets[l] + node] += 1.0
        labels[i] = digits[i, 0]
    train_idx, test_idx = _split_indices(n_samples, test_fraction, rng)
    meta = {"branching": branching, "depth": depth, "noise": noise,
            "n_classes": branching, "seed": seed}
    return SyntheticTask("hierarchy", features, labels, train_idx, test_idx,
                         meta)


def gen_cycle_task(modulus=7, n_samples=2000, seed=0, noise=0.1,
                   test_fraction=0.2, width=1.0):
    """Wrap-around bump encodings of positions on a length-m cycle.

    Each sample sits at a position p; feature j carries
    exp(-d_cyc(j, p)^2 / (2 width^2)) with circular distance, plus noise.
    The label is the successor class (p + 1) mod m.
    """
    if modulus < 3:
        raise TaskError("modulus must be >= 3")
    if n_samples < 2:
        raise TaskError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    positions = rng.integers(0, modulus, size=n_samples)
    j = np.arange(modulus)
    raw = np.abs(j[None, :] - positions[:, None])
    d_cyc = np.minimum(raw, modulus - raw)
    features = np.exp(-d_cyc.astype(np.float64) ** 2 / (2.0 * width ** 2))
    features = features + rng.normal(scale=noise, size=features.shape)
    labels = (positions + 1) % modulus
    train_idx, test_idx = _split_indices(n_samples, test_fraction, rng)
    meta = {"modulus": modulus, "noise": noise, "n_classes": modulus,
            "seed": seed, "positions": positions}
    return SyntheticTask("cycle", features, labels, train_idx, test_idx,
                         meta)


def gen_mixed_task(branching=3, depth=3, modulus=7, n_samples=2000, seed=0,
                   noise=0.1, test_fraction=0.2):
    """Union of a hierarchy task and a cycle task with disjoint labels.

    Half the samples come from each generator; cycle labels are offset by
    the hierarchy class count and narrower features are zero-padded to the
    common width.
    """
    n_h = n_samples // 2
    h = gen_hierarchy_task(branching, depth, n_h, seed, noise,
                           test_fraction=0.0 if n_h < 5 else 0.2)
    c = gen_cycle_task(modulus, n_samples - n_h, seed + 1, noise,
                       test_fraction=0.0 if n_samples - n_h < 5 else 0.2)
    dim = max(h.dim, c.dim)
    feats = np.zeros((n_samples, dim))
    feats[:n_h, :h.dim] = h.features
    feats[n_h:, :c.dim] = c.features
    labels = np.concatenate([h.labels, c.labels + h.n_classes])
    rng = np.random.default_rng(seed + 2)
    perm = rng.permutation(n_samples)
    feats, labels = feats[perm], labels[perm]
    train_idx, test_idx = _split_indices(n_samples, test_fraction, rng)
    meta = {"branching": branching, "depth": depth, "modulus": modulus,
            "noise": noise, "n_classes": h.n_classes + c.n_classes,
            "seed": seed}
    return SyntheticTask("mixed", feats, labels, train_idx, test_idx, meta)


def make_task(kind, **kw):
    gens = {"hierarchy": gen_hierarchy_task, "cycle": gen_cycle_task,
            "mixed": gen_mixed_task}
    if kind not in gens:
        raise TaskError(f"unknown task kind {kind!r}")
    return gens[kind](**kw)
