"""Few-shot evaluation: feature denoising, episodes, linear probes, Rand Index."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, EpisodeError, ShapeError
from .model import Backbone
from .numerics.rng import stream
from .numerics.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def sig6(x: float) -> float:
    """Round to 6 significant digits for machine-readable outputs."""
    return float(f"{float(x):.6g}")


# --- feature denoising ---------------------------------------------------------


@dataclass(frozen=True)
class FDConfig:
    h: int = 64
    beta: float = 0.4

    def __post_init__(self):
        if int(self.h) < 1:
            raise ConfigError("h must be a positive integer")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")

    def to_dict(self):
        return {"h": int(self.h), "beta": float(self.beta)}


def feature_denoise(s, cfg: FDConfig):
    """Keep the ``h`` largest entries of each feature vector, raised to ``beta``.

    Works on a vector ``[D]`` or row-wise on ``[N, D]``. Equal values are
    kept in order of lower index. Inputs must be nonnegative.
    """
    was_tensor = isinstance(s, Tensor)
    x = np.asarray(s.data if was_tensor else s)
    if np.any(x < 0):
        raise ContractError("feature_denoise needs nonnegative input")
    D = x.shape[-1]
    if cfg.h > D:
        raise ConfigError(f"h={cfg.h} exceeds feature dimension {D}")
    rows = x.reshape(-1, D)
    out = np.zeros_like(rows)
    # stable sort on the negated values puts lower indices first among ties
    keep = np.argsort(-rows, axis=1, kind="stable")[:, : cfg.h]
    r = np.arange(len(rows))[:, None]
    kept = rows[r, keep]
    out[r, keep] = kept if cfg.beta == 1 else np.power(kept, rows.dtype.type(cfg.beta))
    out = out.reshape(x.shape)
    return Tensor(out) if was_tensor else out


# --- episodes ----------------------------------------------------------------------


@dataclass
class Episode:
    way: int
    shot: int
    query: int
    classes: np.ndarray
    support_idx: np.ndarray
    support_labels: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray


def sample_episode(labels, way: int, shot: int, query: int, rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode from pool ``labels``.

    Classes are drawn uniformly without replacement among those with at least
    ``shot + query`` samples; episode labels are ``0..way-1`` in draw order.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    if way < 1 or shot < 1 or query < 1:
        raise EpisodeError("way, shot and query must be positive")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= shot + query]
    if len(eligible) < way:
        raise EpisodeError(
            f"{way}-way {shot}-shot with {query} queries needs {way} classes with >= {shot + query} samples; "
            f"pool has {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=way, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        perm = rng.permutation(members)
        s_idx.append(perm[:shot])
        q_idx.append(perm[shot : shot + query])
    return Episode(
        way,
        shot,
        query,
        chosen,
        np.concatenate(s_idx),
        np.repeat(np.arange(way), shot),
        np.concatenate(q_idx),
        np.repeat(np.arange(way), query),
    )


# --- linear probe ----------------------------------------------------------------------


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    losses: List[float] = field(default_factory=list)

    def logits(self, x):
        return x @ self.weight + self.bias

    def predict(self, x):
        return self.logits(x).argmax(axis=1)


def finetune_linear(features, labels, way: int, steps: int = 100, lr: float = 0.01) -> LinearProbe:
    """Full-batch gradient descent on softmax cross-entropy from a zero start.

    ``features`` are the (already denoised, if configured) support features.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape
    W = np.zeros((d, way))
    b = np.zeros(way)
    onehot = np.eye(way)[y]
    losses = []
    for _ in range(steps):
        z = x @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
        if not np.isfinite(loss):
            raise DivergenceError("linear probe loss became non-finite", {"step": len(losses)})
        losses.append(float(loss))
        g = (p - onehot) / n
        W -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return LinearProbe(W, b, losses)


# --- feature extraction ----------------------------------------------------------------------


def extract_features(encoder: Backbone, images, batch_size: int = 128, taps: bool = False):
    """Final pooled features (and optionally per-block pooled taps) in eval mode."""
    finals, pooled = [], None
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = encoder.forward_with_taps(Tensor(images[start : start + batch_size]), "eval")
            finals.append(out.final_vec.data)
            if taps:
                vecs = [t.data.mean(axis=(2, 3)) for t in out.taps]
                if pooled is None:
                    pooled = [[] for _ in vecs]
                for acc, v in zip(pooled, vecs):
                    acc.append(v)
    final = np.concatenate(finals)
    if taps:
        return final, [np.concatenate(p) for p in pooled]
    return final


# --- metrics ----------------------------------------------------------------------------------


def ci95(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("ci95 needs at least two values")
    return 1.96 * float(v.std(ddof=1)) / math.sqrt(len(v))


@dataclass
class MetricsRecord:
    accuracies: List[float]
    mean: float
    ci95: float
    episodes: int
    way: int
    shot: int
    fd: Optional[dict] = None
    per_block_rand_index: List[float] = field(default_factory=list)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "mean": sig6(self.mean),
            "ci95": sig6(self.ci95),
            "episodes": self.episodes,
            "way": self.way,
            "shot": self.shot,
            "fd": self.fd,
            "per_block_rand_index": [sig6(v) for v in self.per_block_rand_index],
            "seed": self.seed,
        }
        out.update(self.meta)
        return out

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


FitFn = Callable[[np.ndarray, np.ndarray, int], Callable[[np.ndarray], np.ndarray]]


def _probe_fit(steps, lr) -> FitFn:
    def fit(x, y, way):
        return finetune_linear(x, y, way, steps, lr).predict

    return fit


def evaluate_features(
    features: np.ndarray,
    labels,
    way: int = 5,
    shot: int = 1,
    query: int = 15,
    episodes: int = 600,
    fd: Optional[FDConfig] = None,
    seed: int = 0,
    fd_query: bool = True,
    steps: int = 100,
    lr: float = 0.01,
    fit: Optional[FitFn] = None,
) -> MetricsRecord:
    """Episodic accuracy on precomputed features.

    Episode ``e`` draws from its own stream ``(seed, "episode", e)``, so the
    result does not depend on evaluation order.
    """
    if episodes < 2:
        raise ConfigError("need at least two episodes")
    labels = np.asarray(labels)
    feats = np.asarray(features)
    denoised = feature_denoise(feats, fd) if fd is not None else feats
    query_feats = denoised if fd_query else feats
    fit = fit or _probe_fit(steps, lr)
    accs = []
    for e in range(episodes):
        ep = sample_episode(labels, way, shot, query, stream(seed, "episode", e))
        predict = fit(denoised[ep.support_idx], ep.support_labels, way)
        pred = predict(query_feats[ep.query_idx])
        accs.append(float(np.mean(pred == ep.query_labels)))
    return MetricsRecord(
        accs,
        float(np.mean(accs)),
        ci95(accs),
        episodes,
        way,
        shot,
        fd.to_dict() if fd is not None else None,
        seed=seed,
    )


def evaluate(encoder: Backbone, eval_pool, way=5, shot=1, query=15, episodes=600, fd=None, seed=0, **kw) -> MetricsRecord:
    """Episodic evaluation of a frozen encoder on a labeled pool."""
    feats = extract_features(encoder, eval_pool.images)
    return evaluate_features(feats, eval_pool.labels, way, shot, query, episodes, fd, seed, **kw)


# --- clustering diagnostics -------------------------------------------------------------------


def rand_index(labels, clusters) -> float:
    """Fraction of unordered item pairs on which two partitions agree."""
    a = np.asarray(labels)
    b = np.asarray(clusters)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"partitions must be equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ShapeError("rand index needs at least two items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(c):
        return int((c * (c - 1) // 2).sum())

    total = n * (n - 1) // 2
    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


@dataclass
class BlockRandIndex:
    values: List[float]
    converged: List[bool]


def cluster_rand_index(features, labels, k: Optional[int] = None, seed: int = 0, n_init: int = 10, max_iter: int = 100):
    """k-means (best of ``n_init`` seeded restarts) against true labels."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    labels = np.asarray(labels)
    k = k or len(np.unique(labels))
    km = KMeans(n_clusters=k, n_init=n_init, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        assign = km.fit_predict(np.asarray(features, dtype=np.float64))
    converged = km.n_iter_ < max_iter and not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    return rand_index(labels, assign), bool(converged)


def per_block_rand_index(encoder: Backbone, eval_pool, k: Optional[int] = None, seed: int = 0, n_init=10, max_iter=100) -> BlockRandIndex:
    """Rand Index of k-means on spatially pooled taps, one value per block."""
    _, taps = extract_features(encoder, eval_pool.images, taps=True)
    vals, flags = [], []
    for tap in taps:
        ri, ok = cluster_rand_index(tap, eval_pool.labels, k, seed, n_init, max_iter)
        vals.append(ri)
        flags.append(ok)
    return BlockRandIndex(vals, flags)


def export_features(encoder: Backbone, dataset, blocks: Sequence[int], path) -> None:
    """CSV of pooled features for 1-based ``blocks`` plus the label column."""
    _, taps = extract_features(encoder, dataset.images, taps=True)
    L = len(taps)
    for b in blocks:
        if not 1 <= b <= L:
            raise ConfigError(f"block {b} outside 1..{L}")
    header = ["label"]
    cols = [np.asarray(dataset.labels)[:, None]]
    for b in blocks:
        t = taps[b - 1]
        header += [f"block{b}_{j}" for j in range(t.shape[1])]
        cols.append(t)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(dataset.labels)):
            vals = [str(int(cols[0][i, 0]))]
            for c in cols[1:]:
                vals += [f"{v:.6g}" for v in c[i]]
            fh.write(",".join(vals) + "\n")
