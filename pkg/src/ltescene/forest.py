"""Probabilistic random forest (Breiman-style CART ensemble).

Trees use axis-aligned ``x[f] <= threshold`` splits chosen by Gini impurity
over a random subset of candidate features; each leaf stores the class
frequency histogram of the bootstrap samples that reached it. The forest
probability is the mean of leaf histograms across trees.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .io import decode_bundle, encode_bundle

FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(M))
    bootstrap: bool = True
    rng_seed: int = 0
    laplace_alpha: float = 0.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        if self.laplace_alpha < 0:
            raise ValueError("laplace_alpha must be >= 0")

    def replace(self, **kw) -> "ForestConfig":
        d = asdict(self)
        d.update(kw)
        return ForestConfig(**d)


@numba.njit(cache=True)
def _grow_tree(Xt, y, rows, n_classes, mtry, max_depth, min_leaf, seed):
    """Grow one tree on the sample rows ``rows`` (duplicates allowed).

    ``Xt`` is the feature-major (M, N) matrix. Returns node arrays; node 0 is
    the root and ``left == -1`` marks a leaf.
    """
    np.random.seed(seed)
    n_features = Xt.shape[0]
    n = rows.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    counts = np.zeros((cap, n_classes), np.float64)

    idx = rows.copy()
    feats = np.arange(n_features)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    sp = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    cl = np.zeros(n_classes, np.float64)
    cr = np.zeros(n_classes, np.float64)
    vals = np.empty(n, np.float64)

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        depth = st_depth[sp]
        m = hi - lo
        for i in range(lo, hi):
            counts[node, y[idx[i]]] += 1.0
        n_present = 0
        for k in range(n_classes):
            if counts[node, k] > 0:
                n_present += 1
        if n_present <= 1 or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        best_score = -1.0
        best_f = -1
        best_thr = 0.0
        n_tried = 0
        j = 0
        # Fisher-Yates draw of candidate features; keep drawing past mtry
        # only while no valid split has been found.
        while j < n_features and (n_tried < mtry or best_f < 0):
            r = j + np.random.randint(n_features - j)
            tmp = feats[j]
            feats[j] = feats[r]
            feats[r] = tmp
            f = feats[j]
            j += 1
            n_tried += 1

            for i in range(m):
                vals[i] = Xt[f, idx[lo + i]]
            order = np.argsort(vals[:m], kind="mergesort")
            if vals[order[0]] == vals[order[m - 1]]:
                continue
            for k in range(n_classes):
                cl[k] = 0.0
                cr[k] = counts[node, k]
            sq_l = 0.0
            sq_r = 0.0
            for k in range(n_classes):
                sq_r += cr[k] * cr[k]
            for i in range(m - 1):
                c = y[idx[lo + order[i]]]
                sq_l += 2.0 * cl[c] + 1.0
                sq_r -= 2.0 * cr[c] - 1.0
                cl[c] += 1.0
                cr[c] -= 1.0
                v0 = vals[order[i]]
                v1 = vals[order[i + 1]]
                if v0 == v1:
                    continue
                nl = i + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                # Gini decrease is monotone in sum_k c_k^2 / n over children.
                score = sq_l / nl + sq_r / nr
                thr = 0.5 * (v0 + v1)
                if thr >= v1:
                    thr = v0
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_thr = thr
                elif score == best_score and (f < best_f or (f == best_f and thr < best_thr)):
                    best_f = f
                    best_thr = thr

        if best_f < 0:
            continue

        # in-place partition of idx[lo:hi]
        a = lo
        b = hi - 1
        while a <= b:
            if Xt[best_f, idx[a]] <= best_thr:
                a += 1
            else:
                t = idx[a]
                idx[a] = idx[b]
                idx[b] = t
                b -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[sp] = n_nodes + 1
        st_lo[sp] = a
        st_hi[sp] = hi
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = n_nodes
        st_lo[sp] = lo
        st_hi[sp] = a
        st_depth[sp] = depth + 1
        sp += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        counts[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _predict(X, feature, threshold, left, right, value, offsets):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros((n, value.shape[1]), np.float64)
    for i in range(n):
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while left[base + node] != -1:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i] += value[base + node]
        out[i] /= n_trees
    return out


class Forest:
    """Trained forest; immutable once built.

    Node arrays of all trees are concatenated; tree ``t`` owns the slice
    ``offsets[t]:offsets[t + 1]`` and child indices are relative to it.
    """

    def __init__(self, classes, n_features, feature, threshold, left, right, value, offsets, config=None):
        self.classes = list(classes)
        self.n_features = int(n_features)
        self.feature = np.ascontiguousarray(feature, dtype=np.int32)
        self.threshold = np.ascontiguousarray(threshold, dtype=np.float64)
        self.left = np.ascontiguousarray(left, dtype=np.int32)
        self.right = np.ascontiguousarray(right, dtype=np.int32)
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.config = config
        for arr in (self.feature, self.threshold, self.left, self.right, self.value, self.offsets):
            arr.setflags(write=False)

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    def tree_arrays(self, t):
        s = slice(self.offsets[t], self.offsets[t + 1])
        return self.feature[s], self.threshold[s], self.left[s], self.right[s], self.value[s]

    def predict_proba(self, X) -> np.ndarray:
        """Class distribution per row of ``X`` (or for a single vector)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = np.ascontiguousarray(X[None, :] if single else X)
        if X2.ndim != 2 or X2.shape[1] != self.n_features:
            raise ValueError(
                f"dimension mismatch: forest expects {self.n_features} features, got {X2.shape[-1]}"
            )
        P = _predict(X2, self.feature, self.threshold, self.left, self.right, self.value, self.offsets)
        return P[0] if single else P

    def predict(self, X):
        P = self.predict_proba(X)
        idx = np.argmax(P, axis=-1)
        if np.ndim(idx) == 0:
            return self.classes[int(idx)]
        return [self.classes[i] for i in idx]

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "forest",
            "version": FOREST_FORMAT_VERSION,
            "classes": [c.item() if isinstance(c, np.generic) else c for c in self.classes],
            "n_features": self.n_features,
            "config": asdict(self.config) if self.config is not None else None,
        }
        arrays = {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
            "offsets": self.offsets,
        }
        return encode_bundle(meta, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Forest":
        meta, arrays = decode_bundle(blob)
        if meta.get("kind") != "forest" or meta.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError("not a forest record of a supported version")
        cfg = ForestConfig(**meta["config"]) if meta.get("config") else None
        return cls(meta["classes"], meta["n_features"], config=cfg, **arrays)


def _tree_seeds(seed: int, n_trees: int):
    return np.random.SeedSequence(seed).spawn(n_trees)


def train_forest(X, labels, cfg: ForestConfig = ForestConfig()) -> Forest:
    """Fit a forest on rows of ``X`` with arbitrary hashable ``labels``.

    Classes are ordered by ``sorted(set(labels))``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-D (samples x features)")
    labels = list(labels)
    if len(labels) != X.shape[0]:
        raise ValueError("X and labels differ in length")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("degenerate label set: need at least 2 distinct labels")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in labels], dtype=np.int64)
    n, n_features = X.shape
    mtry = cfg.features_per_split or math.ceil(math.sqrt(n_features))
    mtry = min(mtry, n_features)
    max_depth = -1 if cfg.max_depth is None else cfg.max_depth
    Xt = np.ascontiguousarray(X.T)

    parts = []
    for ss in _tree_seeds(cfg.rng_seed, cfg.n_trees):
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        parts.append(_grow_tree(Xt, y, rows.astype(np.int64), len(classes), mtry, max_depth, cfg.min_leaf, tree_seed))

    sizes = [p[0].shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    counts = np.concatenate([p[4] for p in parts])
    totals = counts.sum(axis=1, keepdims=True)
    k = counts.shape[1]
    value = (counts + cfg.laplace_alpha) / (totals + cfg.laplace_alpha * k)
    return Forest(
        classes,
        n_features,
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        value,
        offsets,
        config=cfg,
    )


def predict_proba(forest: Forest, x) -> np.ndarray:
    return forest.predict_proba(x)
