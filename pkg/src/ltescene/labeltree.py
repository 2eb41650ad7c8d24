"""Confusion-driven binary label trees.

Each split node trains a multi-class forest on one stratified half of its
samples, measures the probability confusion matrix on the other half,
symmetrizes it and picks the two-way label partition that keeps confusable
classes together (maximal within-part confusion mass).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .forest import ForestConfig, train_forest

EXACT_MAX_LABELS = 12


@dataclass(frozen=True)
class ConfusionMatrix:
    A: np.ndarray
    labels: tuple

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(self.labels):
            raise ValueError("confusion matrix must be square and match the label list")
        if np.any(A < -1e-12) or np.any(A > 1 + 1e-12):
            raise ValueError("confusion entries must lie in [0, 1]")
        if not np.allclose(A.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must sum to 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "labels", tuple(self.labels))


def stratified_halves(labels, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split sample indices into train/eval halves, per class.

    One seeded permutation of all indices is drawn and each class sends the
    first ``n_c // 2`` of its members (in permuted order) to the train half,
    so the split does not depend on how classes are named or ordered.
    """
    labels = list(labels)
    perm = np.random.default_rng(seed).permutation(len(labels))
    members: dict = {}
    for i in perm:
        members.setdefault(labels[i], []).append(int(i))
    train, evaluate = [], []
    for c, idx in members.items():
        if len(idx) < 2:
            raise ValueError(f"insufficient samples for stratified halving: class {c!r} has {len(idx)}")
        k = len(idx) // 2
        train.extend(idx[:k])
        evaluate.extend(idx[k:])
    return np.sort(np.array(train)), np.sort(np.array(evaluate))


def confusion_from_probs(probs, eval_labels, labels) -> ConfusionMatrix:
    """Average predicted distributions per true class (row i = class labels[i])."""
    probs = np.asarray(probs, dtype=np.float64)
    eval_labels = list(eval_labels)
    labels = list(labels)
    A = np.zeros((len(labels), len(labels)))
    for i, c in enumerate(labels):
        rows = [k for k, lab in enumerate(eval_labels) if lab == c]
        if not rows:
            raise ValueError(f"no evaluation samples for class {c!r}")
        A[i] = probs[rows].mean(axis=0)
    return ConfusionMatrix(A, tuple(labels))


def confusion_matrix(X, labels, cfg: ForestConfig = ForestConfig(), seed: int = 0) -> ConfusionMatrix:
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    tr, ev = stratified_halves(labels, seed)
    forest = train_forest(X[tr], [labels[i] for i in tr], cfg)
    probs = forest.predict_proba(X[ev])
    return confusion_from_probs(probs, [labels[i] for i in ev], forest.classes)


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("symmetrize expects a square matrix")
    return (A + A.T) / 2.0


def partition_objective(A_bar, left, right) -> float:
    """Within-part confusion mass of the partition ``left | right`` (index sets)."""
    A_bar = np.asarray(A_bar, dtype=np.float64)
    left, right = list(left), list(right)
    n = A_bar.shape[0]
    if not left or not right:
        raise ValueError("partition parts must be nonempty")
    if set(left) & set(right):
        raise ValueError("partition parts overlap")
    if set(left) | set(right) != set(range(n)) or len(left) + len(right) != n:
        raise ValueError("partition must cover every label exactly once")
    return float(A_bar[np.ix_(left, left)].sum() + A_bar[np.ix_(right, right)].sum())


def enumerate_partitions(n: int):
    """All ``2**(n-1) - 1`` two-way partitions of ``range(n)``.

    Index 0 always lies in the left part; yielded as (left, right) tuples.
    """
    if n < 2:
        raise ValueError("need at least 2 labels")
    for mask in range(1, 2 ** (n - 1)):
        right = tuple(i + 1 for i in range(n - 1) if mask >> i & 1)
        left = tuple(i for i in range(n) if i not in right)
        yield left, right


def _exact(A_bar):
    n = A_bar.shape[0]
    masks = np.arange(1, 2 ** (n - 1))
    in_right = np.zeros((len(masks), n), dtype=bool)
    in_right[:, 1:] = (masks[:, None] >> np.arange(n - 1)[None, :]) & 1
    z = (~in_right).astype(np.float64)
    r = in_right.astype(np.float64)
    E = np.einsum("ki,ij,kj->k", z, A_bar, z) + np.einsum("ki,ij,kj->k", r, A_bar, r)
    best = E.max()
    # ties: lexicographically smallest left part
    tied = np.flatnonzero(E >= best - 1e-12 * max(1.0, abs(best)))
    cands = [tuple(np.flatnonzero(~in_right[k])) for k in tied]
    left = min(cands)
    right = tuple(i for i in range(n) if i not in left)
    return left, right


def _kmeans2(U, seed, restarts=10, iters=100):
    rng = np.random.default_rng(seed)
    n = len(U)
    best, best_cost = None, np.inf
    for _ in range(restarts):
        a, b = rng.choice(n, 2, replace=False)
        centers = U[[a, b]].copy()
        assign = None
        for _ in range(iters):
            d = ((U[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(d, axis=1)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            for k in range(2):
                if np.any(assign == k):
                    centers[k] = U[assign == k].mean(axis=0)
        cost = ((U - centers[assign]) ** 2).sum()
        if cost < best_cost - 1e-12:
            best, best_cost = assign.copy(), cost
    return best


def _spectral_embedding(A_bar):
    """Top-2 eigenvectors of ``D^-1/2 W D^-1/2`` (the normalized-Laplacian
    bottom pair) and the inverse square-root degrees."""
    W = np.maximum(A_bar, 0.0)
    d = W.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    _, vecs = np.linalg.eigh(inv[:, None] * W * inv[None, :])
    return W, vecs[:, -2:], inv


def _spectral(A_bar, seed, rounding="sweep"):
    """Two-way spectral partition on affinity ``A_bar``.

    ``rounding="kmeans"`` is the Ng-Jordan-Weiss recipe (row-normalized
    embedding, 2-means). ``"sweep"`` orders labels by the second eigenvector
    of the random-walk Laplacian and keeps the prefix cut with the largest
    within-part confusion mass.
    """
    n = A_bar.shape[0]
    W, U, inv = _spectral_embedding(A_bar)
    if rounding == "sweep":
        order = np.argsort(U[:, 0] * inv, kind="stable")
        best_key = None
        for k in range(1, n):
            a = tuple(sorted(int(i) for i in order[:k]))
            b = tuple(sorted(int(i) for i in order[k:]))
            left, right = (a, b) if 0 in a else (b, a)
            E = partition_objective(A_bar, left, right)
            key = (-E, left)
            if best_key is None or key < best_key:
                best_key, best = key, (left, right)
        return best
    if rounding != "kmeans":
        raise ValueError(f"unknown spectral rounding {rounding!r}")
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.where(norms > 0, norms, 1.0)
    assign = _kmeans2(U, seed)
    for k in (0, 1):
        if not np.any(assign == k):
            # move the member least attached to its current cluster
            members = np.flatnonzero(assign == 1 - k)
            within = [W[i, members].sum() - W[i, i] for i in members]
            assign[members[int(np.argmin(within))]] = k
    side0 = assign[0]
    left = tuple(int(i) for i in np.flatnonzero(assign == side0))
    right = tuple(int(i) for i in np.flatnonzero(assign != side0))
    return left, right


def best_partition(A_bar, labels, mode: str = "auto", seed: int = 0, rounding: str = "sweep"):
    """Return ``(left_labels, right_labels)`` for a symmetrized confusion matrix.

    ``exact`` enumerates every partition; ``spectral`` uses the relaxation in
    :func:`_spectral`; ``auto`` is exact up to 12 labels.
    """
    A_bar = np.asarray(A_bar, dtype=np.float64)
    labels = list(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("best_partition needs at least 2 labels")
    if A_bar.shape != (n, n):
        raise ValueError("matrix shape does not match the label list")
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_LABELS else "spectral"
    if n == 2:
        left, right = (0,), (1,)
    elif mode == "exact":
        left, right = _exact(A_bar)
    elif mode == "spectral":
        left, right = _spectral(A_bar, seed, rounding)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return tuple(labels[i] for i in left), tuple(labels[i] for i in right)


@dataclass
class TreeNode:
    id: int
    labels: tuple
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class LabelTree:
    """Binary label tree; ``nodes[0]`` is the root, split nodes listed in pre-order."""

    nodes: list = field(default_factory=list)

    @property
    def labels(self) -> tuple:
        return self.nodes[0].labels

    @property
    def split_order(self) -> list:
        order, stack = [], [0]
        while stack:
            node = self.nodes[stack.pop()]
            if node.is_leaf:
                continue
            order.append(node.id)
            stack.extend([node.right, node.left])
        return order

    def splits(self):
        """(labels, left labels, right labels) per split node, in split order."""
        return [
            (self.nodes[i].labels, self.nodes[self.nodes[i].left].labels, self.nodes[self.nodes[i].right].labels)
            for i in self.split_order
        ]

    @property
    def n_splits(self) -> int:
        return sum(not n.is_leaf for n in self.nodes)

    @property
    def n_leaves(self) -> int:
        return sum(n.is_leaf for n in self.nodes)

    def validate(self) -> None:
        for node in self.nodes:
            if node.is_leaf:
                if len(node.labels) != 1:
                    raise ValueError(f"leaf {node.id} carries {len(node.labels)} labels")
                continue
            L = set(self.nodes[node.left].labels)
            R = set(self.nodes[node.right].labels)
            if not L or not R or L & R or L | R != set(node.labels):
                raise ValueError(f"node {node.id}: children do not partition {node.labels}")
        C = len(self.labels)
        if self.n_splits != C - 1 or self.n_leaves != C:
            raise ValueError("tree must have C-1 split nodes and C leaves")

    def to_json(self) -> str:
        doc = {
            "format": "label-tree",
            "version": 1,
            "split_order": self.split_order,
            "nodes": [
                {"id": n.id, "labels": list(n.labels), "children": None if n.is_leaf else [n.left, n.right]}
                for n in self.nodes
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LabelTree":
        doc = json.loads(text)
        if doc.get("format") != "label-tree":
            raise ValueError("not a label-tree document")
        nodes = []
        for d in doc["nodes"]:
            ch = d["children"]
            nodes.append(TreeNode(d["id"], tuple(d["labels"]), *(ch if ch else (None, None))))
        tree = cls(nodes)
        tree.validate()
        return tree

    @classmethod
    def from_splits(cls, nested) -> "LabelTree":
        """Build from a nested tuple such as ``(("a", "b"), "c")``."""

        def collect(item):
            return (item,) if not isinstance(item, tuple) else tuple(x for sub in item for x in collect(sub))

        tree = cls([])

        def add(item):
            node = TreeNode(len(tree.nodes), tuple(sorted(collect(item))))
            tree.nodes.append(node)
            if isinstance(item, tuple):
                if len(item) != 2:
                    raise ValueError("splits must be binary")
                node.left = add(item[0])
                node.right = add(item[1])
            return node.id

        add(nested)
        tree.validate()
        return tree


def build_label_tree(X, labels, cfg: ForestConfig = ForestConfig(), mode: str = "auto", seed: int = 0) -> LabelTree:
    """Grow the label tree top-down until every leaf holds one class.

    Each node uses only the samples whose labels it owns; halving and forest
    seeds are the same at every node.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    counts = {c: labels.count(c) for c in classes}
    few = [c for c, k in counts.items() if k < 4]
    if few:
        raise ValueError(f"classes with fewer than 4 samples: {few}")
    lab_arr = np.array([classes.index(c) for c in labels])
    node_cfg = cfg.replace(rng_seed=int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]))
    tree = LabelTree([])

    def grow(label_set):
        node = TreeNode(len(tree.nodes), tuple(label_set))
        tree.nodes.append(node)
        if len(label_set) == 1:
            return node.id
        codes = [classes.index(c) for c in label_set]
        rows = np.flatnonzero(np.isin(lab_arr, codes))
        sub_labels = [labels[i] for i in rows]
        try:
            if len(label_set) == 2:
                left, right = (label_set[0],), (label_set[1],)
            else:
                cm = confusion_matrix(X[rows], sub_labels, node_cfg, seed)
                left, right = best_partition(symmetrize(cm.A), cm.labels, mode, seed)
        except ValueError as exc:
            raise ValueError(f"label-tree node {tuple(label_set)}: {exc}") from exc
        node.left = grow(tuple(left))
        node.right = grow(tuple(right))
        return node.id

    grow(tuple(classes))
    tree.validate()
    return tree
