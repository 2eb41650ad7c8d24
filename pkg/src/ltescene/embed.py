"""Label-tree embeddings: per-split binary forests, LTE images and stacking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dsp import FAMILIES, SegmentMatrix, channel_name
from .forest import Forest, ForestConfig, train_forest
from .io import decode_bundle, encode_bundle
from .labeltree import LabelTree

CHANNELS = tuple(channel_name(f, d) for d in (False, True) for f in FAMILIES)
TARGET_T = 118


@dataclass
class EmbeddingModel:
    tree: LabelTree
    node_classifiers: list
    channel: str | None = None
    trained_on: frozenset = frozenset()

    def __post_init__(self):
        if len(self.node_classifiers) != self.tree.n_splits:
            raise ValueError("need exactly one classifier per split node")

    @property
    def n_features(self) -> int:
        return self.node_classifiers[0].n_features

    @property
    def F(self) -> int:
        return 2 * len(self.node_classifiers)

    def to_bytes(self) -> bytes:
        arrays = {f"node{i}": np.frombuffer(f.to_bytes(), dtype=np.uint8) for i, f in enumerate(self.node_classifiers)}
        meta = {
            "kind": "embedding-model",
            "version": 1,
            "tree": self.tree.to_json(),
            "channel": self.channel,
            "trained_on": sorted(self.trained_on),
        }
        return encode_bundle(meta, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingModel":
        meta, arrays = decode_bundle(blob)
        if meta.get("kind") != "embedding-model":
            raise ValueError("not an embedding-model record")
        tree = LabelTree.from_json(meta["tree"])
        forests = [Forest.from_bytes(arrays[f"node{i}"].tobytes()) for i in range(tree.n_splits)]
        return cls(tree, forests, meta["channel"], frozenset(meta["trained_on"]))


@dataclass
class LteImage:
    values: np.ndarray  # F x T
    channel: str | None = None
    recording_id: str | None = None
    label: object = None
    n_valid: int | None = None  # T before padding
    provenance: dict = field(default_factory=dict)

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass
class MultiChannelImage:
    values: np.ndarray  # P x F x T
    channels: tuple = CHANNELS
    recording_id: str | None = None
    label: object = None


def train_embedding_model(tree: LabelTree, X, labels, cfg: ForestConfig = ForestConfig(),
                          channel: str | None = None, trained_on=()) -> EmbeddingModel:
    """One binary forest per split node, in split order.

    Samples whose label is in the left child are the negative class (0), the
    right child's samples the positive class (1).
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    seeds = np.random.SeedSequence([cfg.rng_seed, 2]).generate_state(tree.n_splits)
    forests = []
    for i, (node, left, right) in enumerate(tree.splits()):
        rows = np.flatnonzero(np.isin(labels, list(node)))
        if rows.size == 0:
            raise ValueError(f"no samples for split node {node}")
        y = np.isin(labels[rows], list(right)).astype(int)
        if y.min() == y.max():
            side = "right" if y[0] else "left"
            raise ValueError(f"split node {node}: only {side}-child samples present")
        forests.append(train_forest(X[rows], y, cfg.replace(rng_seed=int(seeds[i]))))
    return EmbeddingModel(tree, forests, channel, frozenset(trained_on))


def embed_segments(model: EmbeddingModel, X) -> np.ndarray:
    """Map rows of ``X`` (N x M) to the (N x F) meta-class likelihood space."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"dimension mismatch: model expects {model.n_features} features")
    out = np.empty((X.shape[0], model.F))
    for i, forest in enumerate(model.node_classifiers):
        out[:, 2 * i : 2 * i + 2] = forest.predict_proba(X)
    return out


def embed_segment(model: EmbeddingModel, x) -> np.ndarray:
    """Psi(x) = (psi_1^L, psi_1^R, ..., psi_{C-1}^L, psi_{C-1}^R)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("embed_segment expects one feature vector")
    return embed_segments(model, x[None, :])[0]


def lte_image(model: EmbeddingModel, seg, recording_id=None, label=None) -> LteImage:
    """Embed each segment column; ``seg`` is a SegmentMatrix or an M x T array."""
    if isinstance(seg, SegmentMatrix):
        if model.channel is not None and seg.channel != model.channel:
            raise ValueError(f"feature family mismatch: model is {model.channel}, segments are {seg.channel}")
        channel = seg.channel
    else:
        channel = model.channel
    if recording_id is not None and recording_id in model.trained_on:
        raise ValueError(f"recording {recording_id!r} was in the embedding model's training set")
    values = embed_segments(model, _values(seg).T).T
    prov = {"model_trained_on": sorted(model.trained_on)}
    return LteImage(values, channel, recording_id, label, values.shape[1], prov)


def average_pool(img) -> np.ndarray:
    values = img.values if isinstance(img, LteImage) else np.asarray(img)
    if values.shape[-1] < 1:
        raise ValueError("cannot pool an empty image")
    return values.mean(axis=-1)


def circular_pad(img: LteImage, target_T: int = TARGET_T) -> LteImage:
    """Extend to ``target_T`` columns by repeating columns 1, 2, ... cyclically."""
    T = img.T
    if T < 1:
        raise ValueError("cannot pad an empty image")
    if T > target_T:
        raise ValueError(f"image longer than target: T={T} > {target_T}")
    values = np.ascontiguousarray(img.values[:, np.arange(target_T) % T])
    n_valid = img.n_valid if img.n_valid is not None else T
    return LteImage(values, img.channel, img.recording_id, img.label, n_valid, dict(img.provenance))


def stack_channels(images, channels=CHANNELS) -> MultiChannelImage:
    """Stack per-channel LTE images into a P x F x T tensor in canonical order."""
    images = list(images)
    if len(images) != len(channels):
        raise ValueError(f"missing channel: expected {len(channels)} images, got {len(images)}")
    for img, expected in zip(images, channels):
        if img.channel is not None and img.channel != expected:
            raise ValueError(f"channel order mismatch: got {img.channel}, expected {expected}")
    shapes = {img.values.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch between channels: {sorted(shapes)}")
    rec = {img.recording_id for img in images}
    lab = {img.label for img in images}
    return MultiChannelImage(
        np.stack([img.values for img in images]),
        tuple(channels),
        rec.pop() if len(rec) == 1 else None,
        lab.pop() if len(lab) == 1 else None,
    )


def segment_samples(segments: dict, rec_labels: dict, ids=None):
    """Flatten per-recording segment matrices into (X, labels, groups).

    Every segment inherits the label of its recording.
    """
    ids = sorted(segments) if ids is None else list(ids)
    X = np.vstack([_values(segments[r]).T for r in ids])
    labels, groups = [], []
    for r in ids:
        T = _values(segments[r]).shape[1]
        labels.extend([rec_labels[r]] * T)
        groups.extend([r] * T)
    return X, labels, groups


def _values(seg):
    return seg.values if isinstance(seg, SegmentMatrix) else np.asarray(seg)


def stratified_folds(ids, rec_labels: dict, k: int, seed: int) -> list[list]:
    """Assign recordings to ``k`` folds, dealing each class round-robin after a seeded shuffle."""
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for r in sorted(ids):
        by_class.setdefault(rec_labels[r], []).append(r)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in sorted(by_class, key=str):
        members = list(by_class[c])
        if len(members) < k:
            warnings.warn(f"class {c!r} has {len(members)} recordings, fewer than k={k} folds", stacklevel=2)
        for j, i in enumerate(rng.permutation(len(members))):
            folds[(offset + j) % k].append(members[i])
        offset += len(members)
    return [sorted(f) for f in folds]


def crossval_embed_training_set(tree: LabelTree, segments: dict, rec_labels: dict, cfg: ForestConfig = ForestConfig(),
                                k: int = 10, seed: int = 0, channel: str | None = None) -> dict:
    """Embed every training recording with a model that never saw it.

    Recordings are split into ``k`` stratified folds; fold ``f`` is embedded
    by a model trained on the other ``k - 1`` folds. Returns
    ``{recording_id: LteImage}``.
    """
    ids = sorted(segments)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of recordings ({len(ids)})")
    classes = set(rec_labels[r] for r in ids)
    folds = stratified_folds(ids, rec_labels, k, seed)
    out = {}
    fold_seeds = np.random.SeedSequence([seed, 3]).generate_state(k)
    for f, held in enumerate(folds):
        if not held:
            continue
        train_ids = [r for r in ids if r not in set(held)]
        missing = classes - {rec_labels[r] for r in train_ids}
        if missing:
            raise ValueError(f"fold {f}: classes {sorted(missing, key=str)} absent from the training split")
        X, labels, _ = segment_samples(segments, rec_labels, train_ids)
        model = train_embedding_model(tree, X, labels, cfg.replace(rng_seed=int(fold_seeds[f])), channel, train_ids)
        for r in held:
            img = lte_image(model, segments[r], r, rec_labels[r])
            img.provenance["fold"] = f
            out[r] = img
    return out
