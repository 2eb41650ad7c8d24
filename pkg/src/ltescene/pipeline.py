"""Dataset manifests, experiment orchestration and evaluation reports."""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cnn as cnnmod
from .dsp import FAMILIES, AudioSignal, DenoiseConfig, SegmentMatrix, bad_segments, channel_name, segment_features, spectral_subtract
from .embed import CHANNELS, LteImage, average_pool, circular_pad, crossval_embed_training_set, lte_image, segment_samples, stack_channels, train_embedding_model
from .forest import ForestConfig
from .io import read_tensor, read_wav, write_tensor
from .kernelbase import COST_GRID, fusion_gram, mean_train_distance, predict_svm_batch, select_cost, train_ovo_svm
from .labeltree import LabelTree, build_label_tree

log = logging.getLogger(__name__)

SYSTEMS = ("LTE1", "LTE2", "LTE3", "LTE+", "cnn-max", "cnn-mean", "cnn-mix")
SVM_FAMILIES = {"LTE1": ("GTCC",), "LTE2": ("MFCC",), "LTE3": ("LOGFB",), "LTE+": FAMILIES}


class ManifestError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FoldError(RuntimeError):
    """A stage failed; finished folds/systems stay checkpointed in the work dir."""

    def __init__(self, fold, system, cause):
        self.fold, self.system = fold, system
        super().__init__(f"fold {fold}, system {system}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class Entry:
    id: str
    path: Path
    label: str
    fold: int
    exclude: tuple = ()


@dataclass
class DatasetManifest:
    entries: list
    classes: list
    audio_root: Path

    @property
    def folds(self) -> list[int]:
        return sorted({e.fold for e in self.entries})

    def by_id(self) -> dict:
        return {e.id: e for e in self.entries}

    def labels(self) -> dict:
        return {e.id: e.label for e in self.entries}

    def ids(self, folds=None, exclude_folds=None) -> list[str]:
        return sorted(
            e.id for e in self.entries
            if (folds is None or e.fold in folds) and (exclude_folds is None or e.fold not in exclude_folds)
        )


def ingest_dataset(manifest_path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a ``id,path,label,fold[,exclude]`` CSV manifest.

    ``exclude`` optionally lists segment indices to drop, separated by ``;``.
    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    problems = []
    entries = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"id", "path", "label", "fold"} - set(reader.fieldnames or [])
        if missing_cols:
            raise ManifestError([f"missing columns: {sorted(missing_cols)}"])
        seen = set()
        for n, row in enumerate(reader, start=2):
            rid = (row["id"] or "").strip()
            if not rid:
                problems.append(f"line {n}: empty id")
                continue
            if rid in seen:
                problems.append(f"duplicate id {rid!r}")
                continue
            seen.add(rid)
            try:
                fold = int(row["fold"])
            except (TypeError, ValueError):
                problems.append(f"{rid}: unknown fold {row['fold']!r}")
                continue
            path = Path(row["path"])
            path = path if path.is_absolute() else root / path
            excl = ()
            if row.get("exclude"):
                try:
                    excl = tuple(sorted(int(s) for s in row["exclude"].split(";") if s.strip()))
                except ValueError:
                    problems.append(f"{rid}: bad exclude list {row['exclude']!r}")
            if check_files and not path.is_file():
                problems.append(f"{rid}: unreadable file {path}")
            entries.append(Entry(rid, path, row["label"].strip(), fold, excl))
    if not entries and not problems:
        problems.append("empty manifest")
    folds = sorted({e.fold for e in entries})
    if folds and folds != list(range(1, len(folds) + 1)):
        problems.append(f"unknown fold: fold ids must be contiguous from 1, got {folds}")
    if problems:
        raise ManifestError(problems)
    classes = sorted({e.label for e in entries})
    return DatasetManifest(entries, classes, root)


@dataclass
class EvaluationReport:
    classes: list
    per_class: dict  # label -> accuracy %
    overall: float
    confusion: np.ndarray  # counts, rows = truth
    per_fold: list = field(default_factory=list)
    system: str | None = None
    predictions: dict = field(default_factory=dict)

    def check(self) -> None:
        total = self.confusion.sum()
        recomputed = 100.0 * np.trace(self.confusion) / total if total else 0.0
        if abs(recomputed - self.overall) > 1e-9:
            raise AssertionError("overall accuracy disagrees with the confusion matrix")

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "classes": self.classes,
            "per_class": self.per_class,
            "overall": self.overall,
            "confusion": self.confusion.astype(int).tolist(),
            "per_fold": self.per_fold,
            "predictions": self.predictions,
        }

    @classmethod
    def from_dict(cls, d) -> "EvaluationReport":
        return cls(d["classes"], d["per_class"], d["overall"], np.array(d["confusion"]),
                   d.get("per_fold", []), d.get("system"), d.get("predictions", {}))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["category", self.system or "accuracy"])
            for c in self.classes:
                w.writerow([c, f"{self.per_class[c]:.1f}"])
            w.writerow(["Overall", f"{self.overall:.1f}"])

    def to_text(self) -> str:
        width = max([len("Category"), len("Overall")] + [len(str(c)) for c in self.classes]) + 2
        head = self.system or "accuracy"
        lines = ["Recognition accuracy (%)", f"{'Category':<{width}}{head:>10}", "-" * (width + 10)]
        lines += [f"{str(c):<{width}}{self.per_class[c]:>10.1f}" for c in self.classes]
        lines += ["-" * (width + 10), f"{'Overall':<{width}}{self.overall:>10.1f}"]
        if self.per_fold:
            lines.append("")
            lines += [f"fold {f['fold']}: {f['overall']:.1f}% ({f['n']} recordings)" for f in self.per_fold]
        return "\n".join(lines)


def evaluate(predictions, truth, classes=None) -> EvaluationReport:
    predictions, truth = list(predictions), list(truth)
    if len(predictions) != len(truth):
        raise ValueError("predictions and truth differ in length")
    if classes is None:
        classes = sorted(set(truth) | set(predictions), key=str)
    idx = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(predictions, truth):
        conf[idx[t], idx[p]] += 1
    per_class = {
        c: (100.0 * conf[i, i] / conf[i].sum() if conf[i].sum() else 0.0) for i, c in enumerate(classes)
    }
    overall = 100.0 * np.trace(conf) / conf.sum() if conf.sum() else 0.0
    return EvaluationReport(list(classes), per_class, float(overall), conf)


# --- configuration ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    seed: int = 42
    forest: ForestConfig = field(default_factory=lambda: ForestConfig(n_trees=200))
    tree_mode: str = "auto"
    crossval_k: int = 10
    target_T: int = 118
    cnn: cnnmod.CnnConfig = field(default_factory=cnnmod.CnnConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    svm_cost_grid: tuple = COST_GRID
    svm_cv_k: int = 10
    svm_tol: float = 1e-3
    svm_denoised: bool = False
    shared_tree: bool = False
    resample: bool = False
    deterministic: bool = True
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "forest" in d:
            d["forest"] = ForestConfig(**d["forest"])
        if "cnn" in d:
            d["cnn"] = cnnmod.CnnConfig(**d["cnn"])
        if "denoise" in d:
            d["denoise"] = DenoiseConfig(**d["denoise"])
        if "svm_cost_grid" in d:
            d["svm_cost_grid"] = tuple(float(c) for c in d["svm_cost_grid"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def preset(name: str) -> ExperimentConfig:
    """Named configurations: ``desk`` (laptop scale) and ``paper-scale``."""
    if name == "desk":
        return ExperimentConfig(forest=ForestConfig(n_trees=30), cnn=cnnmod.PRESETS["desk"])
    if name == "paper-scale":
        return ExperimentConfig(forest=ForestConfig(n_trees=200), cnn=cnnmod.PRESETS["paper-scale"])
    raise ValueError(f"unknown preset {name!r}")


def load_config(path=None, preset_name: str | None = None) -> ExperimentConfig:
    base = preset(preset_name) if preset_name else ExperimentConfig()
    if path is None:
        return base
    import yaml

    doc = yaml.safe_load(Path(path).read_text()) or {}
    if "preset" in doc:
        base = preset(doc.pop("preset"))
    merged = base.to_dict()
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = {**merged[k], **v}
        else:
            merged[k] = v
    return ExperimentConfig.from_dict(merged)


def substream(seed: int, *names) -> int:
    """Deterministic integer seed for a named stage (e.g. ``("tree", 2, "MFCC-raw")``)."""
    key = [seed] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# --- features ----------------------------------------------------------------


def recording_features(samples, sample_rate, families=FAMILIES, denoise: DenoiseConfig | None = None,
                       exclude=()) -> dict:
    """Segment matrices for one recording, keyed by channel name.

    Segments holding clipped/non-finite samples or listed in ``exclude`` are
    dropped; raw and denoised channels drop the same segments.
    """
    x = np.asarray(samples, dtype=np.float64)
    drop = set(bad_segments(x, sample_rate).tolist()) | set(exclude)
    x = np.where(np.isfinite(x), x, 0.0)
    sig = AudioSignal(x, sample_rate)
    variants = [(False, sig)]
    if denoise is not None:
        variants.append((True, spectral_subtract(sig, denoise)))
    out = {}
    for denoised, s in variants:
        for fam in families:
            seg = segment_features(s, fam, denoised=denoised)
            keep = [t for t in range(seg.T) if t not in drop]
            if not keep:
                raise ValueError("every segment of the recording is excluded")
            out[channel_name(fam, denoised)] = SegmentMatrix(seg.values[:, keep], fam, denoised)
    return out


def _feature_job(args):
    path, exclude, denoise, resample = args
    x, sr = read_wav(path, resample=resample)
    return recording_features(x, sr, denoise=denoise, exclude=exclude)


def compute_features(manifest: DatasetManifest, denoise: DenoiseConfig | None = DenoiseConfig(),
                     cache_dir=None, jobs: int = 1, resample: bool = False) -> dict:
    """``{channel: {recording_id: SegmentMatrix}}`` for every manifest entry.

    With ``cache_dir`` set, matrices are stored as tensor files
    ``<cache_dir>/<channel>/<id>.lteb`` and reused on later calls.
    """
    channels = [channel_name(f, d) for d in ([False, True] if denoise is not None else [False]) for f in FAMILIES]
    out = {c: {} for c in channels}
    todo = []
    for e in manifest.entries:
        cached = None
        if cache_dir is not None:
            paths = [Path(cache_dir) / c / f"{e.id}.lteb" for c in channels]
            if all(p.is_file() for p in paths):
                cached = {}
                for c, p in zip(channels, paths):
                    arr, meta = read_tensor(p)
                    cached[c] = SegmentMatrix(arr, meta["family"], meta["denoised"])
        if cached is None:
            todo.append(e)
        else:
            for c in channels:
                out[c][e.id] = cached[c]
    args = [(e.path, e.exclude, denoise, resample) for e in todo]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_feature_job, args))
    else:
        results = [_feature_job(a) for a in args]
    for e, feats in zip(todo, results):
        for c in channels:
            out[c][e.id] = feats[c]
            if cache_dir is not None:
                p = Path(cache_dir) / c / f"{e.id}.lteb"
                p.parent.mkdir(parents=True, exist_ok=True)
                seg = feats[c]
                write_tensor(p, seg.values, {"recording_id": e.id, "family": seg.feature_family,
                                             "denoised": seg.denoised, "channel": c, "label": e.label})
    return out


# --- experiment --------------------------------------------------------------


def image_metadata(img: LteImage) -> dict:
    return {"recording_id": img.recording_id, "channel": img.channel, "label": img.label,
            "n_valid": img.n_valid, "provenance": img.provenance}


def save_image(path, img: LteImage) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_tensor(path, img.values, image_metadata(img))


def load_image(path) -> LteImage:
    values, meta = read_tensor(path)
    return LteImage(values, meta.get("channel"), meta.get("recording_id"), meta.get("label"),
                    meta.get("n_valid"), meta.get("provenance", {}))


def channels_for(system: str, cfg: ExperimentConfig) -> tuple:
    if system in SVM_FAMILIES:
        return tuple(channel_name(f, cfg.svm_denoised) for f in SVM_FAMILIES[system])
    if system.startswith("cnn-"):
        return CHANNELS
    raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")


def fold_label_tree(fold, channel, train_segs: dict, labels: dict, cfg: ExperimentConfig) -> LabelTree:
    X, labs, _ = segment_samples(train_segs, labels)
    seed = substream(cfg.seed, "tree", fold, channel)
    return build_label_tree(X, labs, cfg.forest.replace(rng_seed=seed), cfg.tree_mode, seed)


def fold_channel_images(fold, channel, train_segs: dict, test_segs: dict, labels: dict,
                        tree: LabelTree, cfg: ExperimentConfig) -> tuple[dict, dict]:
    """Cross-validated LTE images for the training recordings and
    final-model images for the held-out ones."""
    seed = substream(cfg.seed, "embed", fold, channel)
    fcfg = cfg.forest.replace(rng_seed=seed)
    tr_imgs = crossval_embed_training_set(tree, train_segs, labels, fcfg, cfg.crossval_k, seed, channel)
    X, labs, _ = segment_samples(train_segs, labels)
    final = train_embedding_model(tree, X, labs, fcfg, channel, sorted(train_segs))
    te_imgs = {r: lte_image(final, seg, r, labels[r]) for r, seg in test_segs.items()}
    return tr_imgs, te_imgs


def _channel_job(args):
    fold, channel, train_segs, test_segs, labels, cfg, tree = args
    if tree is None:
        tree = fold_label_tree(fold, channel, train_segs, labels, cfg)
    tr, te = fold_channel_images(fold, channel, train_segs, test_segs, labels, tree, cfg)
    return tree, tr, te


class FoldImages:
    """Per-fold LTE images for train (cross-validated) and test recordings.

    Computed lazily per channel and optionally persisted under ``work_dir``.
    """

    def __init__(self, fold, train_ids, test_ids, labels, features, cfg: ExperimentConfig, work_dir=None):
        self.fold = fold
        self.train_ids = train_ids
        self.test_ids = test_ids
        self.labels = labels
        self.features = features
        self.cfg = cfg
        self.dir = Path(work_dir) / f"fold{fold}" if work_dir else None
        self._images = {}
        self._trees = {}

    def tree(self, channel) -> LabelTree:
        key = CHANNELS[0] if self.cfg.shared_tree else channel
        if key in self._trees:
            return self._trees[key]
        path = self.dir / "trees" / f"{key}.json" if self.dir else None
        if path is not None and path.is_file():
            tree = LabelTree.from_json(path.read_text())
        else:
            segs = {r: self.features[key][r] for r in self.train_ids}
            tree = fold_label_tree(self.fold, key, segs, self.labels, self.cfg)
        self._store_tree(key, tree)
        return tree

    def _store_tree(self, key, tree):
        self._trees[key] = tree
        path = self.dir / "trees" / f"{key}.json" if self.dir else None
        if path is not None and not path.is_file():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(tree.to_json())

    def prepare(self, channels, jobs: int = 1) -> None:
        """Embed several channels up front, ``jobs`` processes at a time."""
        todo = []
        for ch in channels:
            if ch in self._images:
                continue
            loaded = self._load(ch)
            if loaded is not None:
                self._finish(ch, loaded)
            else:
                todo.append(ch)
        if jobs <= 1 or len(todo) < 2:
            for ch in todo:
                self.images(ch)
            return
        from concurrent.futures import ProcessPoolExecutor

        shared = self.tree(CHANNELS[0]) if self.cfg.shared_tree else None
        args = []
        for ch in todo:
            segs = self.features[ch]
            args.append((self.fold, ch, {r: segs[r] for r in self.train_ids}, {r: segs[r] for r in self.test_ids},
                         self.labels, self.cfg, shared or self._trees.get(ch)))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for ch, (tree, tr, te) in zip(todo, pool.map(_channel_job, args)):
                self._store_tree(CHANNELS[0] if shared else ch, tree)
                self._save(ch, (tr, te))
                self._finish(ch, (tr, te))

    def images(self, channel) -> tuple[dict, dict]:
        if channel in self._images:
            return self._images[channel]
        loaded = self._load(channel)
        if loaded is None:
            t0 = time.time()
            segs = self.features[channel]
            loaded = fold_channel_images(self.fold, channel, {r: segs[r] for r in self.train_ids},
                                         {r: segs[r] for r in self.test_ids}, self.labels, self.tree(channel), self.cfg)
            self._save(channel, loaded)
            log.info("fold %s channel %s embedded in %.1fs", self.fold, channel, time.time() - t0)
        return self._finish(channel, loaded)

    def _finish(self, channel, loaded):
        self._check_isolation(*loaded)
        self._images[channel] = loaded
        return loaded

    def _save(self, channel, loaded):
        if self.dir is None:
            return
        for split, imgs in zip(("train", "test"), loaded):
            for r, img in imgs.items():
                save_image(self.dir / "images" / channel / split / f"{r}.lteb", img)

    def _load(self, channel):
        if self.dir is None:
            return None
        base = self.dir / "images" / channel
        paths = [base / "train" / f"{r}.lteb" for r in self.train_ids] + [base / "test" / f"{r}.lteb" for r in self.test_ids]
        if not all(p.is_file() for p in paths):
            return None
        n = len(self.train_ids)
        imgs = [load_image(p) for p in paths]
        return dict(zip(self.train_ids, imgs[:n])), dict(zip(self.test_ids, imgs[n:]))

    def _check_isolation(self, tr_imgs, te_imgs):
        test = set(self.test_ids)
        for r, img in list(tr_imgs.items()) + list(te_imgs.items()):
            seen = set(img.provenance.get("model_trained_on", []))
            if r in seen or seen & test:
                raise AssertionError(f"fold {self.fold}: recording {r} embedded by a model that saw held-out data")


def _svm_predict(fi: FoldImages, system: str) -> list:
    cfg = fi.cfg
    chans = channels_for(system, cfg)
    tr_vecs, te_vecs = [], []
    for ch in chans:
        tr, te = fi.images(ch)
        tr_vecs.append(np.array([average_pool(tr[r]) for r in fi.train_ids]))
        te_vecs.append(np.array([average_pool(te[r]) for r in fi.test_ids]))
    means = [mean_train_distance(v) for v in tr_vecs]
    gram = fusion_gram(tr_vecs, means=means)
    y = [fi.labels[r] for r in fi.train_ids]
    cost, _ = select_cost(gram, y, cfg.svm_cost_grid, cfg.svm_cv_k, substream(cfg.seed, "svm-cv", fi.fold), cfg.svm_tol)
    model = train_ovo_svm(gram, y, cost, cfg.svm_tol)
    return predict_svm_batch(model, fusion_gram(te_vecs, tr_vecs, means))


def stacked_images(fi: FoldImages, ids, split: str) -> np.ndarray:
    out = []
    for r in ids:
        imgs = [circular_pad(fi.images(ch)[0 if split == "train" else 1][r], fi.cfg.target_T) for ch in CHANNELS]
        out.append(stack_channels(imgs).values)
    return np.stack(out)


def _cnn_predict(fi: FoldImages, system: str, loss_csv=None) -> list:
    cfg = fi.cfg
    mode = system.split("-", 1)[1]
    ccfg = cfg.cnn.replace(pooling=mode, seed=substream(cfg.seed, "cnn", fi.fold, mode))
    S_tr = stacked_images(fi, fi.train_ids, "train")
    S_te = stacked_images(fi, fi.test_ids, "test")
    model, hist = cnnmod.train_cnn(S_tr, [fi.labels[r] for r in fi.train_ids], ccfg, classes=sorted(set(fi.labels.values())))
    if loss_csv is not None:
        write_loss_csv(loss_csv, hist)
    P = cnnmod.predict_proba(model, S_te)
    return [model.classes[i] for i in np.argmax(P, axis=1)]


def write_loss_csv(path, history) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows((i + 1, f"{v:.8f}") for i, v in enumerate(history))


def run_experiments(manifest: DatasetManifest, systems, cfg: ExperimentConfig | None = None,
                    work_dir=None, features=None, folds=None) -> dict:
    """Cross-validate several systems over the manifest's folds.

    Label trees and LTE images are shared between systems within a fold.
    With ``work_dir`` set, finished folds are checkpointed and skipped on
    re-runs. Returns ``{system: EvaluationReport}``.
    """
    cfg = cfg or ExperimentConfig()
    systems = list(systems)
    for s in systems:
        channels_for(s, cfg)
    need_denoised = any(s.startswith("cnn-") for s in systems) or cfg.svm_denoised
    if features is None:
        cache = Path(work_dir) / "features" if work_dir else None
        features = compute_features(manifest, cfg.denoise if need_denoised else None, cache, cfg.jobs, cfg.resample)
    labels = manifest.labels()
    results = {s: {"pred": [], "truth": [], "ids": [], "per_fold": []} for s in systems}
    for fold in folds or manifest.folds:
        test_ids = manifest.ids(folds=[fold])
        train_ids = manifest.ids(exclude_folds=[fold])
        if not test_ids:
            continue
        overlap = set(test_ids) & set(train_ids)
        if overlap:
            raise AssertionError(f"fold {fold}: ids in both train and test: {sorted(overlap)}")
        fi = FoldImages(fold, train_ids, test_ids, labels, features, cfg, work_dir)
        ckpts = {s: Path(work_dir) / f"fold{fold}" / f"{s}.json" if work_dir else None for s in systems}
        pending = [s for s in systems if ckpts[s] is None or not ckpts[s].is_file()]
        if cfg.jobs > 1 and pending:
            fi.prepare(sorted({ch for s in pending for ch in channels_for(s, cfg)}), cfg.jobs)
        for s in systems:
            ckpt = ckpts[s]
            if ckpt is not None and ckpt.is_file():
                pred = json.loads(ckpt.read_text())["predictions"]
                pred = [pred[r] for r in test_ids]
            else:
                t0 = time.time()
                try:
                    if s in SVM_FAMILIES:
                        pred = _svm_predict(fi, s)
                    else:
                        loss_csv = Path(work_dir) / f"fold{fold}" / f"{s}-loss.csv" if work_dir else None
                        pred = _cnn_predict(fi, s, loss_csv)
                except Exception as exc:
                    raise FoldError(fold, s, exc) from exc
                log.info("fold %s system %s done in %.1fs", fold, s, time.time() - t0)
                if ckpt is not None:
                    ckpt.parent.mkdir(parents=True, exist_ok=True)
                    ckpt.write_text(json.dumps({"fold": fold, "system": s, "train_ids": train_ids,
                                                "predictions": dict(zip(test_ids, pred))}, indent=1))
            truth = [labels[r] for r in test_ids]
            res = results[s]
            res["pred"] += pred
            res["truth"] += truth
            res["ids"] += test_ids
            fold_rep = evaluate(pred, truth, manifest.classes)
            res["per_fold"].append({"fold": fold, "overall": fold_rep.overall, "n": len(test_ids)})
    reports = {}
    for s, res in results.items():
        rep = evaluate(res["pred"], res["truth"], manifest.classes)
        rep.per_fold = res["per_fold"]
        rep.system = s
        rep.predictions = dict(zip(res["ids"], res["pred"]))
        rep.check()
        reports[s] = rep
    return reports


def run_experiment(manifest: DatasetManifest, system: str, cfg: ExperimentConfig | None = None,
                   work_dir=None, features=None) -> EvaluationReport:
    return run_experiments(manifest, [system], cfg, work_dir, features)[system]


def format_table(reports) -> str:
    """Per-class and overall accuracy, one column per system."""
    reports = list(reports)
    classes = reports[0].classes
    width = max([len("Category")] + [len(str(c)) for c in classes]) + 2
    cols = [max(10, len(r.system or "") + 2) for r in reports]
    head = f"{'Category':<{width}}" + "".join(f"{r.system or '':>{w}}" for r, w in zip(reports, cols))
    rule = "-" * len(head)
    lines = ["Recognition accuracy (%)", head, rule]
    for c in classes:
        lines.append(f"{str(c):<{width}}" + "".join(f"{r.per_class.get(c, 0.0):>{w}.1f}" for r, w in zip(reports, cols)))
    lines += [rule, f"{'Overall':<{width}}" + "".join(f"{r.overall:>{w}.1f}" for r, w in zip(reports, cols))]
    return "\n".join(lines)


def write_table_csv(reports, path) -> None:
    reports = list(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category"] + [r.system for r in reports])
        for c in reports[0].classes:
            w.writerow([c] + [f"{r.per_class.get(c, 0.0):.1f}" for r in reports])
        w.writerow(["Overall"] + [f"{r.overall:.1f}" for r in reports])


def save_report(report: EvaluationReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def load_report(path) -> EvaluationReport:
    rep = EvaluationReport.from_dict(json.loads(Path(path).read_text()))
    rep.check()
    return rep
