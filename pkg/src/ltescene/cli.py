"""Command-line entry point (``ltescene``).

Typical desk-scale session::

    ltescene synth --out corpus
    ltescene --preset desk features corpus/manifest.csv --out work/features
    ltescene --preset desk train-cnn corpus/manifest.csv --work work --pooling mix
    ltescene --preset desk train-svm corpus/manifest.csv --work work --system LTE+
    ltescene report work/reports/*.json --csv table.csv
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("ltescene")


def _config(args):
    from .pipeline import load_config

    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.deterministic:
        cfg.deterministic = True
    if args.resample:
        cfg.resample = True
    return cfg


def _features_from_dir(manifest, feat_dir, channel):
    from .dsp import SegmentMatrix
    from .io import read_tensor

    out = {}
    for e in manifest.entries:
        arr, meta = read_tensor(Path(feat_dir) / channel / f"{e.id}.lteb")
        out[e.id] = SegmentMatrix(arr, meta["family"], meta["denoised"])
    return out


def cmd_synth(args, cfg):
    from .synth import synth_corpus

    path = synth_corpus(args.out, args.classes, args.per_class, args.duration, cfg.seed, args.folds)
    print(path)


def cmd_features(args, cfg):
    from .pipeline import compute_features, ingest_dataset

    m = ingest_dataset(args.manifest)
    feats = compute_features(m, None if args.no_denoise else cfg.denoise, args.out, cfg.jobs, cfg.resample)
    for ch, d in feats.items():
        dims = {s.values.shape[0] for s in d.values()}
        print(f"{ch}: {len(d)} recordings, M={sorted(dims)}")


def cmd_denoise(args, cfg):
    from .dsp import AudioSignal, spectral_subtract
    from .io import read_wav, write_wav

    x, sr = read_wav(args.input, resample=cfg.resample)
    y = spectral_subtract(AudioSignal(x, sr), cfg.denoise)
    write_wav(args.output, y.samples, sr)


def _train_segments(args):
    from .embed import segment_samples
    from .pipeline import ingest_dataset

    m = ingest_dataset(args.manifest, check_files=False)
    ids = m.ids(exclude_folds=args.exclude_fold)
    segs = _features_from_dir(m, args.features, args.channel)
    X, labels, _ = segment_samples({r: segs[r] for r in ids}, m.labels())
    return m, ids, segs, X, labels


def cmd_tree(args, cfg):
    from .labeltree import build_label_tree

    _, _, _, X, labels = _train_segments(args)
    tree = build_label_tree(X, labels, cfg.forest.replace(rng_seed=cfg.seed), args.mode, cfg.seed)
    Path(args.out).write_text(tree.to_json())
    for node, left, right in tree.splits():
        print(f"{'/'.join(map(str, left))}  |  {'/'.join(map(str, right))}")


def cmd_embed(args, cfg):
    from .embed import train_embedding_model
    from .labeltree import LabelTree

    _, ids, _, X, labels = _train_segments(args)
    tree = LabelTree.from_json(Path(args.tree).read_text())
    model = train_embedding_model(tree, X, labels, cfg.forest.replace(rng_seed=cfg.seed), args.channel, ids)
    Path(args.out).write_bytes(model.to_bytes())
    print(f"{model.tree.n_splits} split forests, F={model.F}, trained on {len(ids)} recordings")


def cmd_image(args, cfg):
    from .dsp import SegmentMatrix
    from .embed import EmbeddingModel, circular_pad, lte_image
    from .io import read_tensor
    from .pipeline import save_image

    model = EmbeddingModel.from_bytes(Path(args.model).read_bytes())
    out = Path(args.out)
    for p in args.segments:
        arr, meta = read_tensor(p)
        seg = SegmentMatrix(arr, meta["family"], meta["denoised"])
        img = lte_image(model, seg, meta.get("recording_id"), meta.get("label"))
        if args.pad:
            img = circular_pad(img, args.pad)
        save_image(out / Path(p).name, img)
    print(f"wrote {len(args.segments)} images to {out}")


def _run(args, cfg, systems):
    from .pipeline import format_table, ingest_dataset, run_experiments, save_report

    m = ingest_dataset(args.manifest)
    work = Path(args.work)
    reports = run_experiments(m, systems, cfg, work, folds=args.fold)
    for s, rep in reports.items():
        save_report(rep, work / "reports" / f"{s}.json")
    print(format_table(reports.values()))


def cmd_train_svm(args, cfg):
    cfg.svm_denoised = args.denoised
    _run(args, cfg, args.system)


def cmd_train_cnn(args, cfg):
    if args.epochs is not None:
        cfg.cnn = cfg.cnn.replace(epochs=args.epochs)
    if args.filters is not None:
        cfg.cnn = cfg.cnn.replace(n_filters=args.filters)
    _run(args, cfg, [f"cnn-{p}" for p in args.pooling])


def cmd_eval(args, cfg):
    import csv

    from .pipeline import evaluate, ingest_dataset, save_report

    m = ingest_dataset(args.manifest, check_files=False)
    truth = m.labels()
    with open(args.predictions, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    unknown = [r["id"] for r in rows if r["id"] not in truth]
    if unknown:
        sys.exit(f"error: predictions for ids not in the manifest: {unknown[:5]}")
    rep = evaluate([r["prediction"] for r in rows], [truth[r["id"]] for r in rows], m.classes)
    rep.system = args.name
    rep.predictions = {r["id"]: r["prediction"] for r in rows}
    print(rep.to_text())
    if args.out:
        save_report(rep, args.out)


def cmd_report(args, cfg):
    from .pipeline import format_table, load_report, write_table_csv

    reports = [load_report(p) for p in args.reports]
    print(format_table(reports))
    if args.per_fold:
        for r in reports:
            folds = ", ".join(f"{f['fold']}: {f['overall']:.1f}" for f in r.per_fold)
            print(f"{r.system} per fold: {folds}")
    if args.csv:
        write_table_csv(reports, args.csv)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltescene", description="Label-tree embedding scene classification")
    p.add_argument("--seed", type=int, default=None, help="experiment seed (overrides config)")
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument("--preset", choices=["desk", "paper-scale"], default=None)
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics for bit-reproducible runs")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for features and per-channel embedding")
    p.add_argument("--resample", action="store_true", help="resample non-44.1 kHz audio instead of rejecting it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus and manifest")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--classes", type=int, default=6)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--folds", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="segment features for every recording in a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--out", type=Path, required=True, help="feature cache directory")
    s.add_argument("--no-denoise", action="store_true", help="skip the denoised channels")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("denoise", help="spectral subtraction on one WAV file")
    s.add_argument("input", type=Path)
    s.add_argument("output", type=Path)
    s.set_defaults(func=cmd_denoise)

    for name, func, helptext in (("tree", cmd_tree, "learn a label tree"), ("embed", cmd_embed, "train an embedding model")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("manifest", type=Path)
        s.add_argument("--features", type=Path, required=True, help="directory written by 'features'")
        s.add_argument("--channel", required=True, help="e.g. GTCC-raw, MFCC-denoised")
        s.add_argument("--exclude-fold", type=int, action="append", default=None, help="hold out this fold")
        s.add_argument("--out", type=Path, required=True)
        if name == "tree":
            s.add_argument("--mode", choices=["auto", "exact", "spectral"], default="auto")
        else:
            s.add_argument("--tree", type=Path, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("image", help="LTE images from segment tensor files")
    s.add_argument("segments", nargs="+", type=Path)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--pad", type=int, default=None, help="circular-pad to this many columns")
    s.set_defaults(func=cmd_image)

    for name, func in (("train-svm", cmd_train_svm), ("train-cnn", cmd_train_cnn)):
        s = sub.add_parser(name, help="cross-validated training and evaluation over the manifest folds")
        s.add_argument("manifest", type=Path)
        s.add_argument("--work", type=Path, required=True, help="work dir for caches, checkpoints and reports")
        s.add_argument("--fold", type=int, action="append", default=None, help="only run this fold")
        if name == "train-svm":
            s.add_argument("--system", action="append", choices=["LTE1", "LTE2", "LTE3", "LTE+"], default=None)
            s.add_argument("--denoised", action="store_true", help="use the denoised channels")
        else:
            s.add_argument("--pooling", action="append", choices=["max", "mean", "mix"], default=None)
            s.add_argument("--epochs", type=int, default=None)
            s.add_argument("--filters", type=int, default=None, help="filters per width (Q)")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score an id,prediction CSV against a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("predictions", type=Path)
    s.add_argument("--name", default="predictions")
    s.add_argument("--out", type=Path, default=None, help="write the report as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="tabulate saved reports")
    s.add_argument("reports", nargs="+", type=Path)
    s.add_argument("--csv", type=Path, default=None)
    s.add_argument("--per-fold", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(message)s")
    if args.deterministic:
        # must happen before numpy loads its BLAS
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ[var] = "1"
    if getattr(args, "system", "") is None:
        args.system = ["LTE+"]
    if getattr(args, "pooling", "") is None:
        args.pooling = ["mix"]
    cfg = _config(args)
    if cfg.deterministic and args.deterministic:
        cfg.jobs = 1
    try:
        args.func(args, cfg)
    except (ValueError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
