import csv
import json

import numpy as np
import pytest

from ltescene import cli
from ltescene.cnn import CnnConfig
from ltescene.embed import segment_samples
from ltescene.forest import ForestConfig
from ltescene.io import read_wav
from ltescene.labeltree import confusion_matrix
from ltescene.pipeline import (
    EvaluationReport,
    ExperimentConfig,
    FoldError,
    ManifestError,
    compute_features,
    evaluate,
    format_table,
    ingest_dataset,
    load_config,
    load_report,
    preset,
    recording_features,
    run_experiments,
    save_report,
    substream,
)
from ltescene.synth import class_names, synth_corpus


def write_manifest(tmp_path, rows, header=("id", "path", "label", "fold"), touch=True):
    p = tmp_path / "m.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    if touch:
        for r in rows:
            (tmp_path / r[1]).write_bytes(b"")
    return p


# --- manifests ---------------------------------------------------------------------------


def test_manifest_reads_and_sorts(tmp_path):
    p = write_manifest(tmp_path, [("b", "b.wav", "park", 2), ("a", "a.wav", "bus", 1)])
    m = ingest_dataset(p)
    assert m.classes == ["bus", "park"] and m.folds == [1, 2]
    assert m.ids(exclude_folds=[1]) == ["b"]
    assert m.by_id()["a"].path == tmp_path / "a.wav"


def test_manifest_problems_are_collected(tmp_path):
    rows = [("a", "a.wav", "x", 1), ("a", "a.wav", "x", 1), ("c", "missing.wav", "x", 1), ("d", "a.wav", "x", "one")]
    p = write_manifest(tmp_path, rows[:2] + [("d", "a.wav", "x", "one")])
    with open(p, "a", newline="") as fh:
        csv.writer(fh).writerow(("c", "missing.wav", "x", 1))
    with pytest.raises(ManifestError) as info:
        ingest_dataset(p)
    text = " | ".join(info.value.problems)
    assert "duplicate id 'a'" in text and "unreadable file" in text and "unknown fold" in text


def test_manifest_missing_column_and_empty(tmp_path):
    p = write_manifest(tmp_path, [("a", "a.wav", "x")], header=("id", "path", "label"))
    with pytest.raises(ManifestError, match="missing columns"):
        ingest_dataset(p)
    p = write_manifest(tmp_path, [])
    with pytest.raises(ManifestError, match="empty manifest"):
        ingest_dataset(p)


def test_manifest_folds_contiguous(tmp_path):
    p = write_manifest(tmp_path, [("a", "a.wav", "x", 1), ("b", "b.wav", "y", 3)])
    with pytest.raises(ManifestError, match="contiguous"):
        ingest_dataset(p)


def test_manifest_exclude_column(tmp_path):
    p = write_manifest(tmp_path, [("a", "a.wav", "x", 1, "3;7")], header=("id", "path", "label", "fold", "exclude"))
    assert ingest_dataset(p).entries[0].exclude == (3, 7)


# --- evaluation ------------------------------------------------------------------------------


def test_evaluate_example():
    rep = evaluate(["a", "a", "b", "b"], ["a", "b", "b", "b"])
    assert rep.per_class == {"a": 100.0, "b": pytest.approx(200 / 3)}
    assert rep.overall == 75.0
    np.testing.assert_array_equal(rep.confusion, [[1, 0], [1, 2]])
    rep.check()


def test_perfect_classifier_scores_100():
    truth = list("abcabc")
    rep = evaluate(truth, truth)
    assert rep.overall == 100.0 and all(v == 100.0 for v in rep.per_class.values())


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError, match="differ in length"):
        evaluate(["a"], ["a", "b"])


def test_report_check_catches_inconsistency():
    rep = evaluate(["a", "b"], ["a", "a"])
    rep.overall = 90.0
    with pytest.raises(AssertionError):
        rep.check()


def test_report_round_trip_csv_and_text(tmp_path):
    rep = evaluate(["a", "b", "b"], ["a", "b", "a"])
    rep.system = "LTE+"
    save_report(rep, tmp_path / "r.json")
    again = load_report(tmp_path / "r.json")
    assert again.overall == rep.overall and again.system == "LTE+"
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["category", "LTE+"] and rows[-1] == ["Overall", "66.7"]
    assert "Overall" in rep.to_text()
    other = evaluate(["a", "a", "a"], ["a", "b", "a"])
    other.system = "cnn-mix"
    table = format_table([rep, other])
    assert "LTE+" in table and "cnn-mix" in table


# --- configuration ---------------------------------------------------------------------------


def test_presets():
    desk, big = preset("desk"), preset("paper-scale")
    assert desk.cnn.n_filters == 32 and desk.cnn.widths == (3, 5, 7) and desk.cnn.epochs == 100
    assert big.cnn.n_filters == 1000 and big.cnn.epochs == 500 and big.forest.n_trees == 200
    with pytest.raises(ValueError):
        preset("huge")


def test_yaml_config_merges_over_preset(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("preset: desk\nseed: 3\ncnn:\n  epochs: 7\n")
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.cnn.epochs == 7 and cfg.cnn.n_filters == 32
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    p.write_text("nonsense: 1\n")
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(p)


def test_substreams_differ_by_name():
    assert substream(1, "tree", 1) == substream(1, "tree", 1)
    assert len({substream(1, "tree", f) for f in range(10)}) == 10
    assert substream(1, "tree", 1) != substream(2, "tree", 1)


# --- synthetic corpus --------------------------------------------------------------------------


def test_synth_is_deterministic(tmp_path):
    a = synth_corpus(tmp_path / "a", 2, 2, 1.0, seed=3)
    b = synth_corpus(tmp_path / "b", 2, 2, 1.0, seed=3)
    for e in ingest_dataset(a).entries:
        assert (tmp_path / "a" / "audio" / f"{e.id}.wav").read_bytes() == (tmp_path / "b" / "audio" / f"{e.id}.wav").read_bytes()
    assert a.read_text() == b.read_text()


def test_synth_layout(tmp_path):
    m = ingest_dataset(synth_corpus(tmp_path, 6, 20, 0.6, seed=42))
    assert len(m.entries) == 120 and m.folds == [1, 2, 3, 4]
    assert m.classes == sorted(class_names(6))
    x, sr = read_wav(m.entries[0].path)
    assert sr == 44100 and len(x) == round(0.6 * 44100) and np.max(np.abs(x)) <= 0.5 + 1e-4


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    m = ingest_dataset(synth_corpus(root, 4, 6, 3.0, seed=42, n_folds=2))
    return m, compute_features(m)


def test_paired_classes_most_confused(tmp_path):
    m = ingest_dataset(synth_corpus(tmp_path, 6, 4, 3.0, seed=42))
    feats = compute_features(m, None)
    X, y, _ = segment_samples(feats["GTCC-raw"], m.labels())
    cm = confusion_matrix(X, y, ForestConfig(n_trees=30), seed=0)
    off = cm.A - np.diag(np.diag(cm.A))
    for i, c in enumerate(cm.labels):
        partner = c[:-1] + str(1 - int(c[-1]))
        assert cm.labels[int(np.argmax(off[i]))] == partner


def test_features_cover_six_channels(corpus):
    m, feats = corpus
    assert sorted(feats) == sorted(["GTCC-raw", "MFCC-raw", "LOGFB-raw", "GTCC-denoised", "MFCC-denoised", "LOGFB-denoised"])
    seg = feats["MFCC-raw"][m.entries[0].id]
    assert seg.values.shape == (60, 10) and seg.feature_family == "MFCC"


def test_excluded_segments_dropped_in_every_channel():
    x = 0.1 * np.random.default_rng(0).normal(size=3 * 44100)
    full = recording_features(x, 44100, families=("GTCC",))
    cut = recording_features(x, 44100, families=("GTCC",), exclude=(1,))
    assert full["GTCC-raw"].T == cut["GTCC-raw"].T + 1
    np.testing.assert_array_equal(cut["GTCC-raw"].values[:, 1], full["GTCC-raw"].values[:, 2])


def tiny_config(**kw):
    cnn = CnnConfig(widths=(2, 3), n_filters=2, epochs=3, minibatch=8, learning_rate=1e-3)
    base = dict(forest=ForestConfig(n_trees=5), crossval_k=3, svm_cv_k=3, cnn=cnn, target_T=10)
    base.update(kw)
    return ExperimentConfig(**base)


def test_end_to_end_with_checkpoints(corpus, tmp_path):
    m, feats = corpus
    cfg = tiny_config()
    reps = run_experiments(m, ["LTE2", "cnn-mix"], cfg, tmp_path, features=feats)
    for s, rep in reps.items():
        assert len(rep.predictions) == len(m.entries) and [f["fold"] for f in rep.per_fold] == [1, 2]
        rep.check()
    assert (tmp_path / "fold1" / "cnn-mix-loss.csv").is_file()
    trees = sorted(p.name for p in (tmp_path / "fold1" / "trees").iterdir())
    assert len(trees) == 6
    # resumed run reads checkpoints; a fresh run with the same seed agrees
    again = run_experiments(m, ["LTE2", "cnn-mix"], cfg, tmp_path, features=feats)
    fresh = run_experiments(m, ["LTE2", "cnn-mix"], cfg, None, features=feats)
    for s in reps:
        assert again[s].predictions == reps[s].predictions == fresh[s].predictions


def test_checkpoint_is_used(corpus, tmp_path):
    m, feats = corpus
    cfg = tiny_config()
    run_experiments(m, ["LTE1"], cfg, tmp_path, features=feats, folds=[1])
    ck = tmp_path / "fold1" / "LTE1.json"
    doc = json.loads(ck.read_text())
    test_ids = m.ids(folds=[1])
    doc["predictions"] = {r: m.classes[0] for r in test_ids}
    ck.write_text(json.dumps(doc))
    rep = run_experiments(m, ["LTE1"], cfg, tmp_path, features=feats, folds=[1])["LTE1"]
    assert set(rep.predictions.values()) == {m.classes[0]}


def test_fold_images_isolated(corpus, tmp_path):
    m, feats = corpus
    run_experiments(m, ["LTE3"], tiny_config(), tmp_path, features=feats)
    from ltescene.pipeline import load_image

    for fold in m.folds:
        test = set(m.ids(folds=[fold]))
        base = tmp_path / f"fold{fold}" / "images" / "LOGFB-raw"
        for split in ("train", "test"):
            for p in (base / split).iterdir():
                img = load_image(p)
                seen = set(img.provenance["model_trained_on"])
                assert img.recording_id not in seen and not seen & test


def test_stage_failure_names_fold_and_system(corpus):
    m, feats = corpus
    broken = {ch: dict(d) for ch, d in feats.items()}
    rid = m.ids(folds=[2])[0]
    bad = broken["GTCC-raw"][rid]
    broken["GTCC-raw"][rid] = type(bad)(bad.values[:5], bad.feature_family, bad.denoised)
    with pytest.raises(FoldError, match="fold 1, system LTE1"):
        run_experiments(m, ["LTE1"], tiny_config(), None, features=broken)


def test_unknown_system_rejected(corpus):
    m, feats = corpus
    with pytest.raises(ValueError, match="unknown system"):
        run_experiments(m, ["LTE9"], tiny_config(), None, features=feats)


# --- command line -----------------------------------------------------------------------------


def test_cli_round_trip(tmp_path, capsys):
    corpus_dir = tmp_path / "c"
    assert cli.main(["--seed", "1", "synth", "--out", str(corpus_dir), "--classes", "2", "--per-class", "2",
                     "--duration", "1", "--folds", "2"]) == 0
    manifest = corpus_dir / "manifest.csv"
    assert cli.main(["features", str(manifest), "--out", str(tmp_path / "f"), "--no-denoise"]) == 0
    assert "GTCC-raw: 4 recordings" in capsys.readouterr().out
    preds = tmp_path / "p.csv"
    m = ingest_dataset(manifest)
    preds.write_text("id,prediction\n" + "".join(f"{e.id},{e.label}\n" for e in m.entries))
    assert cli.main(["eval", str(manifest), str(preds), "--out", str(tmp_path / "r.json")]) == 0
    assert cli.main(["report", str(tmp_path / "r.json"), "--csv", str(tmp_path / "t.csv")]) == 0
    out = capsys.readouterr().out
    assert "100.0" in out and (tmp_path / "t.csv").is_file()


def test_cli_errors_exit_2(tmp_path, capsys):
    bad = write_manifest(tmp_path, [("a", "nope.wav", "x", 1)], touch=False)
    assert cli.main(["features", str(bad), "--out", str(tmp_path / "f")]) == 2
    assert "unreadable file" in capsys.readouterr().err


def test_shipped_configs_and_template():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(root / "desk.yaml") == preset("desk")
    big = load_config(root / "paper-scale.yaml")
    assert big.cnn.n_filters == 1000 and big.cnn.epochs == 500
    m = ingest_dataset(root / "dcase2016_manifest_template.csv", check_files=False)
    assert m.folds == [1, 2, 3] and m.by_id()["b020_150_180"].exclude == (17, 18)
