"""Synthetic acoustic-scene corpus for desk-scale experiments.

Classes come in pairs. Both members of a pair share a background texture
(band-limited noise around a pair-specific centre frequency plus a slowly
modulated low rumble); they differ only in their foreground events, short
tone bursts or chirps at class-specific frequencies dropped at random times.
Segments without events are therefore ambiguous within a pair, which gives
the learned label tree a non-trivial structure.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .io import write_wav

SAMPLE_RATE = 44100
MANIFEST_NAME = "manifest.csv"


def class_names(n_classes: int) -> list[str]:
    return [f"bg{c // 2}-ev{c % 2}" for c in range(n_classes)]


def _recipe(n_classes: int):
    n_pairs = (n_classes + 1) // 2
    bg_centres = np.geomspace(250.0, 6000.0, n_pairs)
    rumble_rates = np.linspace(0.3, 2.0, n_pairs)
    ev_freqs = np.geomspace(600.0, 9000.0, n_classes)
    # interleave so that paired classes get well separated event frequencies
    order = np.concatenate([np.arange(0, n_classes, 2), np.arange(1, n_classes, 2)])
    ev = np.empty(n_classes)
    ev[order] = ev_freqs
    return bg_centres, rumble_rates, ev


def _band_noise(rng, n, sr, centre, width_oct):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    with np.errstate(divide="ignore"):
        octs = np.log2(np.where(f > 0, f, 1e-3) / centre)
    spec *= np.exp(-0.5 * (octs / width_oct) ** 2)
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def render_scene(label_index: int, n_classes: int, duration: float, rng, sr: int = SAMPLE_RATE) -> np.ndarray:
    """One recording of class ``label_index``."""
    bg_centres, rumble_rates, ev_freqs = _recipe(n_classes)
    pair = label_index // 2
    n = int(round(duration * sr))
    t = np.arange(n) / sr

    centre = bg_centres[pair] * rng.uniform(0.9, 1.1)
    bg = _band_noise(rng, n, sr, centre, 0.6)
    rumble = _band_noise(rng, n, sr, 80.0, 0.5)
    rumble *= 0.6 + 0.4 * np.sin(2 * np.pi * rumble_rates[pair] * t + rng.uniform(0, 2 * np.pi))
    x = 0.05 * bg * 10 ** (rng.uniform(-3, 3) / 20) + 0.03 * rumble

    chirp = label_index % 2 == 1
    f0 = ev_freqs[label_index]
    n_events = rng.integers(4, 9)
    for _ in range(n_events):
        dur = rng.uniform(0.15, 0.35)
        m = int(dur * sr)
        start = rng.integers(0, n - m)
        tt = np.arange(m) / sr
        env = np.hanning(m)
        if chirp:
            phase = 2 * np.pi * (f0 * tt + 0.5 * (0.5 * f0 / dur) * tt**2)
        else:
            phase = 2 * np.pi * f0 * tt
        x[start : start + m] += 0.12 * rng.uniform(0.7, 1.3) * env * np.sin(phase)
    peak = np.max(np.abs(x))
    return x * (0.5 / peak) if peak > 0.5 else x


def synth_corpus(out_dir, n_classes: int = 6, n_per_class: int = 20, duration: float = 10.0,
                 seed: int = 42, n_folds: int = 4, sr: int = SAMPLE_RATE) -> Path:
    """Write WAV files and ``manifest.csv`` (id,path,label,fold); returns the manifest path."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    names = class_names(n_classes)
    rows = []
    for c, name in enumerate(names):
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i]))
            rec = f"{name}_{i:03d}"
            rel = f"audio/{rec}.wav"
            write_wav(out / rel, render_scene(c, n_classes, duration, rng, sr), sr)
            rows.append((rec, rel, name, i % n_folds + 1))
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "label", "fold"])
        w.writerows(rows)
    return manifest
