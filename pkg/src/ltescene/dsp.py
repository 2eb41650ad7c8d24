"""Low-level audio features, segment pooling and spectral-subtraction denoising.

Three frame-level feature families are computed on a 50 ms / 25 ms grid:

* ``GTCC``  - 64 gammatone cepstral coefficients (log energies of a 64-band
  ERB-spaced gammatone-shaped filterbank over 20-22050 Hz, orthonormal DCT-II)
* ``MFCC``  - 20 static MFCCs (40 mel bands, 0th coefficient kept) plus delta
  and acceleration, 60 in total
* ``LOGFB`` - 20 log-frequency band energies with first and second
  derivatives, zero-crossing rate, short-time energy, four sub-band energy
  ratios, spectral centroid and bandwidth (68 values)

Segments are 500 ms long with a 250 ms hop; each segment column is the mean of
its constituent frame vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct, rfft
from scipy.ndimage import minimum_filter1d
from scipy.signal import istft, lfilter, stft

FAMILIES = ("GTCC", "MFCC", "LOGFB")
FEATURE_DIMS = {"GTCC": 64, "MFCC": 60, "LOGFB": 68}

LOG_FLOOR = 1e-10
FRAME_LEN = 0.050
FRAME_HOP = 0.025
SEGMENT_LEN = 0.500
SEGMENT_HOP = 0.250

GTCC_BANDS = 64
GTCC_FMIN = 20.0
GTCC_FMAX = 22050.0
MEL_BANDS = 40
N_MFCC = 20
DELTA_WIDTH = 4  # +-4 frames, i.e. a 9-frame window
LOGFB_BANDS = 20
LOGFB_FMIN = 20.0


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("AudioSignal expects mono samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioSignal samples must be finite")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameGrid:
    frame_len: float = FRAME_LEN
    hop: float = FRAME_HOP
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("need 0 < hop <= frame_len")
        if self.window not in ("hamming", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")


@dataclass(frozen=True)
class SegmentMatrix:
    """M x T segment features for one recording and one feature family."""

    values: np.ndarray
    feature_family: str
    denoised: bool = False

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def channel(self) -> str:
        return channel_name(self.feature_family, self.denoised)


@dataclass(frozen=True)
class DenoiseConfig:
    fft_len: int = 2048
    min_window: float = 1.5
    bias_comp: float = 1.5
    floor_beta: float = 0.01
    smoothing: float = 0.97

    def __post_init__(self):
        if self.fft_len < 2 or self.fft_len & (self.fft_len - 1):
            raise ValueError("fft_len must be a power of two")
        if self.min_window < 0.5:
            raise ValueError("min_window must be >= 0.5 s")
        if self.bias_comp < 1:
            raise ValueError("bias_comp must be >= 1")
        if not 0 < self.floor_beta < 1:
            raise ValueError("floor_beta must lie in (0, 1)")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")


def channel_name(family: str, denoised: bool) -> str:
    return f"{family}-{'denoised' if denoised else 'raw'}"


def _frame_params(grid: FrameGrid, sample_rate: int) -> tuple[int, float]:
    return int(round(grid.frame_len * sample_rate)), grid.hop * sample_rate


def n_frames(n_samples: int, grid: FrameGrid, sample_rate: int) -> int:
    length, hop = _frame_params(grid, sample_rate)
    if n_samples < length:
        return 0
    count = int(np.floor((n_samples - length) / hop + 1e-9)) + 1
    while count > 0 and _frame_start(count - 1, hop) + length > n_samples:
        count -= 1
    return count


def _frame_start(i, hop):
    return np.floor(np.asarray(i) * hop + 0.5).astype(np.int64)


def frame_signal(signal: AudioSignal, grid: FrameGrid = FrameGrid()) -> np.ndarray:
    """Cut the signal into windowed frames, shape (n_frames, frame_samples).

    Frame ``i`` starts at ``i * hop``; only frames lying fully inside the
    signal are produced.
    """
    length, hop = _frame_params(grid, signal.sample_rate)
    count = n_frames(len(signal.samples), grid, signal.sample_rate)
    if count == 0:
        raise ValueError("signal too short: shorter than one frame")
    starts = _frame_start(np.arange(count), hop)
    frames = signal.samples[starts[:, None] + np.arange(length)[None, :]]
    if grid.window == "hamming":
        frames = frames * np.hamming(length)
    return frames


def segment_count(n_samples: int, sample_rate: int) -> int:
    """Number of 500 ms segments at a 250 ms hop.

    A segment ending flush with the last sample is dropped unless it is the
    only one, so 30 s gives 118 and 0.5 s gives 1.
    """
    seg = int(round(SEGMENT_LEN * sample_rate))
    hop = int(round(SEGMENT_HOP * sample_rate))
    if n_samples < seg:
        return 0
    return max(1, -(-(n_samples - seg) // hop))


def _fft_len(frame_len: int) -> int:
    return 1 << int(np.ceil(np.log2(frame_len)))


def power_spectrum(frames: np.ndarray, nfft: int | None = None) -> np.ndarray:
    nfft = nfft or _fft_len(frames.shape[-1])
    return np.abs(rfft(frames, n=nfft, axis=-1)) ** 2 / nfft


# --- filterbanks -----------------------------------------------------------


def _erb(f):
    return 24.7 * (4.37e-3 * f + 1.0)


def erb_space(fmin: float, fmax: float, n: int) -> np.ndarray:
    """``n`` centre frequencies equally spaced on the ERB-rate scale."""
    lo = 21.4 * np.log10(4.37e-3 * fmin + 1.0)
    hi = 21.4 * np.log10(4.37e-3 * fmax + 1.0)
    return (10 ** (np.linspace(lo, hi, n) / 21.4) - 1.0) / 4.37e-3


@lru_cache(maxsize=16)
def gammatone_weights(sample_rate: int, nfft: int, n_bands: int = GTCC_BANDS,
                      fmin: float = GTCC_FMIN, fmax: float = GTCC_FMAX) -> np.ndarray:
    """FFT-domain weights approximating a 4th-order gammatone filterbank.

    Each row is the power response ``(1 + ((f - fc) / b)^2)^-4`` with
    ``b = 1.019 * ERB(fc)``, sampled on the rfft bin grid.
    """
    fmax = min(fmax, sample_rate / 2.0)
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fc = erb_space(fmin, fmax, n_bands)
    b = 1.019 * _erb(fc)
    w = (1.0 + ((freqs[None, :] - fc[:, None]) / b[:, None]) ** 2) ** -4.0
    w.setflags(write=False)
    return w


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangles(edges_hz: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, nfft: int, n_bands: int = MEL_BANDS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters with unit peak, shape (n_bands, nfft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fb = _triangles(edges, freqs)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def logfreq_filterbank(sample_rate: int, nfft: int, n_bands: int = LOGFB_BANDS,
                       fmin: float = LOGFB_FMIN) -> np.ndarray:
    """Triangular filters with log-spaced edges between ``fmin`` and Nyquist."""
    edges = np.geomspace(fmin, sample_rate / 2.0, n_bands + 2)
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fb = _triangles(edges, freqs)
    # low bands can be narrower than one bin; fall back to the nearest bin
    for i in range(n_bands):
        if not fb[i].any():
            fb[i, int(np.argmin(np.abs(freqs - edges[i + 1])))] = 1.0
    fb.setflags(write=False)
    return fb


def _log(x):
    return np.log(np.maximum(x, LOG_FLOOR))


# --- frame-level features ----------------------------------------------------


def gtcc_frames(frames: np.ndarray, sample_rate: int) -> np.ndarray:
    """64 gammatone cepstral coefficients per frame, shape (n, 64)."""
    frames = np.atleast_2d(frames)
    nfft = _fft_len(frames.shape[-1])
    bands = power_spectrum(frames, nfft) @ gammatone_weights(sample_rate, nfft).T
    return dct(_log(bands), type=2, norm="ortho", axis=-1)


def gtcc_frame(frame: np.ndarray, sample_rate: int = 44100) -> np.ndarray:
    return gtcc_frames(frame, sample_rate)[0]


def mfcc_frames(frames: np.ndarray, sample_rate: int) -> np.ndarray:
    """20 static MFCCs per frame (0th included), shape (n, 20)."""
    frames = np.atleast_2d(frames)
    nfft = _fft_len(frames.shape[-1])
    bands = power_spectrum(frames, nfft) @ mel_filterbank(sample_rate, nfft).T
    return dct(_log(bands), type=2, norm="ortho", axis=-1)[:, :N_MFCC]


def mfcc_frame(frame: np.ndarray, sample_rate: int = 44100) -> np.ndarray:
    return mfcc_frames(frame, sample_rate)[0]


def deltas(seq: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication.

    ``d_t = sum_n n (c_{t+n} - c_{t-n}) / (2 sum_n n^2)``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    n = len(seq)
    padded = np.concatenate([np.repeat(seq[:1], width, axis=0), seq, np.repeat(seq[-1:], width, axis=0)])
    denom = 2.0 * sum(k * k for k in range(1, width + 1))
    out = np.zeros_like(seq)
    for k in range(1, width + 1):
        out += k * (padded[width + k : width + k + n] - padded[width - k : width - k + n])
    return out / denom


def add_deltas(seq: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Static features followed by delta and acceleration: (n, d) -> (n, 3d)."""
    d1 = deltas(seq, width)
    return np.hstack([seq, d1, deltas(d1, width)])


def zero_crossing_rate(frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(frames)
    s = np.signbit(frames)
    return np.mean(s[:, 1:] != s[:, :-1], axis=1)


def short_time_energy(frames: np.ndarray) -> np.ndarray:
    return np.mean(np.atleast_2d(frames) ** 2, axis=1)


def spectral_shape(power: np.ndarray, sample_rate: int, nfft: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sub-band energy ratios (4 octave-like bands), centroid and bandwidth."""
    freqs = np.arange(power.shape[-1]) * sample_rate / nfft
    total = power.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    nyq = sample_rate / 2.0
    edges = [0.0, nyq / 8, nyq / 4, nyq / 2, nyq + 1.0]
    sub = np.stack(
        [power[:, (freqs >= lo) & (freqs < hi)].sum(axis=1) for lo, hi in zip(edges[:-1], edges[1:])],
        axis=1,
    ) / safe[:, None]
    centroid = (power @ freqs) / safe
    spread = (power * (freqs[None, :] - centroid[:, None]) ** 2).sum(axis=1) / safe
    bandwidth = np.sqrt(np.maximum(spread, 0.0))
    zero = total <= 0
    sub[zero] = 0.0
    centroid[zero] = 0.0
    bandwidth[zero] = 0.0
    return sub, centroid, bandwidth


def logfb_frame_set(frames: np.ndarray, sample_rate: int = 44100, raw_frames: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Composite LOGFB vectors for a frame sequence, shape (n, 68).

    ``raw_frames`` (unwindowed) feed the zero-crossing rate and energy; when
    omitted the windowed frames are used. Returns the matrix and metadata
    naming each column block.
    """
    frames = np.atleast_2d(frames)
    raw = frames if raw_frames is None else np.atleast_2d(raw_frames)
    nfft = _fft_len(frames.shape[-1])
    power = power_spectrum(frames, nfft)
    logfb = _log(power @ logfreq_filterbank(sample_rate, nfft).T)
    sub, centroid, bandwidth = spectral_shape(power, sample_rate, nfft)
    feats = np.hstack(
        [
            add_deltas(logfb),
            zero_crossing_rate(raw)[:, None],
            short_time_energy(raw)[:, None],
            sub,
            centroid[:, None],
            bandwidth[:, None],
        ]
    )
    meta = {
        "dim": feats.shape[1],
        "blocks": {
            "logfb": [0, 20], "delta": [20, 40], "accel": [40, 60], "zcr": [60, 61],
            "energy": [61, 62], "subband": [62, 66], "centroid": [66, 67], "bandwidth": [67, 68],
        },
    }
    return feats, meta


def frame_features(signal: AudioSignal, family: str, grid: FrameGrid = FrameGrid()) -> np.ndarray:
    """Frame-level feature matrix (n_frames, M) for one family."""
    if family not in FAMILIES:
        raise ValueError(f"unknown feature family {family!r}")
    frames = frame_signal(signal, grid)
    sr = signal.sample_rate
    if family == "GTCC":
        return gtcc_frames(frames, sr)
    if family == "MFCC":
        return add_deltas(mfcc_frames(frames, sr))
    raw = frame_signal(signal, FrameGrid(grid.frame_len, grid.hop, "rectangular"))
    return logfb_frame_set(frames, sr, raw)[0]


def _frames_per_segment(grid: FrameGrid) -> tuple[int, int]:
    per_seg = int(round((SEGMENT_LEN - grid.frame_len) / grid.hop)) + 1
    step = int(round(SEGMENT_HOP / grid.hop))
    return per_seg, step


def pool_segments(frame_feats: np.ndarray, n_segments: int, grid: FrameGrid = FrameGrid()) -> np.ndarray:
    """Average frame vectors into segment columns, returning (M, T)."""
    per_seg, step = _frames_per_segment(grid)
    csum = np.vstack([np.zeros((1, frame_feats.shape[1])), np.cumsum(frame_feats, axis=0)])
    starts = np.arange(n_segments) * step
    return ((csum[starts + per_seg] - csum[starts]) / per_seg).T


def segment_features(signal: AudioSignal, family: str, grid: FrameGrid = FrameGrid(),
                     denoised: bool = False) -> SegmentMatrix:
    """Segment-level features: 500 ms segments, 250 ms hop, T from ``segment_count``."""
    T = segment_count(len(signal.samples), signal.sample_rate)
    if T < 1:
        raise ValueError("signal too short: need at least 0.5 s")
    feats = frame_features(signal, family, grid)
    per_seg, step = _frames_per_segment(grid)
    if (T - 1) * step + per_seg > len(feats):
        raise ValueError("frame grid does not cover the segment grid")
    values = pool_segments(feats, T, grid)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite segment features")
    return SegmentMatrix(values, family, denoised)


def bad_segments(samples: np.ndarray, sample_rate: int, clip_level: float = 0.999) -> np.ndarray:
    """Indices of segments containing clipped or non-finite samples."""
    x = np.asarray(samples, dtype=np.float64)
    T = segment_count(len(x), sample_rate)
    bad = ~np.isfinite(x) | (np.abs(np.nan_to_num(x)) >= clip_level)
    if T == 0:
        return np.zeros(0, dtype=int)
    seg = int(round(SEGMENT_LEN * sample_rate))
    hop = int(round(SEGMENT_HOP * sample_rate))
    csum = np.concatenate([[0], np.cumsum(bad)])
    starts = np.arange(T) * hop
    return np.flatnonzero(csum[starts + seg] - csum[starts] > 0)


# --- denoising --------------------------------------------------------------


def _recursive_smooth(power: np.ndarray, alpha: float) -> np.ndarray:
    """First-order recursive smoothing along time (last axis)."""
    if alpha == 0:
        return power
    lead = power[:, : max(1, int(round(1.0 / (1.0 - alpha))))].mean(axis=1, keepdims=True)
    zi = alpha * lead
    out, _ = lfilter([1.0 - alpha], [1.0, -alpha], power, axis=-1, zi=zi)
    return out


def noise_floor(power: np.ndarray, frames_per_window: int, bias_comp: float, alpha: float) -> np.ndarray:
    """Per-bin noise power: bias-compensated sliding minimum of the smoothed periodogram."""
    smooth = _recursive_smooth(power, alpha)
    return bias_comp * minimum_filter1d(smooth, size=max(1, frames_per_window), axis=-1, mode="nearest")


def spectral_subtract(signal: AudioSignal, cfg: DenoiseConfig = DenoiseConfig()) -> AudioSignal:
    """Remove a slowly varying noise floor by STFT magnitude subtraction.

    Output magnitude is ``max(|X| - N, beta * |X|)`` with ``N`` the square
    root of the estimated noise power; phase is kept and the signal is
    resynthesised by overlap-add to the input length.
    """
    x = signal.samples
    sr = signal.sample_rate
    if len(x) < cfg.min_window * sr:
        raise ValueError("signal shorter than the noise-tracking window")
    if not np.any(x):
        return AudioSignal(np.zeros_like(x), sr)
    hop = cfg.fft_len // 2
    _, _, X = stft(x, fs=sr, window="hann", nperseg=cfg.fft_len, noverlap=cfg.fft_len - hop)
    mag = np.abs(X)
    span = int(round(cfg.min_window * sr / hop))
    noise = np.sqrt(noise_floor(mag**2, span, cfg.bias_comp, cfg.smoothing))
    gain_mag = np.maximum(mag - noise, cfg.floor_beta * mag)
    Y = X * np.divide(gain_mag, mag, out=np.zeros_like(mag), where=mag > 0)
    _, y = istft(Y, fs=sr, window="hann", nperseg=cfg.fft_len, noverlap=cfg.fft_len - hop)
    y = y[: len(x)]
    if len(y) < len(x):
        y = np.pad(y, (0, len(x) - len(y)))
    return AudioSignal(np.ascontiguousarray(y), sr)
