"""1-X pooling convolutional network on multi-channel LTE images.

One convolutional layer slides P x F x w filters along time only, followed by
ReLU, a per-feature-map pooling (1-max, 1-mean or both concatenated as 1-mix)
and a softmax layer. Training minimizes mean cross-entropy plus an L2 penalty
on every parameter, with dropout and Adam.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import decode_bundle, encode_bundle

log = logging.getLogger(__name__)

POOLING_MODES = ("max", "mean", "mix")


@dataclass(frozen=True)
class CnnConfig:
    widths: tuple = (3, 5, 7)
    n_filters: int = 32  # Q, per width
    learning_rate: float = 1e-4
    dropout: float = 0.5
    dropout_target: str = "pooled"  # or "weights"
    lam: float = 1e-3
    epochs: int = 100
    minibatch: int = 50
    pooling: str = "mix"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError("filter widths must be >= 1")
        if self.n_filters < 1:
            raise ValueError("n_filters must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.dropout_target not in ("pooled", "weights"):
            raise ValueError("dropout_target must be 'pooled' or 'weights'")
        if self.minibatch < 1 or self.epochs < 0:
            raise ValueError("bad minibatch/epochs")

    def replace(self, **kw) -> "CnnConfig":
        d = asdict(self)
        d.update(kw)
        return CnnConfig(**d)


PRESETS = {
    "desk": CnnConfig(),
    "paper-scale": CnnConfig(n_filters=1000, epochs=500),
}


def feature_length(cfg: CnnConfig) -> int:
    qr = cfg.n_filters * len(cfg.widths)
    return 2 * qr if cfg.pooling == "mix" else qr


@dataclass
class CnnModel:
    filters: dict  # width -> (Q, P, F, w)
    biases: dict  # width -> (Q,)
    W: np.ndarray  # (feature_len, C)
    c: np.ndarray  # (C,)
    classes: list
    config: CnnConfig

    @property
    def pooling(self) -> str:
        return self.config.pooling

    @property
    def input_shape(self) -> tuple:
        w0 = self.config.widths[0]
        return self.filters[w0].shape[1:3]

    def params(self) -> dict:
        out = {}
        for w in self.config.widths:
            out[f"filter{w}"] = self.filters[w]
            out[f"bias{w}"] = self.biases[w]
        out["W"] = self.W
        out["c"] = self.c
        return out

    def set_params(self, params: dict) -> None:
        for w in self.config.widths:
            self.filters[w] = params[f"filter{w}"]
            self.biases[w] = params[f"bias{w}"]
        self.W = params["W"]
        self.c = params["c"]

    def copy(self) -> "CnnModel":
        return CnnModel(
            {w: f.copy() for w, f in self.filters.items()},
            {w: b.copy() for w, b in self.biases.items()},
            self.W.copy(), self.c.copy(), list(self.classes), self.config,
        )

    def to_bytes(self) -> bytes:
        meta = {"kind": "cnn-lte", "version": 1, "classes": self.classes, "config": asdict(self.config)}
        return encode_bundle(meta, self.params())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CnnModel":
        meta, arrays = decode_bundle(blob)
        if meta.get("kind") != "cnn-lte":
            raise ValueError("not a CNN model record")
        cfg = CnnConfig(**meta["config"])
        m = cls({}, {}, arrays["W"], arrays["c"], meta["classes"], cfg)
        m.set_params(arrays)
        return m


def init_model(P: int, F: int, classes, cfg: CnnConfig) -> CnnModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    filters, biases = {}, {}
    for w in cfg.widths:
        bound = 1.0 / np.sqrt(P * F * w)
        filters[w] = rng.uniform(-bound, bound, size=(cfg.n_filters, P, F, w))
        biases[w] = np.zeros(cfg.n_filters)
    L = feature_length(cfg)
    W = rng.uniform(-1.0 / np.sqrt(L), 1.0 / np.sqrt(L), size=(L, len(classes)))
    return CnnModel(filters, biases, W, np.zeros(len(classes)), list(classes), cfg)


def _windows(S: np.ndarray, w: int) -> np.ndarray:
    """(N, P, F, T) -> (N, T - w + 1, P * F * w) time windows."""
    N, P, F, T = S.shape
    win = sliding_window_view(S, w, axis=3)  # (N, P, F, L, w)
    return win.transpose(0, 3, 1, 2, 4).reshape(N, T - w + 1, P * F * w)


def conv_forward(S, filt, bias) -> tuple[np.ndarray, np.ndarray]:
    """Temporal convolution of one image with one filter.

    Returns ``(O, A)``: the raw responses ``o_i`` (length T - w + 1) and the
    ReLU feature map ``a_i = max(0, o_i + b)``.
    """
    S = np.asarray(S, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    if S.ndim != 3 or filt.ndim != 3 or S.shape[:2] != filt.shape[:2]:
        raise ValueError(f"shape mismatch: image {S.shape}, filter {filt.shape}")
    w = filt.shape[2]
    if w > S.shape[2]:
        raise ValueError("filter wider than the image")
    O = _windows(S[None], w)[0] @ filt.reshape(-1)
    return O, np.maximum(0.0, O + bias)


def pool(feature_maps, mode: str) -> np.ndarray:
    """Pool a list of 1-D feature maps; mix = all maxima followed by all means."""
    maps = [np.asarray(m, dtype=np.float64) for m in feature_maps]
    if not maps or any(m.size == 0 for m in maps):
        raise ValueError("cannot pool an empty feature map")
    mx = np.array([m.max() for m in maps])
    mn = np.array([m.mean() for m in maps])
    if mode == "max":
        return mx
    if mode == "mean":
        return mn
    if mode == "mix":
        return np.concatenate([mx, mn])
    raise ValueError(f"unknown pooling mode {mode!r}")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def l2_norm_sq(params) -> float:
    return float(sum(np.sum(np.asarray(p, dtype=np.float64) ** 2) for p in params))


def softmax_loss(pooled, W, c, targets, lam: float = 0.0, params=None):
    """Softmax probabilities and the regularized cross-entropy.

    ``params`` lists every network parameter for the L2 term (defaults to
    ``W`` and ``c``). Returns ``(y_hat, E)``.
    """
    pooled = np.atleast_2d(pooled)
    targets = np.atleast_2d(targets)
    logits = pooled @ W + c
    lsm = log_softmax(logits)
    ce = -float(np.sum(targets * lsm)) / len(pooled)
    reg = 0.5 * lam * l2_norm_sq([W, c] if params is None else params)
    return np.exp(lsm), ce + reg


@dataclass
class ForwardTrace:
    windows: dict
    pre: dict  # width -> (N, L, Q) values o_i + b
    argmax: dict  # width -> (N, Q)
    lengths: dict  # width -> L
    pooled: np.ndarray  # (N, feature_len), before dropout
    dropped: np.ndarray  # after dropout
    mask: np.ndarray | None
    w_mask: np.ndarray | None
    logits: np.ndarray
    y_hat: np.ndarray


def _as_batch(images) -> np.ndarray:
    S = np.asarray(images, dtype=np.float64)
    if S.ndim == 3:
        S = S[None]
    if S.ndim != 4:
        raise ValueError("images must be P x F x T or N x P x F x T")
    return S


def forward(model: CnnModel, images, train: bool = False, rng=None) -> ForwardTrace:
    cfg = model.config
    S = _as_batch(images)
    N, P, F, T = S.shape
    if (P, F) != tuple(model.input_shape):
        raise ValueError(f"image shape {(P, F)} does not match model input {tuple(model.input_shape)}")
    if T < max(cfg.widths):
        raise ValueError(f"image length T={T} shorter than the widest filter ({max(cfg.widths)})")
    windows, pre, argmax, lengths, maxes, means = {}, {}, {}, {}, [], []
    for w in cfg.widths:
        X = _windows(S, w)
        Z = X @ model.filters[w].reshape(cfg.n_filters, -1).T + model.biases[w]
        A = np.maximum(Z, 0.0)
        windows[w], pre[w], lengths[w] = X, Z, X.shape[1]
        argmax[w] = np.argmax(A, axis=1)
        maxes.append(np.take_along_axis(A, argmax[w][:, None, :], axis=1)[:, 0, :])
        means.append(A.mean(axis=1))
    if cfg.pooling == "max":
        pooled = np.concatenate(maxes, axis=1)
    elif cfg.pooling == "mean":
        pooled = np.concatenate(means, axis=1)
    else:
        pooled = np.concatenate(maxes + means, axis=1)

    mask = w_mask = None
    dropped = pooled
    W = model.W
    if train and cfg.dropout > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        if cfg.dropout_target == "pooled":
            mask = dropout_mask(pooled.shape, cfg.dropout, rng)
            dropped = pooled * mask
        else:
            w_mask = dropout_mask(W.shape, cfg.dropout, rng)
            W = W * w_mask
    logits = dropped @ W + model.c
    return ForwardTrace(windows, pre, argmax, lengths, pooled, dropped, mask, w_mask, logits, softmax(logits))


def loss(model: CnnModel, trace: ForwardTrace, targets) -> float:
    targets = np.atleast_2d(targets)
    ce = -float(np.sum(targets * log_softmax(trace.logits))) / len(targets)
    return ce + 0.5 * model.config.lam * l2_norm_sq(model.params().values())


def backward(model: CnnModel, trace: ForwardTrace, targets) -> dict:
    """Exact gradients of the regularized loss for the traced minibatch."""
    cfg = model.config
    lam = cfg.lam
    targets = np.atleast_2d(targets)
    N = len(targets)
    d_logits = (trace.y_hat - targets) / N
    W_eff = model.W if trace.w_mask is None else model.W * trace.w_mask
    grads = {}
    dW = trace.dropped.T @ d_logits
    if trace.w_mask is not None:
        dW = dW * trace.w_mask
    grads["W"] = dW + lam * model.W
    grads["c"] = d_logits.sum(axis=0) + lam * model.c
    d_pooled = d_logits @ W_eff.T
    if trace.mask is not None:
        d_pooled = d_pooled * trace.mask

    Q = cfg.n_filters
    R = len(cfg.widths)
    for r, w in enumerate(cfg.widths):
        Z = trace.pre[w]
        L = trace.lengths[w]
        dA = np.zeros_like(Z)
        if cfg.pooling in ("max", "mix"):
            g = d_pooled[:, r * Q : (r + 1) * Q]
            np.put_along_axis(dA, trace.argmax[w][:, None, :], g[:, None, :], axis=1)
        if cfg.pooling in ("mean", "mix"):
            off = R * Q if cfg.pooling == "mix" else 0
            g = d_pooled[:, off + r * Q : off + (r + 1) * Q]
            dA += g[:, None, :] / L
        dZ = dA * (Z > 0)
        dF = np.einsum("nlk,nlq->qk", trace.windows[w], dZ)
        grads[f"filter{w}"] = dF.reshape(model.filters[w].shape) + lam * model.filters[w]
        grads[f"bias{w}"] = dZ.sum(axis=(0, 1)) + lam * model.biases[w]
    return grads


def dropout_mask(shape, rate: float, rng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1 / (1 - rate)``."""
    if rate <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(values, rate: float, rng=None, train: bool = True) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not train or rate == 0:
        return values
    return values * dropout_mask(values.shape, rate, rng)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays."""
    state.t += 1
    t = state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def one_hot(labels, classes) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    Y = np.zeros((len(labels), len(classes)))
    Y[np.arange(len(labels)), [idx[c] for c in labels]] = 1.0
    return Y


def train_cnn(images, labels, cfg: CnnConfig = CnnConfig(), classes=None, callback=None):
    """Train on an (N, P, F, T) image array; returns ``(model, epoch_losses)``.

    The per-epoch loss is the mean minibatch objective seen during the
    epoch (dropout active).
    """
    S = _as_batch(images)
    labels = list(labels)
    classes = sorted(set(labels), key=str) if classes is None else list(classes)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    if max(cfg.widths) > S.shape[3]:
        raise ValueError("filter wider than the images")
    model = init_model(S.shape[1], S.shape[2], classes, cfg)
    Y = one_hot(labels, classes)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    state = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(S))
        losses = []
        for b, start in enumerate(range(0, len(S), cfg.minibatch)):
            batch = order[start : start + cfg.minibatch]
            trace = forward(model, S[batch], train=True, rng=rng)
            E = loss(model, trace, Y[batch])
            if not np.isfinite(E):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            losses.append(E)
            grads = backward(model, trace, Y[batch])
            model.set_params(adam_step(model.params(), grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps))
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, history[-1], model)
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return model, history


def predict_proba(model: CnnModel, images) -> np.ndarray:
    return forward(model, images, train=False).y_hat


def predict_cnn(model: CnnModel, image):
    """(label, class distribution) for one P x F x T image, dropout off."""
    p = predict_proba(model, image)[0]
    return model.classes[int(np.argmax(p))], p


def pooled_features(model: CnnModel, images) -> np.ndarray:
    return forward(model, images, train=False).pooled
