"""Chi-square fusion kernel and a one-vs-one SMO support vector machine.

The kernel between two scene instances combines any number of embedding
channels::

    K(x_i, x_j) = exp(-sum_k D(Psi^k(x_i), Psi^k(x_j)) / Dbar^k)

with ``D`` the chi-square distance and ``Dbar^k`` the mean training distance
of channel ``k``. Binary machines are solved on a precomputed Gram matrix
with second-order working-set selection (Fan, Chen and Lin, 2005).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .io import decode_bundle, encode_bundle

COST_GRID = tuple(2.0**e for e in range(-3, 8))
TAU = 1e-12


def chi2_distance(u, v) -> float:
    """``0.5 * sum (u - v)^2 / (u + v)``; terms with ``u + v = 0`` contribute 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("chi2_distance: vectors differ in length")
    if np.any(u < 0) or np.any(v < 0):
        raise ValueError("chi2_distance: negative entries")
    s = u + v
    d = (u - v) ** 2
    return 0.5 * float(np.sum(np.divide(d, s, out=np.zeros_like(s), where=s > 0)))


def chi2_distances(U, V=None, chunk: int = 128) -> np.ndarray:
    """Pairwise chi-square distances between rows of ``U`` and ``V``."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = U if V is None else np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[1] != V.shape[1]:
        raise ValueError("chi2_distances: dimension mismatch")
    if np.any(U < 0) or np.any(V < 0):
        raise ValueError("chi2_distances: negative entries")
    out = np.empty((len(U), len(V)))
    for a in range(0, len(U), chunk):
        u = U[a : a + chunk, None, :]
        s = u + V[None, :, :]
        d = (u - V[None, :, :]) ** 2
        out[a : a + chunk] = 0.5 * np.divide(d, s, out=np.zeros_like(s), where=s > 0).sum(axis=2)
    return out


def mean_train_distance(train_vectors) -> float:
    """Mean chi-square distance over all unordered training pairs ``i < j``."""
    X = np.asarray(train_vectors, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("need at least 2 training instances")
    D = chi2_distances(X)
    return float(D[np.triu_indices(len(X), k=1)].mean())


def fusion_kernel(channels_i, channels_j, means) -> float:
    """Kernel value for one pair; each argument is a per-channel sequence."""
    total = 0.0
    for u, v, m in zip(channels_i, channels_j, means, strict=True):
        if m <= 0:
            raise ValueError("mean channel distance must be positive")
        total += chi2_distance(u, v) / m
    return float(np.exp(-total))


def fusion_gram(channels_a, channels_b=None, means=None) -> np.ndarray:
    """Gram matrix between two instance sets, each a list of (n, F_k) arrays.

    ``means`` defaults to the mean training distances of ``channels_a``.
    """
    if means is None:
        means = [mean_train_distance(X) for X in channels_a]
    if channels_b is None:
        channels_b = channels_a
    total = 0.0
    for A, B, m in zip(channels_a, channels_b, means, strict=True):
        if m <= 0:
            raise ValueError("mean channel distance must be positive")
        total = total + chi2_distances(A, B) / m
    return np.exp(-total)


class ConvergenceError(RuntimeError):
    pass


@dataclass
class BinarySvm:
    """Decision ``f(x) = sum_s coef_s K(x_s, x) + bias``; ``f > 0`` -> positive class."""

    positive: object
    negative: object
    support: np.ndarray  # indices into the full training set
    coef: np.ndarray  # alpha_s * y_s
    bias: float
    iterations: int = 0
    dual_history: list = field(default_factory=list, repr=False)

    def decision(self, kernel_row) -> float:
        k = np.asarray(kernel_row, dtype=np.float64)
        return float(k[..., self.support] @ self.coef + self.bias)


def smo_solve(K, y, cost: float, tol: float = 1e-3, max_iter: int = 10**6, record: bool = False):
    """Solve the soft-margin SVM dual for labels ``y`` in {-1, +1}.

    Returns ``(alpha, bias, iterations, dual_history)``. Convergence means the
    maximal KKT violation ``m(alpha) - M(alpha)`` is below ``tol``.
    """
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if cost <= 0:
        raise ValueError("cost must be positive")
    Q = K * np.outer(y, y)
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    history = [0.0] if record else []
    it = 0
    while True:
        up = ((y > 0) & (alpha < cost)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < cost))
        score = -y * G
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        m_val = score[i]
        M_val = score[low].min()
        if m_val - M_val < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"SMO did not converge in {max_iter} iterations (violation {m_val - M_val:.3g})")
        cand = low & (score < m_val)
        b = m_val - score[cand]
        a = QD[i] + QD[cand] - 2.0 * y[i] * y[cand] * Q[i, cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        Qi, Qj = Q[i], Q[j]
        Ci = Cj = cost
        old_ai, old_aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Qi[j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > Ci - Cj:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = Ci - diff
            elif alpha[j] > Cj:
                alpha[j] = Cj
                alpha[i] = Cj + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Qi[j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > Ci:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = total - Ci
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > Cj:
                if alpha[j] > Cj:
                    alpha[j] = Cj
                    alpha[i] = total - Cj
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        G += Qi * (alpha[i] - old_ai) + Qj * (alpha[j] - old_aj)
        it += 1
        if record:
            history.append(float(-0.5 * alpha @ (G - 1.0)))

    free = (alpha > 0) & (alpha < cost)
    yG = y * G
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub = np.inf
        lb = -np.inf
        at_upper = alpha >= cost
        at_lower = alpha <= 0
        for t in range(n):
            if (at_upper[t] and y[t] < 0) or (at_lower[t] and y[t] > 0):
                ub = min(ub, yG[t])
            else:
                lb = max(lb, yG[t])
        rho = float((ub + lb) / 2.0) if np.isfinite(ub) and np.isfinite(lb) else 0.0
    return alpha, -rho, it, history


def train_binary_svm(K, y, cost, tol=1e-3, max_iter=10**6, indices=None, positive=1, negative=-1, record=False) -> BinarySvm:
    alpha, bias, it, hist = smo_solve(K, y, cost, tol, max_iter, record)
    idx = np.arange(len(y)) if indices is None else np.asarray(indices)
    sv = np.flatnonzero(alpha > 0)
    return BinarySvm(positive, negative, idx[sv], alpha[sv] * np.asarray(y, dtype=np.float64)[sv], bias, it, hist)


@dataclass
class SvmModel:
    classes: list
    machines: list  # BinarySvm per class pair (i < j), positive = classes[i]
    cost: float
    tol: float = 1e-3
    kernel: dict = field(default_factory=lambda: {"type": "chi2-fusion"})
    n_train: int = 0

    def decisions(self, kernel_row) -> np.ndarray:
        return np.array([m.decision(kernel_row) for m in self.machines])

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "svm-ovo",
            "version": 1,
            "classes": self.classes,
            "cost": self.cost,
            "tol": self.tol,
            "kernel": self.kernel,
            "n_train": self.n_train,
            "pairs": [[m.positive, m.negative, m.bias, m.iterations] for m in self.machines],
        }
        arrays = {}
        for k, m in enumerate(self.machines):
            arrays[f"support{k}"] = m.support.astype(np.int64)
            arrays[f"coef{k}"] = m.coef
        return encode_bundle(meta, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SvmModel":
        meta, arrays = decode_bundle(blob)
        if meta.get("kind") != "svm-ovo":
            raise ValueError("not an SVM record")
        machines = [
            BinarySvm(p, n, arrays[f"support{k}"], arrays[f"coef{k}"], b, it)
            for k, (p, n, b, it) in enumerate(meta["pairs"])
        ]
        return cls(meta["classes"], machines, meta["cost"], meta["tol"], meta["kernel"], meta["n_train"])


def _check_gram(gram):
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError("Gram matrix must be square")
    if not np.allclose(gram, gram.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Gram matrix is not symmetric")
    return gram


def train_ovo_svm(gram, labels, cost: float = 1.0, tol: float = 1e-3, max_iter: int = 10**6, record: bool = False) -> SvmModel:
    """One binary machine per class pair on a precomputed Gram matrix."""
    gram = _check_gram(gram)
    labels = list(labels)
    if len(labels) != gram.shape[0]:
        raise ValueError("labels do not match the Gram matrix")
    classes = sorted(set(labels), key=str)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    lab = np.array([classes.index(c) for c in labels])
    machines = []
    for a, b in combinations(range(len(classes)), 2):
        idx = np.flatnonzero((lab == a) | (lab == b))
        y = np.where(lab[idx] == a, 1.0, -1.0)
        machines.append(
            train_binary_svm(gram[np.ix_(idx, idx)], y, cost, tol, max_iter, idx, classes[a], classes[b], record)
        )
    return SvmModel(classes, machines, cost, tol, n_train=len(labels))


def predict_svm(model: SvmModel, kernel_row):
    """Majority vote; tied classes are separated by their summed signed margins."""
    dec = model.decisions(kernel_row)
    n = len(model.classes)
    votes = np.zeros(n)
    margin = np.zeros(n)
    for (a, b), f in zip(combinations(range(n), 2), dec):
        votes[a if f > 0 else b] += 1
        margin[a] += f
        margin[b] -= f
    top = np.flatnonzero(votes == votes.max())
    best = top[np.argmax(margin[top])]
    return model.classes[int(best)]


def predict_svm_batch(model: SvmModel, kernel_rows):
    return [predict_svm(model, row) for row in np.atleast_2d(kernel_rows)]


def select_cost(gram, labels, grid=COST_GRID, k: int = 10, seed: int = 0, tol: float = 1e-3):
    """Pick the cost with the best k-fold accuracy (ties -> smaller cost).

    Returns ``(best_cost, {cost: accuracy})``.
    """
    gram = _check_gram(gram)
    labels = list(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=int)
    for c in sorted(set(labels), key=str):
        idx = [i for i, lab in enumerate(labels) if lab == c]
        for j, i in enumerate(rng.permutation(idx)):
            folds[i] = j % k
    scores = {}
    for cost in grid:
        correct = 0
        for f in range(k):
            te = np.flatnonzero(folds == f)
            tr = np.flatnonzero(folds != f)
            if len(te) == 0 or len({labels[i] for i in tr}) < 2:
                continue
            model = train_ovo_svm(gram[np.ix_(tr, tr)], [labels[i] for i in tr], cost, tol)
            pred = predict_svm_batch(model, gram[np.ix_(te, tr)])
            correct += sum(p == labels[i] for p, i in zip(pred, te))
        scores[cost] = correct / len(labels)
    best = max(grid, key=lambda c: (scores[c], -c))
    return best, scores
