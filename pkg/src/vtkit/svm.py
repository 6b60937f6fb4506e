"""RBF-kernel SVM: SMO dual solver, KKT audit and a one-vs-one multiclass wrapper."""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ContainerFormatError, DatasetError, NonFiniteError, ParameterError, ShapeError

VOTE_RULE_VERSION = "1"
TAU = 1e-12


def rbf_kernel(x, y, gamma):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_gram(a, b, gamma):
    """Kernel matrix between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.exp(-gamma * np.maximum(d, 0.0))


class KernelRowCache:
    """LRU cache of kernel rows ``K[i, :]`` over a fixed training set."""

    def __init__(self, x, gamma, budget_bytes=256 * 2**20):
        self.x = np.asarray(x, dtype=np.float64)
        self.sq = (self.x * self.x).sum(1)
        self.gamma = gamma
        self.max_rows = max(2, int(budget_bytes // (8 * max(1, len(self.x)))))
        self.rows = OrderedDict()
        self.misses = 0

    def row(self, i):
        r = self.rows.get(i)
        if r is not None:
            self.rows.move_to_end(i)
            return r
        self.misses += 1
        d = self.sq + self.sq[i] - 2.0 * self.x @ self.x[i]
        r = np.exp(-self.gamma * np.maximum(d, 0.0))
        r[i] = 1.0
        self.rows[i] = r
        if len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return r


@dataclass
class BinarySvm:
    """``f(x) = sum_i coef_i K(sv_i, x) + bias`` with ``coef_i = alpha_i * y_i``.

    Support vectors and coefficients are float32 (the stored form); ``alpha``
    and ``support_indices`` describe the training solution and are only
    present on freshly trained machines.
    """

    support_vectors: np.ndarray
    dual_coefs: np.ndarray
    bias: float
    gamma: float
    C: float
    alpha: np.ndarray | None = None
    support_indices: np.ndarray | None = None
    iterations: int = 0
    converged: bool = True
    objective_trace: list | None = None

    @property
    def dim(self):
        return self.support_vectors.shape[1]

    def decision(self, x):
        """Decision values for one vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None] if single else x
        if x2.shape[1] != self.dim:
            raise ShapeError(f"feature dimension {x2.shape[1]} != model dimension {self.dim}")
        if len(self.dual_coefs) == 0:
            f = np.full(len(x2), self.bias)
        else:
            k = rbf_gram(x2, self.support_vectors, self.gamma)
            f = k @ self.dual_coefs.astype(np.float64) + self.bias
        return float(f[0]) if single else f

    def classify(self, x):
        f = self.decision(x)
        return np.where(np.asarray(f) >= 0, 1, -1) if np.ndim(f) else (1 if f >= 0 else -1)


def dual_objective(alpha, y, gram):
    """``sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij``."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ gram @ ay)


def smo_train(x, y, C=10.0, gamma=None, tol=1e-3, max_passes=1000, cache_bytes=256 * 2**20,
              record_objective=False):
    """Soft-margin RBF SVM via SMO with maximal-violating-pair selection.

    Stops once ``max_{I_up}(-y G) - min_{I_low}(-y G) <= tol`` (every KKT
    condition then holds within ``tol``) or after ``max_passes * n`` pair
    updates. ``y`` holds +1/-1 labels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"features {x.shape} and labels {y.shape} do not align")
    if not np.isfinite(x).all():
        raise NonFiniteError("features contain NaN or Inf")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ParameterError("binary labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise DatasetError("both classes must be present to train a binary SVM")
    if gamma is None:
        gamma = 1.0 / x.shape[1]
    if not C > 0 or not gamma > 0:
        raise ParameterError(f"C and gamma must be positive, got C={C}, gamma={gamma}")

    n = len(x)
    cache = KernelRowCache(x, gamma, cache_bytes)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a
    objective = [0.0] if record_objective else None
    max_iter = max_passes * n
    it = 0
    converged = False
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        violation = score[i] - score[j]
        if violation <= tol:
            converged = True
            break
        ki, kj = cache.row(i), cache.row(j)
        eta = max(ki[i] + kj[j] - 2.0 * ki[j], TAU)
        step = violation / eta
        step = min(step, C - alpha[i] if y[i] > 0 else alpha[i])
        step = min(step, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        # snap to the box so bound status is exact
        for t in (i, j):
            if alpha[t] < 1e-14 * C:
                alpha[t] = 0.0
            elif alpha[t] > C * (1 - 1e-14):
                alpha[t] = C
        grad += step * y * (ki - kj)
        if objective is not None:
            objective.append(objective[-1] + step * violation - 0.5 * step * step * eta)
        it += 1

    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(score[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = score[up].max() if up.any() else score[low].min()
        lo = score[low].min() if low.any() else hi
        bias = float((hi + lo) / 2)
    sv = np.flatnonzero(alpha > 0)
    model = BinarySvm(
        support_vectors=x[sv].astype(np.float32),
        dual_coefs=(alpha[sv] * y[sv]).astype(np.float32),
        bias=bias,
        gamma=float(gamma),
        C=float(C),
        alpha=alpha,
        support_indices=sv,
        iterations=it,
        converged=converged,
        objective_trace=objective,
    )
    return model


def kkt_violations(model, x, y, tol=1e-3):
    """Indices whose KKT condition is violated by more than ``tol``.

    Uses ``alpha`` from training and the model's own decision function:
    ``alpha=0 -> y f >= 1``, ``0<alpha<C -> y f = 1``, ``alpha=C -> y f <= 1``.
    """
    if model.alpha is None:
        raise ParameterError("KKT audit needs a freshly trained model (alpha unknown)")
    y = np.asarray(y, dtype=np.float64)
    margin = y * model.decision(np.asarray(x))
    a, C = model.alpha, model.C
    bad = np.where(
        a <= 0, margin < 1 - tol,
        np.where(a >= C, margin > 1 + tol, np.abs(margin - 1) > tol),
    )
    return np.flatnonzero(bad)


# ---------------------------------------------------------------------------
# Multiclass (one-vs-one)
# ---------------------------------------------------------------------------


@dataclass
class MulticlassSvm:
    machines: dict  # (a, b) -> BinarySvm, positive side = class a
    class_names: tuple
    dim: int
    meta: dict = field(default_factory=dict)

    def decision_matrix(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return {pair: m.decision(x) for pair, m in self.machines.items()}

    def _tally(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"feature dimension {x.shape[1]} != model dimension {self.dim}")
        k = len(self.class_names)
        votes = np.zeros((len(x), k))
        strength = np.zeros((len(x), k))
        for (a, b), f in self.decision_matrix(x).items():
            win_a = f >= 0
            votes[:, a] += win_a
            votes[:, b] += ~win_a
            strength[:, a] += np.where(win_a, np.abs(f), 0.0)
            strength[:, b] += np.where(win_a, 0.0, np.abs(f))
        return votes, strength

    def vote_shares(self, x):
        """Fraction of pairwise duels won by each class; rows sum to 1."""
        votes, _ = self._tally(x)
        return votes / max(len(self.machines), 1)

    def predict(self, x):
        """Majority vote; ties by summed |decision| of the won duels, then lowest index."""
        votes, strength = self._tally(x)
        out = np.empty(len(votes), dtype=np.int64)
        for r in range(len(votes)):
            best = np.flatnonzero(votes[r] == votes[r].max())
            if len(best) > 1:
                s = strength[r, best]
                best = best[s == s.max()]
            out[r] = best[0]
        return out


def _canonical_order(x, y):
    keys = [row.tobytes() + int(label).to_bytes(8, "little", signed=True) for row, label in zip(x, y)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def train_multiclass(x, labels, C=10.0, gamma=None, tol=1e-3, class_names=None, n_classes=4, **kw):
    """Train all pairwise machines. Training order is canonicalised first, so the
    result does not depend on the order of the samples."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if class_names is None:
        class_names = tuple(str(i) for i in range(n_classes))
    k = len(class_names)
    missing = [class_names[c] for c in range(k) if not (labels == c).any()]
    if missing:
        raise DatasetError(f"classes absent from training data: {', '.join(missing)}")
    if gamma is None:
        gamma = 1.0 / x.shape[1]
    order = _canonical_order(x, labels)
    x, labels = x[order], labels[order]
    machines = {}
    for a, b in itertools.combinations(range(k), 2):
        sel = (labels == a) | (labels == b)
        yy = np.where(labels[sel] == a, 1.0, -1.0)
        machines[(a, b)] = smo_train(x[sel], yy, C=C, gamma=gamma, tol=tol, **kw)
    return MulticlassSvm(machines, tuple(class_names), x.shape[1], {"C": C, "gamma": gamma, "tol": tol})


def default_grid(dim):
    """C in {1, 10, 100} x gamma in {0.1, 1, 10} / dim."""
    return [(c, g / dim) for c in (1.0, 10.0, 100.0) for g in (0.1, 1.0, 10.0)]


def select_and_train(x, labels, grid=None, val_fraction=0.2, seed=0, class_names=None, tol=1e-3):
    """Pick (C, gamma) by accuracy on a stratified hold-out of the training data,
    then retrain on all of it. Ties go to the earlier grid entry."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grid = grid or default_grid(x.shape[1])
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_val = max(1, int(round(len(idx) * val_fraction)))
        val.extend(idx[rng.permutation(len(idx))[:n_val]])
    val_mask = np.zeros(len(x), bool)
    val_mask[val] = True
    scores = []
    best, best_acc = grid[0], -1.0
    for C, gamma in grid:
        m = train_multiclass(x[~val_mask], labels[~val_mask], C, gamma, tol, class_names)
        acc = float(np.mean(m.predict(x[val_mask]) == labels[val_mask]))
        scores.append((C, gamma, acc))
        if acc > best_acc:
            best, best_acc = (C, gamma), acc
    model = train_multiclass(x, labels, best[0], best[1], tol, class_names)
    model.meta.update(selection=scores, val_accuracy=best_acc)
    return model


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def to_container(model, extra_meta=None, extra_tensors=None):
    meta = {
        "class_names": ",".join(model.class_names),
        "dim": str(model.dim),
        "vote_rule": VOTE_RULE_VERSION,
        "pairs": ";".join(f"{a}-{b}" for a, b in model.machines),
    }
    tensors = {}
    for (a, b), m in model.machines.items():
        key = f"m{a}-{b}"
        meta[f"{key}.bias"] = repr(float(m.bias))
        meta[f"{key}.gamma"] = repr(float(m.gamma))
        meta[f"{key}.C"] = repr(float(m.C))
        tensors[f"{key}.support_vectors"] = m.support_vectors.reshape(-1, model.dim)
        tensors[f"{key}.dual_coefs"] = m.dual_coefs
    meta.update(extra_meta or {})
    tensors.update(extra_tensors or {})
    return container.Container("svm", meta, tensors)


def from_container(c):
    meta = c.metadata
    try:
        class_names = tuple(meta["class_names"].split(","))
        dim = int(meta["dim"])
        if meta["vote_rule"] != VOTE_RULE_VERSION:
            raise ContainerFormatError(f"unknown vote rule version {meta['vote_rule']!r}")
        machines = {}
        for pair in meta["pairs"].split(";"):
            a, b = (int(v) for v in pair.split("-"))
            key = f"m{a}-{b}"
            machines[(a, b)] = BinarySvm(
                support_vectors=c.tensors[f"{key}.support_vectors"].copy(),
                dual_coefs=c.tensors[f"{key}.dual_coefs"].copy(),
                bias=float(meta[f"{key}.bias"]),
                gamma=float(meta[f"{key}.gamma"]),
                C=float(meta[f"{key}.C"]),
            )
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"incomplete svm section: {exc}") from None
    return MulticlassSvm(machines, class_names, dim)
