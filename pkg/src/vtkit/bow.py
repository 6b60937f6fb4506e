"""Visual vocabulary (k-means) and spatial-pyramid bag-of-words encoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ContainerFormatError, ParameterError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_K = 1000
N_CELLS = 5  # 1x1 + 2x2


@dataclass
class Vocabulary:
    centroids: np.ndarray  # k x 128 float32
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.centroids)

    def assign(self, vectors):
        return nearest_centroid(vectors, self.centroids)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list
    iterations: int


def squared_distances(x, centroids):
    """``|x_i - c_j|^2`` via the expanded form, float64, clipped at 0."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_centroid(x, centroids, chunk=8192):
    """Index of the nearest centroid per row; ties go to the lowest index."""
    x = np.asarray(x)
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        out[i:i + chunk] = squared_distances(x[i:i + chunk], centroids).argmin(axis=1)
    return out


def _assign(x, centroids, chunk=8192):
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for i in range(0, len(x), chunk):
        d = squared_distances(x[i:i + chunk], centroids)
        labels[i:i + chunk] = d.argmin(axis=1)
        dist[i:i + chunk] = d[np.arange(len(d)), labels[i:i + chunk]]
    return labels, dist


def kmeans_plusplus(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = squared_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass sits on chosen centres; pick any unused point
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centers[j:j + 1])[:, 0])
    return centers


def kmeans_fit(x, k=DEFAULT_K, max_iter=100, tol=1e-4, rng=None):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. An empty cluster is re-seeded at the point farthest from its
    current centroid. ``history`` holds the inertia after every assignment
    step and is checked to be non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected N x D points, got shape {x.shape}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ParameterError(f"only {n_distinct} distinct points for k={k} clusters")
    rng = rng if rng is not None else np.random.default_rng(0)

    centroids = kmeans_plusplus(x, k, rng)
    labels, dist = _assign(x, centroids)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        new = centroids.copy()
        filled = counts > 0
        order = np.argsort(labels, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[filled]
        new[filled] = np.add.reduceat(x[order], starts, axis=0) / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            # distances of every point to its (updated) own centroid
            own = ((x - new[labels]) ** 2).sum(1)
            farthest = np.argsort(-own, kind="stable")
            for j, pick in zip(empty, farthest):
                new[j] = x[pick]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        labels, dist = _assign(x, centroids)
        inertia = float(dist.sum())
        # Lloyd steps cannot increase inertia; allow only rounding noise
        assert inertia <= history[-1] * (1 + 1e-9) + 1e-12, (inertia, history[-1])
        history.append(inertia)
        if shift < tol:
            break
    return KMeansResult(centroids, labels, history[-1], history, it)


def build_vocabulary(descriptor_vectors, k=DEFAULT_K, sample_cap=200_000, max_iter=100, tol=1e-4, seed=0):
    """Fit a vocabulary on a uniform random sample of at most ``sample_cap`` descriptors."""
    rng = np.random.default_rng(seed)
    x = np.asarray(descriptor_vectors)
    if len(x) > sample_cap:
        x = x[np.sort(rng.choice(len(x), sample_cap, replace=False))]
    res = kmeans_fit(x, k, max_iter=max_iter, tol=tol, rng=rng)
    meta = {"iterations": res.iterations, "inertia": res.inertia, "seed": seed, "n_points": len(x)}
    return Vocabulary(res.centroids.astype(np.float32), meta)


def quadrant(positions, image_size):
    """2x2 cell index (row-major) of each descriptor centre; midline goes to the lower cell."""
    h, w = image_size
    col = (positions[:, 0] > w / 2).astype(np.int64)
    row = (positions[:, 1] > h / 2).astype(np.int64)
    return row * 2 + col


def encode(descriptors, vocab, image_size):
    """Spatial pyramid (1x1 + 2x2) of per-cell l1-normalised word histograms.

    Layout: the global histogram, then the four quadrants in row-major order,
    each ``vocab.k`` bins long.
    """
    k = vocab.k
    out = np.zeros(N_CELLS * k)
    if len(descriptors) == 0:
        log.warning("encoding an empty descriptor list; returning an all-zero vector")
        return out
    words = vocab.assign(descriptors.vectors)
    cells = quadrant(np.asarray(descriptors.positions), image_size)
    hist = np.zeros((N_CELLS, k))
    hist[0] = np.bincount(words, minlength=k)
    hist[1:] = np.bincount(cells * k + words, minlength=4 * k).reshape(4, k)
    totals = hist.sum(axis=1, keepdims=True)
    hist = np.divide(hist, totals, out=np.zeros_like(hist), where=totals > 0)
    return hist.reshape(-1)


def save_vocabulary(vocab, path, extra_meta=None):
    meta = {f"vocab.{k}": repr(v) if isinstance(v, float) else str(v) for k, v in vocab.meta.items()}
    meta.update(extra_meta or {})
    container.write_container(path, container.Container("vocab", meta, {"centroids": vocab.centroids}))


def vocabulary_from_container(c):
    if "centroids" not in c.tensors:
        raise ContainerFormatError("vocabulary file has no 'centroids' tensor")
    meta = {k[len("vocab."):]: v for k, v in c.metadata.items() if k.startswith("vocab.")}
    return Vocabulary(c.tensors["centroids"].copy(), meta)


def load_vocabulary(path):
    return vocabulary_from_container(container.read_container(path, expect_tag="vocab"))
