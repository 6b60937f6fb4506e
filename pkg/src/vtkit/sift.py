"""Dense SIFT descriptors on a regular grid.

Geometry: for bin size ``s`` a descriptor covers a ``4s x 4s`` window split
into 4x4 spatial bins; windows start every ``stride`` pixels. Each pixel's
gradient magnitude is split trilinearly between the two nearest bin centres
along x, along y and along orientation (8 bins, 45 degrees apart, bin 0 at
angle 0). No Gaussian window is applied. Vectors are L2 normalised, clamped
at 0.2 and renormalised.

Positions are continuous coordinates in which pixel ``p`` spans ``[p, p+1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

log = logging.getLogger(__name__)

BIN_SIZES = (4, 6, 8, 10)
STRIDE = 6
N_ORIENT = 8
CLAMP = 0.2
FLAT_EPS = 1e-10


@dataclass(frozen=True)
class SiftDescriptor:
    x: float
    y: float
    scale: int
    vector: np.ndarray


@dataclass
class DescriptorSet:
    """Columnar batch of descriptors: ``positions`` N x 2 (x, y), ``scales`` N, ``vectors`` N x 128."""

    positions: np.ndarray
    scales: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.vectors)

    def __getitem__(self, i):
        x, y = self.positions[i]
        return SiftDescriptor(float(x), float(y), int(self.scales[i]), self.vectors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0, int), np.zeros((0, 128), np.float32))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.positions for p in parts]),
                   np.concatenate([p.scales for p in parts]),
                   np.concatenate([p.vectors for p in parts]))


def to_grayscale(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected 3 x H x W, got shape {image.shape}")
    return (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])[None].astype(np.float32)


def grid_count(dim, bin_size, stride=STRIDE):
    side = 4 * bin_size
    return 0 if dim < side else (dim - side) // stride + 1


def _gradients(gray):
    g = np.pad(gray.astype(np.float64), 1, mode="edge")
    gx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2
    gy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2
    return gx, gy


def orientation_planes(gray):
    """Gradient magnitude split between the two nearest of 8 orientation bins: 8 x H x W."""
    gx, gy = _gradients(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    o = theta / (2 * np.pi / N_ORIENT)
    o0 = np.floor(o).astype(int) % N_ORIENT
    frac = o - np.floor(o)
    o1 = (o0 + 1) % N_ORIENT
    lo, hi = mag * (1 - frac), mag * frac
    return np.stack([np.where(o0 == k, lo, 0.0) + np.where(o1 == k, hi, 0.0) for k in range(N_ORIENT)])


def spatial_weights(bin_size):
    """4 x 4s matrix: weight of window pixel ``u`` for spatial bin ``i`` (bilinear)."""
    u = np.arange(4 * bin_size) + 0.5
    centers = bin_size * (np.arange(4) + 0.5)
    return np.maximum(0.0, 1.0 - np.abs(u[None, :] - centers[:, None]) / bin_size)


def lowe_normalize(raw):
    """L2 normalise, clamp at 0.2, renormalise (rows); near-zero rows stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    flat = norm[..., 0] < FLAT_EPS
    v = np.minimum(raw / np.where(flat[..., None], 1.0, norm), CLAMP)
    norm2 = np.linalg.norm(v, axis=-1, keepdims=True)
    v = v / np.where(norm2 == 0, 1.0, norm2)
    v[flat] = 0.0
    return v


def dense_sift(image, stride=STRIDE, bin_sizes=BIN_SIZES):
    """Dense SIFT over a grayscale ``1 x H x W`` (or ``H x W``) image."""
    gray = np.asarray(image)
    if gray.ndim == 3:
        if gray.shape[0] != 1:
            raise ShapeError(f"dense_sift needs a single-channel image, got {gray.shape[0]} channels")
        gray = gray[0]
    h, w = gray.shape
    planes = orientation_planes(gray)
    parts = []
    for s in bin_sizes:
        ny, nx = grid_count(h, s, stride), grid_count(w, s, stride)
        if ny == 0 or nx == 0:
            continue
        side = 4 * s
        win = sliding_window_view(planes, (side, side), axis=(1, 2))[:, ::stride, ::stride][:, :ny, :nx]
        wts = spatial_weights(s)
        # (orient, gy, gx, u, v) -> (gy, gx, by, bx, orient)
        hist = np.einsum("oyxuv,iu,jv->yxijo", win, wts, wts, optimize=True)
        vecs = lowe_normalize(hist.reshape(ny * nx, 128)).astype(np.float32)
        ys = np.arange(ny) * stride + side / 2
        xs = np.arange(nx) * stride + side / 2
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
        parts.append(DescriptorSet(pos, np.full(ny * nx, s), vecs))
    if not parts:
        log.warning("image %dx%d is smaller than the smallest descriptor window", h, w)
    return DescriptorSet.concat(parts)
