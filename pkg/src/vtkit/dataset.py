"""Image I/O, preprocessing, labelled manifests, stratified splits and a synthetic dataset."""

from __future__ import annotations

import csv
import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DatasetError,
    ImageFormatError,
    ImageSizeMismatchError,
    ParameterError,
    ShapeError,
    TruncatedImageError,
)

log = logging.getLogger(__name__)

CLASS_NAMES = ("bus", "truck", "van", "small_car")
LABEL_ALIASES = {"normal_vehicle": "small_car"}
MANIFEST_HEADER = ["path", "label", "camera_id"]
DISTRACTOR_RATE = 0.7


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(data):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise TruncatedImageError("header ends early")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedImageError("missing whitespace after maxval")
    return tokens, pos + 1


def decode_image_bytes(data):
    """Decode a binary P6 or P5 image to a ``3 x H x W`` float32 array in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported image format (magic {magic!r}); only binary P5/P6")
    tokens, offset = _parse_header(data)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"non-numeric header fields {tokens[1:]!r}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[offset:]
    if len(payload) < expected:
        raise TruncatedImageError(f"payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise ImageSizeMismatchError(f"payload has {len(payload)} bytes, header declares {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    arr = arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr


def decode_image(path):
    return decode_image_bytes(Path(path).read_bytes())


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_image(image):
    """Encode ``3 x H x W`` (P6) or ``H x W`` / ``1 x H x W`` (P5) floats in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 2:
        h, w = image.shape
        return f"P5\n{w} {h}\n255\n".encode() + to_uint8(image).tobytes()
    if image.ndim == 3 and image.shape[0] == 3:
        _, h, w = image.shape
        return f"P6\n{w} {h}\n255\n".encode() + to_uint8(image).transpose(1, 2, 0).tobytes()
    raise ShapeError(f"cannot encode image of shape {image.shape}")


def write_image(path, image):
    Path(path).write_bytes(encode_image(image))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _bilinear_axis(n_src, n_dst):
    scale = n_src / n_dst
    src = (np.arange(n_dst) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, (src - lo).astype(np.float32)


def resize_bilinear(image, target, letterbox=False):
    """Bilinear resize of ``C x H x W`` to ``C x target x target`` (half-pixel centres).

    Aspect ratio is discarded unless ``letterbox`` is set, in which case the
    image is scaled to fit and centred on a zero background.
    """
    if target < 1:
        raise ParameterError(f"target side must be >= 1, got {target}")
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    if letterbox and h != w:
        s = target / max(h, w)
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        inner = _resize(image, nh, nw)
        out = np.zeros((c, target, target), np.float32)
        top, left = (target - nh) // 2, (target - nw) // 2
        out[:, top:top + nh, left:left + nw] = inner
        return out
    return _resize(image, target, target)


def _resize(image, th, tw):
    c, h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()
    y0, y1, fy = _bilinear_axis(h, th)
    x0, x1, fx = _bilinear_axis(w, tw)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def normalize_brightness(image, method="standardize"):
    """Per-image brightness normalisation.

    ``standardize`` subtracts the global mean and divides by the global standard
    deviation (flat images map to zeros). ``equalize`` first replaces values by
    their rank quantiles (histogram equalisation) and then standardises.
    """
    x = np.asarray(image, dtype=np.float64)
    if method == "equalize":
        flat = x.reshape(-1)
        ranks = np.empty(flat.size)
        ranks[np.argsort(flat, kind="stable")] = np.arange(flat.size)
        # equal inputs share a quantile so equalisation stays a function of intensity
        _, inv = np.unique(flat, return_inverse=True)
        ranks = np.bincount(inv, weights=ranks)[inv] / np.bincount(inv)[inv]
        x = ranks.reshape(x.shape)
    elif method != "standardize":
        raise ParameterError(f"unknown normalisation method {method!r}")
    std = x.std()
    if std < 1e-6:
        return np.zeros(x.shape, np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def preprocess(image, size, method="standardize", letterbox=False):
    return normalize_brightness(resize_bilinear(image, size, letterbox), method)


# ---------------------------------------------------------------------------
# Manifests and splitting
# ---------------------------------------------------------------------------


def canonical_label(label):
    label = LABEL_ALIASES.get(label.strip(), label.strip())
    if label not in CLASS_NAMES:
        raise DatasetError(f"unknown label {label!r}; expected one of {'|'.join(CLASS_NAMES)}")
    return label


@dataclass(frozen=True)
class LabeledSample:
    path: Path
    label: str
    camera_id: str = ""

    @property
    def label_index(self):
        return CLASS_NAMES.index(self.label)


@dataclass
class LabeledDataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def class_counts(self):
        counts = Counter(s.label for s in self.samples)
        return {name: counts.get(name, 0) for name in CLASS_NAMES}

    @property
    def labels(self):
        return np.array([s.label_index for s in self.samples], dtype=np.int64)

    def filter_camera(self, *camera_ids):
        return LabeledDataset([s for s in self.samples if s.camera_id in camera_ids])


def read_manifest(path):
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            p = Path(row[0])
            samples.append(LabeledSample(p if p.is_absolute() else base / p, canonical_label(row[1]), row[2]))
    return LabeledDataset(samples)


def write_manifest(ds, path):
    """Write ``ds`` with paths relative to the manifest's directory where possible."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in ds.samples:
            p = Path(s.path).resolve()
            try:
                rel = p.relative_to(base).as_posix()
            except ValueError:
                rel = Path(os.path.relpath(p, base)).as_posix()
            w.writerow([rel, canonical_label(s.label), s.camera_id])


def stratified_split(ds, test_fraction=0.10, seed=0):
    """Per-class seeded split; ``round(count * test_fraction)`` of each class goes to test.

    Both partitions keep the original sample order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for name in CLASS_NAMES:
        idx = [i for i, s in enumerate(ds.samples) if s.label == name]
        if not idx:
            continue
        if len(idx) * test_fraction < 1.0 - 1e-9:
            raise DatasetError(
                f"class {name!r} has {len(idx)} samples; needs >= {math.ceil(1 / test_fraction)} to stratify"
            )
        n_test = math.floor(len(idx) * test_fraction + 0.5)
        perm = rng.permutation(len(idx))
        test_idx.extend(idx[j] for j in perm[:n_test])
    chosen = set(test_idx)
    train = [s for i, s in enumerate(ds.samples) if i not in chosen]
    test = [s for i, s in enumerate(ds.samples) if i in chosen]
    return LabeledDataset(train), LabeledDataset(test)


def load_images(ds):
    return [decode_image(s.path) for s in ds.samples]


def load_arrays(ds, size, method="standardize", letterbox=False):
    """Decode and preprocess every sample. Returns ``(N x 3 x size x size float32, labels)``."""
    x = np.zeros((len(ds), 3, size, size), np.float32)
    for i, s in enumerate(ds.samples):
        x[i] = preprocess(decode_image(s.path), size, method, letterbox)
    return x, ds.labels


# ---------------------------------------------------------------------------
# Synthetic frontal-vehicle generator
# ---------------------------------------------------------------------------


def _round_rect_sdf(yy, xx, cy, cx, hh, hw, r):
    qy = np.abs(yy - cy) - hh + r
    qx = np.abs(xx - cx) - hw + r
    outside = np.hypot(np.maximum(qy, 0), np.maximum(qx, 0))
    inside = np.minimum(np.maximum(qy, qx), 0)
    return outside + inside - r


def _paint(img, sdf, color):
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)[None]
    img *= 1 - alpha
    img += alpha * np.asarray(color, np.float32)[:, None, None]


def _background(size, camera, rng, yy, xx):
    img = np.empty((3, size, size), np.float32)
    t = yy / size
    if camera == "cam1":
        # open gate: sky fading into asphalt with a horizon line
        sky = np.array([0.55, 0.6, 0.7]) * (0.9 + 0.2 * rng.random())
        road = np.array([0.32, 0.32, 0.33]) * (0.8 + 0.4 * rng.random())
        horizon = 0.45 + 0.05 * rng.standard_normal()
        w = np.clip((t - horizon) * 8 + 0.5, 0, 1)
        img[:] = (sky[:, None, None] * (1 - w) + road[:, None, None] * w).astype(np.float32)
        lane = _round_rect_sdf(yy, xx, size * 0.95, size * (0.5 + 0.1 * rng.standard_normal()),
                               size * 0.05, size * 0.01, 0)
        _paint(img, lane, (0.85, 0.85, 0.8))
    else:
        # building wall with a row of bays behind the gate
        wall = np.array([0.45, 0.4, 0.35]) * (0.8 + 0.4 * rng.random())
        img[:] = wall[:, None, None]
        n = int(rng.integers(3, 6))
        for j in range(n):
            cx = size * (j + 0.5) / n + rng.normal(0, size * 0.02)
            bay = _round_rect_sdf(yy, xx, size * 0.25, cx, size * 0.12, size * 0.5 / n * 0.6, 1)
            _paint(img, bay, wall * 0.55)
        floor = np.clip((t - 0.7) * 10, 0, 1)
        img *= (1 - 0.35 * floor)[None].astype(np.float32)
    return img


def _vehicle(img, label, size, rng, yy, xx, scale=1.0, offset=0.0, lift=0.0):
    """Paint one frontal vehicle.

    All classes share the same parts (windshield, grille, lamps, plate, wheels,
    optional roof sign); they differ in body proportions and in whether the
    body is one block or a narrower upper tier on a wider lower one.
    """
    s = size * scale * (1 + rng.uniform(-0.15, 0.15))
    cx = size * (0.5 + offset) + rng.uniform(-0.1, 0.1) * size
    base = size * (0.88 - lift) + rng.uniform(-0.1, 0.1) * size * 0.5
    tone = rng.uniform(0.55, 0.9)
    body = np.clip(tone + rng.uniform(-0.08, 0.08, 3), 0, 1)
    glass = np.clip(body * 0.25 + 0.05, 0, 1)
    dark = (0.08, 0.08, 0.08)
    light = (1.0, 0.97, 0.85)

    def rect(cy, hw, hh, r, color, dx=0.0):
        _paint(img, _round_rect_sdf(yy, xx, cy, cx + dx, hh, hw, r), color)

    # (lower width, lower height, upper width, upper height) in units of s
    w_lo, h_lo, w_up, h_up = {
        "bus": (0.74, 0.70, 0.0, 0.0),
        "van": (0.66, 0.48, 0.0, 0.0),
        "truck": (0.76, 0.26, 0.56, 0.38),
        "small_car": (0.62, 0.20, 0.44, 0.17),
    }[label]
    w_lo, h_lo, w_up, h_up = (v * s * rng.uniform(0.9, 1.1) for v in (w_lo, h_lo, w_up, h_up))
    r = 0.04 * s
    rect(base - h_lo / 2, w_lo / 2, h_lo / 2, r, body)
    # livery: class-independent bands and decals on the lower body
    for _ in range(int(rng.integers(2, 6))):
        hw, hh = rng.uniform(0.03, 0.2) * s, rng.uniform(0.01, 0.06) * s
        dx = rng.uniform(-1, 1) * max(w_lo / 2 - hw, 0)
        cy = base - rng.uniform(hh, max(h_lo - hh, hh))
        rect(cy, hw, hh, 0, np.clip(body * rng.uniform(0.4, 1.5), 0, 1), dx=dx)
    if h_up:
        rect(base - h_lo - h_up / 2 + r, w_up / 2, h_up / 2 + r, r, body)
        glass_cy, glass_hh, glass_hw = base - h_lo - 0.45 * h_up, 0.3 * h_up, 0.4 * w_up
        grille_cy, grille_hh = base - 0.55 * h_lo, 0.22 * h_lo
        roof = base - h_lo - h_up
    else:
        glass_cy, glass_hh, glass_hw = base - 0.7 * h_lo, 0.17 * h_lo, 0.42 * w_lo
        grille_cy, grille_hh = base - 0.25 * h_lo, 0.09 * h_lo
        roof = base - h_lo
    rect(glass_cy, glass_hw, glass_hh, 0.02 * s, glass)
    style = int(rng.integers(3))
    grille_hw = 0.22 * w_lo
    rect(grille_cy, grille_hw, grille_hh, 0.01 * s, dark)
    if style == 1:
        for k in range(3):
            rect(grille_cy + (k - 1) * grille_hh * 0.6, grille_hw * 0.9, 0.012 * s, 0, body * 0.7)
    elif style == 2:
        rect(grille_cy, 0.012 * s, grille_hh * 0.9, 0, body * 0.7)
    lamp_hw, lamp_hh = 0.06 * w_lo, 0.05 * s
    for sign in (-1, 1):
        rect(grille_cy, lamp_hw, lamp_hh, 0.01 * s, light, dx=sign * 0.36 * w_lo)
        rect(base + 0.01 * size, 0.05 * s, 0.02 * s, 0.01 * s, dark, dx=sign * 0.3 * w_lo)
    rect(base - 0.06 * s, 0.07 * s, 0.02 * s, 0, (0.9, 0.9, 0.9))  # plate
    if rng.random() < 0.3:
        rect(roof + 0.03 * s, 0.18 * s, 0.02 * s, 0.005 * s, (0.9, 0.6, 0.1))  # roof sign


def render_vehicle(label, size, camera, rng, noise=0.05):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    img = _background(size, camera, rng, yy, xx)
    if rng.random() < DISTRACTOR_RATE:
        # a farther vehicle of any class, cut off by the frame edge
        other = CLASS_NAMES[int(rng.integers(len(CLASS_NAMES)))]
        side = 1 if rng.random() < 0.5 else -1
        _vehicle(img, other, size, rng, yy, xx, scale=rng.uniform(0.6, 0.8),
                 offset=side * rng.uniform(0.42, 0.55), lift=0.08)
    _vehicle(img, label, size, rng, yy, xx)
    img *= np.float32(rng.uniform(0.85, 1.1))  # illumination
    img += rng.normal(0, noise, img.shape).astype(np.float32)
    return np.clip(img, 0, 1)


def generate_synthetic(out_dir, n_per_class, image_size=64, seed=0, noise=0.05):
    """Render ``n_per_class`` images per class under ``out_dir`` plus ``manifest.csv``.

    Cameras alternate between two background styles (``cam1``, ``cam2``).
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per_class):
        for label in CLASS_NAMES:
            camera = "cam1" if (i + CLASS_NAMES.index(label)) % 2 == 0 else "cam2"
            img = render_vehicle(label, image_size, camera, rng, noise)
            rel = Path("images") / f"{label}_{i:05d}.ppm"
            write_image(out / rel, img)
            samples.append(LabeledSample(out / rel, label, camera))
    ds = LabeledDataset(samples)
    write_manifest(ds, out / "manifest.csv")
    return ds
