"""Configurable CNN classifier: construction, SGD training, inference, persistence."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import NonFiniteError, ParameterError, ShapeError, TrainingDiverged
from .nn import Conv2D, Dense, Dropout, Flatten, MaxPool2, Network, ReLU, sgd_step, softmax

CLASS_NAMES = ("bus", "truck", "van", "small_car")

N_CONV_LAYERS = (1, 2, 3, 4)
N_DENSE_LAYERS = (0, 1, 2)
INPUT_SIZES = (64, 96, 128, 160)
KERNEL_SIZES = (5, 9, 13, 17)
MAP_COUNTS = (16, 32, 48)
LEARNING_RATE_RANGE = (1e-5, 1e-1)

DENSE_UNITS = 100

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    n_conv_layers: int
    n_dense_layers: int
    input_size: int
    kernel_size: int
    n_maps: int
    learning_rate: float

    def validate(self):
        checks = [
            ("n_conv_layers", self.n_conv_layers, N_CONV_LAYERS),
            ("n_dense_layers", self.n_dense_layers, N_DENSE_LAYERS),
            ("input_size", self.input_size, INPUT_SIZES),
            ("kernel_size", self.kernel_size, KERNEL_SIZES),
            ("n_maps", self.n_maps, MAP_COUNTS),
        ]
        for name, value, allowed in checks:
            if value not in allowed:
                raise ParameterError(f"{name}={value} not in {allowed}")
        lo, hi = LEARNING_RATE_RANGE
        if not lo <= self.learning_rate <= hi:
            raise ParameterError(f"learning_rate={self.learning_rate} outside [{lo}, {hi}]")
        if self.input_size // 2 ** self.n_conv_layers < 1:
            raise ParameterError(
                f"input_size {self.input_size} too small for {self.n_conv_layers} pooling stages"
            )
        return self

    def to_dict(self):
        return asdict(self)


# Best configuration found by the 50-trial search reported for the original system.
SELECTED = HyperParams(
    n_conv_layers=2, n_dense_layers=2, input_size=96, kernel_size=5, n_maps=32, learning_rate=0.001643
)


@dataclass
class TrainConfig:
    max_iterations: int = 30_000
    batch_size: int = 32
    eval_every: int = 500
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ParameterError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ParameterError("batch_size and eval_every must be positive")


@dataclass
class TrainedCnn:
    hyperparams: HyperParams
    network: Network
    class_names: tuple = CLASS_NAMES
    dropout_rate: float = 0.5
    training_meta: dict = field(default_factory=dict)

    @property
    def layers(self):
        return self.network.layers

    @property
    def input_shape(self):
        return (3, self.hyperparams.input_size, self.hyperparams.input_size)

    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2D)]

    def copy(self):
        return TrainedCnn(self.hyperparams, self.network.copy(), tuple(self.class_names),
                          self.dropout_rate, dict(self.training_meta))


@dataclass
class CurvePoint:
    iteration: int
    train_loss: float
    test_accuracy: float


@dataclass
class LearningCurve:
    points: list = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def accuracy_at(self, iteration):
        for p in self.points:
            if p.iteration == iteration:
                return p.test_accuracy
        raise KeyError(iteration)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "train_loss", "test_accuracy"])
            for p in self.points:
                w.writerow([p.iteration, repr(float(p.train_loss)), repr(float(p.test_accuracy))])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([CurvePoint(int(r["iteration"]), float(r["train_loss"]), float(r["test_accuracy"]))
                    for r in rows])


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def build_network(hp, rng, dropout_rate=0.5, n_classes=len(CLASS_NAMES), class_names=CLASS_NAMES):
    """Untrained network for ``hp``; He-initialised weights and zero biases.

    Stack: ``n_conv x [conv, relu, dropout, maxpool]``, flatten,
    ``n_dense x [dense(100), relu, dropout]``, ``dense(n_classes)``.
    """
    hp.validate()
    k = hp.kernel_size
    layers = []
    channels = 3
    side = hp.input_size
    for _ in range(hp.n_conv_layers):
        fan_in = channels * k * k
        layers += [
            Conv2D(_he(rng, (hp.n_maps, channels, k, k), fan_in), np.zeros(hp.n_maps, np.float32)),
            ReLU(),
            Dropout(dropout_rate),
            MaxPool2(),
        ]
        channels = hp.n_maps
        side //= 2
    layers.append(Flatten())
    width = channels * side * side
    for _ in range(hp.n_dense_layers):
        layers += [Dense(_he(rng, (DENSE_UNITS, width), width), np.zeros(DENSE_UNITS, np.float32)),
                   ReLU(), Dropout(dropout_rate)]
        width = DENSE_UNITS
    layers.append(Dense(_he(rng, (n_classes, width), width), np.zeros(n_classes, np.float32)))
    return TrainedCnn(hp, Network(layers), tuple(class_names), dropout_rate)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def augment(image, rng, enabled=True, max_shift=0.05):
    """Random horizontal flip (p=0.5) and translation up to ``max_shift`` of each side.

    Uncovered pixels replicate the nearest edge. Draw order per image: flip,
    vertical shift, horizontal shift.
    """
    if not enabled:
        return image
    _, h, w = image.shape
    flip = rng.random() < 0.5
    my, mx = int(max_shift * h), int(max_shift * w)
    dy = int(rng.integers(-my, my + 1))
    dx = int(rng.integers(-mx, mx + 1))
    out = image[:, :, ::-1] if flip else image
    if dy or dx:
        padded = np.pad(out, ((0, 0), (my, my), (mx, mx)), mode="edge")
        out = padded[:, my - dy:my - dy + h, mx - dx:mx - dx + w]
    return np.ascontiguousarray(out)


def augment_batch(batch, rng, enabled=True):
    if not enabled:
        return batch
    return np.stack([augment(img, rng) for img in batch])


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


def _check_images(net, x):
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeError(f"images must be N x {' x '.join(map(str, net.input_shape))}, got {x.shape}")


def predict_proba(net, images, batch_size=128):
    """Class probabilities (float64) for a batch of preprocessed images."""
    images = np.asarray(images, dtype=np.float32)
    _check_images(net, images)
    out = []
    for i in range(0, len(images), batch_size):
        logits = net.network.forward(images[i:i + batch_size], train=False)
        out.append(softmax(logits.astype(np.float64)))
    if not out:
        return np.zeros((0, len(net.class_names)))
    return np.concatenate(out)


def predict(net, image):
    """Returns ``(class_index, probabilities)``; ties go to the lowest index."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != net.input_shape:
        raise ShapeError(f"image must be {net.input_shape}, got {image.shape}")
    probs = predict_proba(net, image[None])[0]
    return int(np.argmax(probs)), probs


def accuracy(net, images, labels):
    if len(labels) == 0:
        return 0.0
    probs = predict_proba(net, images)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def train(net, train_set, test_set, cfg, progress=None):
    """Shuffled mini-batch SGD for ``cfg.max_iterations`` iterations.

    ``train_set`` and ``test_set`` are ``(images, labels)`` pairs of
    preprocessed arrays. The input network is left untouched; a trained copy
    is returned together with the learning curve, recorded every
    ``cfg.eval_every`` iterations and at the final iteration.
    """
    x_train, y_train = np.asarray(train_set[0], np.float32), np.asarray(train_set[1])
    x_test, y_test = np.asarray(test_set[0], np.float32), np.asarray(test_set[1])
    if len(x_train) == 0:
        raise ParameterError("training set is empty")
    _check_images(net, x_train)
    if len(x_test):
        _check_images(net, x_test)

    net = net.copy()
    curve = LearningCurve()
    if cfg.max_iterations == 0:
        return net, curve

    shuffle_seq, aug_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    drop_rng = np.random.default_rng(drop_seq)

    n = len(x_train)
    bs = min(cfg.batch_size, n)
    order = shuffle_rng.permutation(n)
    pos = 0
    params = net.network.params()
    lr = net.hyperparams.learning_rate
    checkpoint = net.copy()
    running, count = 0.0, 0
    start = time.perf_counter()
    for it in range(1, cfg.max_iterations + 1):
        if pos + bs > n:
            order = shuffle_rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        xb = augment_batch(x_train[idx], aug_rng, cfg.augment)
        loss, _ = net.network.loss_and_grads(xb, y_train[idx], rng=drop_rng)
        diag = {"iteration": it, "loss": loss, "learning_rate": lr}
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}", it, checkpoint, diag)
        try:
            sgd_step(params, net.network.grads(), lr)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", it, checkpoint, diag) from exc
        running += loss
        count += 1
        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            acc = accuracy(net, x_test, y_test)
            curve.points.append(CurvePoint(it, running / count, acc))
            running, count = 0.0, 0
            checkpoint = net.copy()
            if progress is not None:
                progress(curve.points[-1])
    net.training_meta.update(
        seed=cfg.seed,
        iterations=cfg.max_iterations,
        batch_size=bs,
        final_train_loss=curve.points[-1].train_loss,
        final_test_accuracy=curve.points[-1].test_accuracy,
    )
    log.info("trained %d iterations in %.1f s", cfg.max_iterations, time.perf_counter() - start)
    return net, curve


def dump_feature_maps(net, image, layer_index):
    """Post-ReLU activations of conv layer ``layer_index``, each min-max scaled to [0, 1].

    A constant map comes back as all zeros.
    """
    n_conv = net.hyperparams.n_conv_layers
    if not 0 <= layer_index < n_conv:
        raise IndexError(f"layer_index {layer_index} out of range for {n_conv} conv layers")
    image = np.asarray(image, dtype=np.float32)
    if image.shape != net.input_shape:
        raise ShapeError(f"image must be {net.input_shape}, got {image.shape}")
    x = image[None]
    seen = -1
    for layer in net.layers:
        x = layer.forward(x, train=False)
        if isinstance(layer, Conv2D):
            seen += 1
        elif isinstance(layer, ReLU) and seen == layer_index:
            break
    maps = []
    for m in x[0]:
        lo, hi = float(m.min()), float(m.max())
        if hi - lo > 0:
            maps.append(((m - lo) / (hi - lo)).astype(np.float32))
        else:
            maps.append(np.zeros_like(m))
    return maps


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _param_names(net):
    names = []
    counts = {"conv": 0, "dense": 0}
    dense_total = sum(isinstance(layer, Dense) for layer in net.layers)
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            prefix = f"conv{counts['conv']}"
            counts["conv"] += 1
        elif isinstance(layer, Dense):
            counts["dense"] += 1
            prefix = "output" if counts["dense"] == dense_total else f"dense{counts['dense'] - 1}"
        else:
            continue
        names.append((prefix, layer))
    return names


def to_container(net):
    meta = {f"hp.{k}": repr(v) for k, v in asdict(net.hyperparams).items()}
    meta["class_names"] = ",".join(net.class_names)
    meta["dropout_rate"] = repr(net.dropout_rate)
    for k, v in net.training_meta.items():
        meta[f"train.{k}"] = repr(v) if isinstance(v, float) else str(v)
    tensors = {}
    for prefix, layer in _param_names(net):
        tensors[f"{prefix}.weights"] = layer.weights
        tensors[f"{prefix}.bias"] = layer.bias
    return container.Container("cnn", meta, tensors)


def from_container(c):
    meta = c.metadata
    try:
        hp = HyperParams(
            n_conv_layers=int(meta["hp.n_conv_layers"]),
            n_dense_layers=int(meta["hp.n_dense_layers"]),
            input_size=int(meta["hp.input_size"]),
            kernel_size=int(meta["hp.kernel_size"]),
            n_maps=int(meta["hp.n_maps"]),
            learning_rate=float(meta["hp.learning_rate"]),
        )
        class_names = tuple(meta["class_names"].split(","))
        dropout_rate = float(meta["dropout_rate"])
    except (KeyError, ValueError) as exc:
        raise container.ContainerFormatError(f"incomplete cnn metadata: {exc}") from None
    net = build_network(hp, np.random.default_rng(0), dropout_rate, len(class_names), class_names)
    for prefix, layer in _param_names(net):
        for attr in ("weights", "bias"):
            key = f"{prefix}.{attr}"
            if key not in c.tensors:
                raise container.ContainerFormatError(f"missing tensor {key!r}")
            stored = c.tensors[key]
            if stored.shape != getattr(layer, attr).shape:
                raise container.ContainerFormatError(
                    f"tensor {key!r} has shape {stored.shape}, expected {getattr(layer, attr).shape}"
                )
            setattr(layer, attr, stored.copy())
    net.training_meta = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
    return net


def save_model(net, path):
    container.write_container(path, to_container(net))


def load_model(path):
    return from_container(container.read_container(path, expect_tag="cnn"))


def hyperparams_from_file(path):
    """Read a JSON object with exactly the six :class:`HyperParams` fields."""
    import json

    data = json.loads(Path(path).read_text())
    fields = set(HyperParams.__dataclass_fields__)
    if not isinstance(data, dict) or set(data) != fields:
        got = sorted(data) if isinstance(data, dict) else type(data).__name__
        raise ParameterError(f"{path}: expected keys {sorted(fields)}, got {got}")
    return HyperParams(**data).validate()
