"""Random hyperparameter search over the CNN configuration space."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cnn
from .dataset import preprocess
from .errors import NonFiniteError, ParameterError

log = logging.getLogger(__name__)

LOG_HEADER = ["trial", "n_conv", "n_dense", "input_size", "kernel", "maps", "lr", "val_accuracy", "seconds"]


@dataclass(frozen=True)
class SearchSpace:
    n_conv_layers: tuple = cnn.N_CONV_LAYERS
    n_dense_layers: tuple = cnn.N_DENSE_LAYERS
    input_sizes: tuple = cnn.INPUT_SIZES
    kernel_sizes: tuple = cnn.KERNEL_SIZES
    map_counts: tuple = cnn.MAP_COUNTS
    lr_range: tuple = cnn.LEARNING_RATE_RANGE

    def __post_init__(self):
        full = {
            "n_conv_layers": cnn.N_CONV_LAYERS,
            "n_dense_layers": cnn.N_DENSE_LAYERS,
            "input_sizes": cnn.INPUT_SIZES,
            "kernel_sizes": cnn.KERNEL_SIZES,
            "map_counts": cnn.MAP_COUNTS,
        }
        for name, allowed in full.items():
            values = getattr(self, name)
            if not values or not set(values) <= set(allowed):
                raise ParameterError(f"{name}={values} must be a non-empty subset of {allowed}")
        lo, hi = self.lr_range
        if not (0 < lo < hi) or lo < cnn.LEARNING_RATE_RANGE[0] or hi > cnn.LEARNING_RATE_RANGE[1]:
            raise ParameterError(f"lr_range {self.lr_range} must satisfy "
                                 f"{cnn.LEARNING_RATE_RANGE[0]} <= lo < hi <= {cnn.LEARNING_RATE_RANGE[1]}")

    @classmethod
    def from_file(cls, path):
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__) if isinstance(data, dict) else {"<not an object>"}
        if unknown:
            raise ParameterError(f"{path}: unknown search-space keys {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in data.items()})

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in self.__dataclass_fields__}


def sample(space, rng):
    """One configuration: discrete dimensions uniform, learning rate log-uniform.

    Draw order is fixed (conv, dense, size, kernel, maps, lr). Draws whose
    input size cannot survive the pooling depth are rejected and redrawn.
    """
    lo, hi = math.log10(space.lr_range[0]), math.log10(space.lr_range[1])

    def pick(values):
        return int(values[int(rng.integers(len(values)))])

    while True:
        n_conv = pick(space.n_conv_layers)
        n_dense = pick(space.n_dense_layers)
        size = pick(space.input_sizes)
        kernel = pick(space.kernel_sizes)
        maps = pick(space.map_counts)
        lr = float(10.0 ** rng.uniform(lo, hi))
        lr = min(max(lr, space.lr_range[0]), space.lr_range[1])
        if size // 2 ** n_conv >= 1:
            return cnn.HyperParams(n_conv, n_dense, size, kernel, maps, lr)


@dataclass
class TrialResult:
    trial: int
    hyperparams: cnn.HyperParams
    validation_accuracy: float
    seconds: float
    seed: int
    failed: bool = False

    def row(self):
        hp = self.hyperparams
        return [self.trial, hp.n_conv_layers, hp.n_dense_layers, hp.input_size, hp.kernel_size,
                hp.n_maps, repr(hp.learning_rate), repr(self.validation_accuracy), f"{self.seconds:.3f}"]


def trial_rng(master_seed, trial):
    return np.random.default_rng([master_seed, trial])


def _read_log(path):
    done = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_HEADER:
            raise ParameterError(f"{path}: not a trial log (header {header})")
        for row in reader:
            if len(row) != len(LOG_HEADER):
                continue  # torn final line from an interrupted write
            t = int(row[0])
            hp = cnn.HyperParams(int(row[1]), int(row[2]), int(row[3]), int(row[4]), int(row[5]), float(row[6]))
            done[t] = (hp, float(row[7]), float(row[8]))
    return done


def run_search(space, budget, train_cfg, train_images, train_labels, val_images, val_labels,
               master_seed=0, log_path=None, dropout_rate=0.5, progress=None):
    """Train ``budget`` sampled configurations and keep the best by validation accuracy.

    Each trial samples its configuration and training seed from a private RNG
    derived from ``(master_seed, trial)``. With ``log_path`` every finished
    trial is appended to a CSV log; trials already present in the log are
    replayed instead of retrained, so an interrupted search resumes. Ties go
    to the lowest trial index.
    """
    if budget < 1:
        raise ParameterError(f"budget must be >= 1, got {budget}")
    done = {}
    if log_path is not None:
        log_path = Path(log_path)
        if log_path.exists() and log_path.stat().st_size:
            done = _read_log(log_path)
        else:
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)

    prepared = {}

    def arrays(size):
        if size not in prepared:
            prepared[size] = (
                np.stack([preprocess(img, size) for img in train_images]),
                np.stack([preprocess(img, size) for img in val_images]),
            )
        return prepared[size]

    results = []
    for t in range(budget):
        rng = trial_rng(master_seed, t)
        hp = sample(space, rng)
        seed = int(rng.integers(2**31))
        if t in done:
            logged_hp, acc, secs = done[t]
            same = (logged_hp.n_conv_layers, logged_hp.n_dense_layers, logged_hp.input_size,
                    logged_hp.kernel_size, logged_hp.n_maps) == \
                   (hp.n_conv_layers, hp.n_dense_layers, hp.input_size, hp.kernel_size, hp.n_maps)
            if not same or not math.isclose(logged_hp.learning_rate, hp.learning_rate, rel_tol=1e-12):
                raise ParameterError(f"trial log entry {t} does not match seed {master_seed}; wrong log?")
            results.append(TrialResult(t, hp, acc, secs, seed))
            continue
        start = time.perf_counter()
        xt, xv = arrays(hp.input_size)
        failed = False
        try:
            net = cnn.build_network(hp, np.random.default_rng(seed), dropout_rate)
            cfg = cnn.TrainConfig(train_cfg.max_iterations, train_cfg.batch_size,
                                  max(train_cfg.max_iterations, 1), seed, train_cfg.augment)
            net, _ = cnn.train(net, (xt, train_labels), (xv, val_labels), cfg)
            acc = cnn.accuracy(net, xv, val_labels)
        except NonFiniteError as exc:
            log.warning("trial %d diverged: %s", t, exc)
            acc, failed = 0.0, True
        result = TrialResult(t, hp, acc, time.perf_counter() - start, seed, failed)
        results.append(result)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(result.row())
        if progress is not None:
            progress(result)
    best = max(results, key=lambda r: (r.validation_accuracy, -r.trial))
    return best, results
