"""Shallow pipeline: grayscale -> dense SIFT -> spatial-pyramid BoW -> one-vs-one RBF SVM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bow, container, svm
from .dataset import CLASS_NAMES, resize_bilinear
from .errors import ContainerFormatError
from .sift import BIN_SIZES, STRIDE, dense_sift, to_grayscale


@dataclass
class ShallowModel:
    vocabulary: bow.Vocabulary
    classifier: svm.MulticlassSvm
    image_size: int
    stride: int = STRIDE
    bin_sizes: tuple = BIN_SIZES
    meta: dict = field(default_factory=dict)

    @property
    def class_names(self):
        return self.classifier.class_names

    def features(self, images):
        return encode_images(images, self.vocabulary, self.image_size, self.stride, self.bin_sizes)

    def predict(self, images):
        return self.classifier.predict(self.features(images))


def descriptors_for(image, image_size, stride=STRIDE, bin_sizes=BIN_SIZES):
    gray = to_grayscale(resize_bilinear(image, image_size))
    return dense_sift(gray, stride, bin_sizes)


def encode_images(images, vocab, image_size, stride=STRIDE, bin_sizes=BIN_SIZES):
    return np.stack([
        bow.encode(descriptors_for(img, image_size, stride, bin_sizes), vocab, (image_size, image_size))
        for img in images
    ])


def fit(images, labels, image_size=64, vocab_size=bow.DEFAULT_K, C=None, gamma=None, grid=None,
        seed=0, sample_cap=200_000, tol=1e-3, class_names=CLASS_NAMES):
    """Train vocabulary and SVM. With ``C`` and ``gamma`` both given no grid search runs."""
    descs = [descriptors_for(img, image_size) for img in images]
    vocab = bow.build_vocabulary(np.concatenate([d.vectors for d in descs]), vocab_size,
                                 sample_cap=sample_cap, seed=seed)
    feats = np.stack([bow.encode(d, vocab, (image_size, image_size)) for d in descs])
    labels = np.asarray(labels)
    if C is not None and gamma is not None:
        clf = svm.train_multiclass(feats, labels, C, gamma, tol, class_names)
    else:
        if C is not None or gamma is not None:
            # pin the given value and search only the other one
            base = grid or svm.default_grid(feats.shape[1])
            cs = [C] if C is not None else list(dict.fromkeys(c for c, _ in base))
            gs = [gamma] if gamma is not None else list(dict.fromkeys(g for _, g in base))
            grid = [(c, g) for c in cs for g in gs]
        clf = svm.select_and_train(feats, labels, grid, seed=seed, class_names=class_names, tol=tol)
    return ShallowModel(vocab, clf, image_size, meta={"seed": seed, "vocab_size": vocab_size})


def save_model(model, path):
    extra = {
        "image_size": str(model.image_size),
        "stride": str(model.stride),
        "bin_sizes": ",".join(map(str, model.bin_sizes)),
        "vocab_size": str(model.vocabulary.k),
    }
    c = svm.to_container(model.classifier, extra, {"vocab.centroids": model.vocabulary.centroids})
    container.write_container(path, c)


def load_model(path):
    c = container.read_container(path, expect_tag="svm")
    try:
        centroids = c.tensors["vocab.centroids"].copy()
        image_size = int(c.metadata["image_size"])
        stride = int(c.metadata["stride"])
        bin_sizes = tuple(int(v) for v in c.metadata["bin_sizes"].split(","))
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"incomplete shallow-pipeline metadata: {exc}") from None
    return ShallowModel(bow.Vocabulary(centroids), svm.from_container(c), image_size, stride, bin_sizes)
