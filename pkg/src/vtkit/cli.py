"""``vtkit`` command line.

Every subcommand checks its inputs before writing anything. Failures print
one line to stderr::

    vtkit: error kind=missing_file exit=3 message="..."

and exit with a code that identifies the failure class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import cnn, container, dataset, search, shallow
from .evaluate import compute_confusion, write_report
from .errors import (
    ContainerError,
    DatasetError,
    ImageFormatError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    VtkitError,
)

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "schema": 4,
    "parameter": 5,
    "diverged": 6,
}

log = logging.getLogger("vtkit")


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _emit_error(kind, message):
    text = json.dumps(" ".join(str(message).split()))
    print(f"vtkit: error kind={kind} exit={EXIT_CODES[kind]} message={text}", file=sys.stderr)
    return EXIT_CODES[kind]


def _need_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CliError("missing_file", f"no such file: {p}")


def _need_parent(*paths):
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise CliError("missing_file", f"output directory does not exist: {Path(p).parent}")


def _manifest(path, cameras=None):
    ds = dataset.read_manifest(path)
    if cameras:
        ds = ds.filter_camera(*cameras)
        if not len(ds):
            raise CliError("parameter", f"{path}: no samples for camera(s) {', '.join(cameras)}")
    missing = [str(s.path) for s in ds.samples if not Path(s.path).is_file()]
    if missing:
        raise CliError("missing_file", f"{path}: {len(missing)} image(s) missing, first {missing[0]}")
    return ds


def _print(**fields):
    print(" ".join(f"{k}={v}" for k, v in fields.items()))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    out = Path(args.out)
    if (out / "manifest.csv").exists() and not args.force:
        raise CliError("parameter", f"{out / 'manifest.csv'} exists; pass --force to overwrite")
    ds = dataset.generate_synthetic(out, args.per_class, args.size, args.seed, args.noise)
    _print(images=len(ds), manifest=out / "manifest.csv")


def cmd_split(args):
    _need_files(args.manifest)
    ds = _manifest(args.manifest, args.camera)
    train, test = dataset.stratified_split(ds, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.write_manifest(train, out / "train.csv")
    dataset.write_manifest(test, out / "test.csv")
    _print(train=len(train), test=len(test), out=out)


def _hyperparams(args):
    hp = cnn.hyperparams_from_file(args.config) if args.config else cnn.SELECTED
    overrides = {
        "n_conv_layers": args.n_conv_layers,
        "n_dense_layers": args.n_dense_layers,
        "input_size": args.input_size,
        "kernel_size": args.kernel_size,
        "n_maps": args.n_maps,
        "learning_rate": args.learning_rate,
    }
    values = {k: getattr(hp, k) for k in overrides}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cnn.HyperParams(**values).validate()


def cmd_train_cnn(args):
    _need_files(args.train, args.test, args.config)
    _need_parent(args.out, args.curve)
    hp = _hyperparams(args)
    cfg = cnn.TrainConfig(args.iterations, args.batch_size, args.eval_every, args.seed, not args.no_augment)
    train_ds = _manifest(args.train, args.camera)
    test_ds = _manifest(args.test, args.camera)
    x_train, y_train = dataset.load_arrays(train_ds, hp.input_size, args.brightness)
    x_test, y_test = dataset.load_arrays(test_ds, hp.input_size, args.brightness)
    net = cnn.build_network(hp, np.random.default_rng(args.seed), args.dropout)
    net, curve = cnn.train(net, (x_train, y_train), (x_test, y_test), cfg,
                           progress=lambda p: log.info("iteration %d loss %.4f accuracy %.4f",
                                                       p.iteration, p.train_loss, p.test_accuracy))
    cnn.save_model(net, args.out)
    curve_path = Path(args.curve) if args.curve else Path(args.out).with_suffix(".curve.csv")
    curve.write_csv(curve_path)
    if len(curve):
        from .plotting import plot_learning_curve

        plot_learning_curve(curve, curve_path.with_suffix(".png"))
    final = curve.points[-1].test_accuracy if len(curve) else float("nan")
    _print(model=args.out, curve=curve_path, iterations=args.iterations, test_accuracy=f"{final:.4f}")


def cmd_train_svm(args):
    _need_files(args.train, args.test)
    _need_parent(args.out)
    train_ds = _manifest(args.train, args.camera)
    images = dataset.load_images(train_ds)
    model = shallow.fit(images, train_ds.labels, args.image_size, args.vocab_size, args.C, args.gamma,
                        seed=args.seed, sample_cap=args.sample_cap)
    shallow.save_model(model, args.out)
    meta = model.classifier.meta
    fields = {"model": args.out, "C": repr(meta["C"]), "gamma": repr(meta["gamma"])}
    if args.test:
        test_ds = _manifest(args.test, args.camera)
        pred = model.predict(dataset.load_images(test_ds))
        fields["test_accuracy"] = f"{float(np.mean(pred == test_ds.labels)):.4f}"
    _print(**fields)


def cmd_search(args):
    _need_files(args.train, args.val)
    _need_parent(args.log, args.best_out)
    if args.space == "default":
        space = search.SearchSpace()
    else:
        _need_files(args.space)
        space = search.SearchSpace.from_file(args.space)
    train_ds = _manifest(args.train, args.camera)
    if args.val:
        val_ds = _manifest(args.val, args.camera)
    else:
        train_ds, val_ds = dataset.stratified_split(train_ds, 0.2, args.seed)
    cfg = cnn.TrainConfig(args.iterations, args.batch_size, max(args.iterations, 1), args.seed,
                          not args.no_augment)
    best, results = search.run_search(
        space, args.budget, cfg,
        dataset.load_images(train_ds), train_ds.labels,
        dataset.load_images(val_ds), val_ds.labels,
        master_seed=args.seed, log_path=args.log, dropout_rate=args.dropout,
        progress=lambda r: log.info("trial %d accuracy %.4f %s", r.trial, r.validation_accuracy, r.hyperparams),
    )
    best_path = Path(args.best_out) if args.best_out else Path(args.log).with_suffix(".best.json")
    best_path.write_text(json.dumps(best.hyperparams.to_dict(), indent=2, sort_keys=True) + "\n")
    from .plotting import plot_search

    plot_search(results, Path(args.log).with_suffix(".png"))
    _print(best_trial=best.trial, val_accuracy=f"{best.validation_accuracy:.4f}", config=best_path)


def _load_any(path):
    _need_files(path)
    tag = container.peek_tag(path)
    if tag == "cnn":
        return tag, cnn.load_model(path)
    if tag == "svm":
        return tag, shallow.load_model(path)
    raise CliError("schema", f"{path}: unsupported model tag {tag!r}")


def _scores(tag, model, images):
    """Class scores per image: softmax probabilities (cnn) or duel vote shares (svm)."""
    if tag == "cnn":
        size = model.hyperparams.input_size
        x = np.stack([dataset.preprocess(img, size) for img in images]) if images else \
            np.zeros((0, *model.input_shape), np.float32)
        return cnn.predict_proba(model, x)
    return model.classifier.vote_shares(model.features(images)) if images else np.zeros((0, 4))


def _predict(tag, model, images):
    if tag == "cnn":
        probs = _scores(tag, model, images)
        return probs.argmax(axis=1), probs
    return model.predict(images), _scores(tag, model, images)


def cmd_eval(args):
    _need_files(args.model, args.manifest)
    tag, model = _load_any(args.model)
    ds = _manifest(args.manifest, args.camera)
    if not len(ds):
        raise CliError("parameter", f"{args.manifest}: manifest is empty")
    pred, probs = _predict(tag, model, dataset.load_images(ds))
    base = Path(args.manifest).resolve().parent
    paths = [Path(os.path.relpath(Path(s.path).resolve(), base)).as_posix() for s in ds.samples]
    report = compute_confusion(ds.labels, pred, model.class_names, paths, probs)
    out = write_report(report, args.report_dir, title=f"{tag} model on {Path(args.manifest).name}")
    if args.gallery:
        gallery = out / "gallery"
        if gallery.exists():
            shutil.rmtree(gallery)
        gallery.mkdir()
        for m, s in zip(report.misclassified, [s for s, t, p in zip(ds.samples, ds.labels, pred) if t != p]):
            shutil.copyfile(s.path, gallery / f"{m.true}_as_{m.predicted}_{Path(s.path).name}")
    _print(accuracy=f"{report.accuracy:.4f}", samples=report.n, errors=len(report.misclassified),
           report=out / "report.txt")


def cmd_predict(args):
    _need_files(args.model, args.image)
    tag, model = _load_any(args.model)
    image = dataset.decode_image(args.image)
    pred, probs = _predict(tag, model, [image])
    print(model.class_names[int(pred[0])], " ".join(f"{p:.6f}" for p in probs[0]))


def cmd_dump_features(args):
    _need_files(args.model, args.image)
    tag, model = _load_any(args.model)
    if tag != "cnn":
        raise CliError("schema", f"{args.model}: feature maps need a cnn model, got {tag!r}")
    image = dataset.preprocess(dataset.decode_image(args.image), model.hyperparams.input_size)
    try:
        maps = cnn.dump_feature_maps(model, image, args.layer)
    except IndexError as exc:
        raise CliError("parameter", str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        dataset.write_image(out / f"layer{args.layer}_map{i:02d}.pgm", m)
    from .plotting import plot_feature_maps

    plot_feature_maps(maps, out / f"layer{args.layer}_grid.png", title=f"conv layer {args.layer}")
    _print(maps=len(maps), out=out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="vtkit", description="Vehicle-type classification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
        sp.set_defaults(func=func)
        return sp

    def cameras(sp):
        sp.add_argument("--camera", action="append", help="keep only samples from this camera_id (repeatable)")

    sp = command("generate", cmd_generate, "render a synthetic labelled dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    sp = command("split", cmd_split, "stratified train/test split of a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--test-fraction", type=float, default=0.10)
    sp.add_argument("--out", required=True)
    cameras(sp)

    sp = command("train-cnn", cmd_train_cnn, "train the convolutional classifier")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--config", help="JSON file with hyperparameters")
    sp.add_argument("--n-conv-layers", type=int)
    sp.add_argument("--n-dense-layers", type=int)
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--kernel-size", type=int)
    sp.add_argument("--n-maps", type=int)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--iterations", type=int, default=30_000)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--eval-every", type=int, default=500)
    sp.add_argument("--dropout", type=float, default=0.5)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--brightness", choices=("standardize", "equalize"), default="standardize")
    sp.add_argument("--out", required=True)
    sp.add_argument("--curve", help="learning-curve CSV (a PNG is written next to it)")
    cameras(sp)

    sp = command("train-svm", cmd_train_svm, "train the dense-SIFT / bag-of-words / SVM classifier")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test")
    sp.add_argument("--vocab-size", type=int, default=1000)
    sp.add_argument("--C", type=float, help="fix C (otherwise grid-selected)")
    sp.add_argument("--gamma", type=float, help="fix gamma (otherwise grid-selected)")
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--sample-cap", type=int, default=200_000)
    sp.add_argument("--out", required=True)
    cameras(sp)

    sp = command("search", cmd_search, "random search over CNN hyperparameters")
    sp.add_argument("--space", default="default", help="'default' or a JSON file")
    sp.add_argument("--budget", type=int, default=50)
    sp.add_argument("--log", required=True, help="trial log CSV; an existing log is resumed")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", help="validation manifest (default: 20%% of --train)")
    sp.add_argument("--iterations", type=int, default=1000, help="training iterations per trial")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--dropout", type=float, default=0.5)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--best-out", help="JSON file for the winning configuration")
    cameras(sp)

    sp = command("eval", cmd_eval, "evaluate a model on a manifest and write reports")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--report-dir", required=True)
    sp.add_argument("--gallery", action="store_true", help="copy misclassified images into the report")
    cameras(sp)

    sp = command("predict", cmd_predict, "classify one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)

    sp = command("dump-features", cmd_dump_features, "write conv-layer feature maps as PGM files")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--layer", type=int, required=True)
    sp.add_argument("--out", required=True)
    return p


def _kind(exc):
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, (ContainerError, DatasetError, ImageFormatError, json.JSONDecodeError)):
        return "schema"
    if isinstance(exc, NonFiniteError):
        return "diverged"
    if isinstance(exc, (ParameterError, ShapeError, VtkitError)):
        return "parameter"
    return "internal"


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _emit_error(exc.kind, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, VtkitError, OSError, json.JSONDecodeError) as exc:
        return _emit_error(_kind(exc), exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
