"""The ten acceptance checks. Each prints one ``[ACCEPT] <n> PASS|FAIL`` line."""

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import conv2d_loops, matmul_loops, maxpool_scan, svm_dual_projected_gradient
from test_bow import blobs
from test_nn import mini_network
from test_svm import XOR_X, XOR_Y, blobs4, small_problem
from vtkit import bow, cli, cnn, dataset, nn, search, shallow, svm

# end-to-end gate configuration
GATE_SEEDS = (0, 1, 2, 3, 4)
GATE_PER_CLASS = 500
GATE_SIZE = 64
GATE_ITERATIONS = 2000
GATE_EVAL_EVERY = 100
GATE_LR = 0.02
GATE_DROPOUT = 0.25
GATE_VOCAB = 200


def test_1_gradient_check_mini_topology():
    # float32 backprop against float64 central differences; entries below 1e-3 of the
    # largest gradient are compared on that absolute scale
    errors = []
    for seed in range(10):
        net = mini_network(seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
        labels = rng.integers(0, 4, 4)
        errors.append(nn.gradient_check(net, x, labels, scale_floor=1e-3))
    ok = max(errors) < 1e-3
    record_acceptance(1, ok, f"gradient check max rel err {max(errors):.2e} over 10 seeds (< 1e-3)")
    assert ok


def test_2_forward_passes_match_loop_oracles():
    worst = {"conv": 0.0, "pool": 0.0, "dense": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        b, c, m = (int(v) for v in rng.integers(1, [3, 4, 5]))
        k = int(rng.choice([1, 3, 5]))
        h, w = (int(v) for v in rng.integers(k, 9, size=2))
        x, kern, bias = rng.standard_normal((b, c, h, w)), rng.standard_normal((m, c, k, k)), rng.standard_normal(m)
        worst["conv"] = max(worst["conv"], np.abs(nn.conv2d_forward(x, kern, bias) - conv2d_loops(x, kern, bias)).max())

        xp = rng.standard_normal((b, c, 2 * h, 2 * w)).astype(np.float32)
        worst["pool"] = max(worst["pool"], np.abs(nn.maxpool2_forward(xp)[0] - maxpool_scan(xp)).max())

        n_in, n_out = (int(v) for v in rng.integers(1, 20, size=2))
        xd, wd, bd = rng.standard_normal((b, n_in)), rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out)
        worst["dense"] = max(worst["dense"], np.abs(nn.dense_forward(xd, wd, bd) - matmul_loops(xd, wd, bd)).max())
    ok = max(worst.values()) <= 1e-6
    detail = " ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance(2, ok, f"max abs diff vs loop oracles on 100 instances each: {detail} (<= 1e-6)")
    assert ok


def test_5_sampler_fidelity():
    space = search.SearchSpace()
    rng = np.random.default_rng(0)
    hps = [search.sample(space, rng) for _ in range(100_000)]
    in_range = all(
        h.n_conv_layers in cnn.N_CONV_LAYERS and h.n_dense_layers in cnn.N_DENSE_LAYERS
        and h.input_size in cnn.INPUT_SIZES and h.kernel_size in cnn.KERNEL_SIZES
        and h.n_maps in cnn.MAP_COUNTS and 1e-5 <= h.learning_rate <= 1e-1
        for h in hps
    )
    u = np.log10([h.learning_rate for h in hps])
    quartiles = [np.mean((u >= lo) & (u < lo + 1)) for lo in (-5, -4, -3, -2)]
    quartiles[-1] += np.mean(u == -1)
    worst_q = max(abs(q - 0.25) for q in quartiles)
    worst_d = 0.0
    for field, values in (("n_conv_layers", cnn.N_CONV_LAYERS), ("n_dense_layers", cnn.N_DENSE_LAYERS),
                          ("input_size", cnn.INPUT_SIZES), ("kernel_size", cnn.KERNEL_SIZES),
                          ("n_maps", cnn.MAP_COUNTS)):
        drawn = np.array([getattr(h, field) for h in hps])
        for v in values:
            worst_d = max(worst_d, abs(np.mean(drawn == v) - 1 / len(values)))
    ok = in_range and worst_q <= 0.01 and worst_d <= 0.01
    record_acceptance(5, ok, f"1e5 draws in range={in_range}, lr quartile dev {worst_q:.4f}, "
                             f"discrete dev {worst_d:.4f} (<= 0.01)")
    assert ok


def test_6_svm_solver_audit():
    worst_rel, violations = 0.0, 0
    for seed in range(20):
        x, y, C, gamma = small_problem(seed)
        m = svm.smo_train(x, y, C=C, gamma=gamma, tol=1e-3)
        gram = svm.rbf_gram(x, x, gamma)
        _, ref = svm_dual_projected_gradient(gram, y, C)
        worst_rel = max(worst_rel, abs(svm.dual_objective(m.alpha, y, gram) - ref) / abs(ref))
        violations += len(svm.kkt_violations(m, x, y, tol=1e-3))
    xor = svm.smo_train(XOR_X, XOR_Y, C=100, gamma=1.0)
    xor_acc = np.mean(np.sign(xor.decision(XOR_X)) == XOR_Y)
    bx, by = blobs4(0)
    blob_acc = np.mean(svm.train_multiclass(bx, by, C=10, gamma=0.5, class_names=("a", "b", "c", "d")).predict(bx)
                       == by)
    ok = worst_rel <= 1e-3 and violations == 0 and xor_acc == 1.0 and blob_acc == 1.0
    record_acceptance(6, ok, f"dual rel diff {worst_rel:.1e} (<= 1e-3), KKT violations {violations}, "
                             f"XOR acc {xor_acc:.2f}, 4-blob acc {blob_acc:.2f}")
    assert ok


def test_7_kmeans_monotone_and_blob_recovery():
    monotone = 0
    for seed in range(50):
        x = np.random.default_rng(seed).standard_normal((300, 8))
        h = np.array(bow.kmeans_fit(x, 12, max_iter=50, tol=0, rng=np.random.default_rng(seed)).history)
        monotone += bool((np.diff(h) <= 1e-9 * h[:-1]).all())
    x, centers = blobs(2)
    res = bow.kmeans_fit(x, 3, rng=np.random.default_rng(2))
    dist = max(np.linalg.norm(res.centroids - c, axis=1).min() for c in centers)
    ok = monotone == 50 and dist < 0.1
    record_acceptance(7, ok, f"inertia non-increasing in {monotone}/50 runs, 3-blob center error {dist:.4f} (< 0.1)")
    assert ok


def _cli_pipeline(root):
    data, split = root / "data", root / "split"
    steps = [
        ["generate", "--out", data, "--per-class", 10, "--size", 64, "--seed", 7],
        ["split", "--manifest", data / "manifest.csv", "--out", split, "--seed", 7],
        ["train-cnn", "--train", split / "train.csv", "--test", split / "test.csv", "--n-conv-layers", 1,
         "--n-dense-layers", 0, "--input-size", 64, "--kernel-size", 5, "--n-maps", 16, "--learning-rate", 0.01,
         "--iterations", 20, "--eval-every", 5, "--batch-size", 8, "--seed", 7,
         "--out", root / "cnn.vtk", "--curve", root / "curve.csv"],
        ["eval", "--model", root / "cnn.vtk", "--manifest", split / "test.csv", "--report-dir", root / "report"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0


def test_8_pipeline_is_deterministic(tmp_path):
    _cli_pipeline(tmp_path / "a")
    _cli_pipeline(tmp_path / "b")
    files = ["curve.csv", "cnn.vtk", "split/train.csv", "split/test.csv"]
    files += [f"report/{p.name}" for p in sorted((tmp_path / "a" / "report").iterdir())]
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differing
    record_acceptance(8, ok, f"{len(files)} pipeline outputs compared, differing: {differing or 'none'}")
    assert ok


def test_10_round_trips_are_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    images = [dataset.render_vehicle(dataset.CLASS_NAMES[i % 4], 64, "cam1", rng) for i in range(130)]
    labels = np.arange(130) % 4
    train_imgs, held_out = images[:80], images[80:]

    hp = cnn.HyperParams(1, 1, 64, 5, 16, 0.01)
    x = np.stack([dataset.preprocess(im, 64) for im in train_imgs])
    net, _ = cnn.train(cnn.build_network(hp, rng), (x, labels[:80]), (x[:0], labels[:0]),
                       cnn.TrainConfig(30, 16, 30, 0))
    cnn.save_model(net, tmp_path / "cnn.vtk")
    held = np.stack([dataset.preprocess(im, 64) for im in held_out])
    cnn_ok = cnn.predict_proba(cnn.load_model(tmp_path / "cnn.vtk"), held).tobytes() == \
        cnn.predict_proba(net, held).tobytes()

    model = shallow.fit(train_imgs, labels[:80], image_size=64, vocab_size=20, C=10, gamma=0.05)
    bow.save_vocabulary(model.vocabulary, tmp_path / "vocab.vtk")
    vocab = bow.load_vocabulary(tmp_path / "vocab.vtk")
    descs = [shallow.descriptors_for(im, 64) for im in held_out]
    vocab_ok = all(bow.encode(d, vocab, (64, 64)).tobytes() == bow.encode(d, model.vocabulary, (64, 64)).tobytes()
                   for d in descs)
    shallow.save_model(model, tmp_path / "svm.vtk")
    loaded = shallow.load_model(tmp_path / "svm.vtk")
    scores, ref = (m.classifier.decision_matrix(m.features(held_out)) for m in (loaded, model))
    svm_ok = (all(scores[pair].tobytes() == ref[pair].tobytes() for pair in ref)
              and (loaded.predict(held_out) == model.predict(held_out)).all())
    ok = cnn_ok and vocab_ok and svm_ok
    record_acceptance(10, ok, f"bitwise on 50 held-out images: cnn {cnn_ok}, vocabulary {vocab_ok}, svm {svm_ok}")
    assert ok


# ---------------------------------------------------------------------------
# end-to-end gates on generated data (3, 4, 9)
# ---------------------------------------------------------------------------


def _gate_run(root, seed):
    ds = dataset.generate_synthetic(root / "data", GATE_PER_CLASS, GATE_SIZE, seed=seed)
    train, test = dataset.stratified_split(ds, 0.10, seed=seed)

    x_tr, y_tr = dataset.load_arrays(train, GATE_SIZE)
    x_te, y_te = dataset.load_arrays(test, GATE_SIZE)
    hp = cnn.HyperParams(2, 1, GATE_SIZE, 5, 16, GATE_LR)
    net = cnn.build_network(hp, np.random.default_rng(seed), dropout_rate=GATE_DROPOUT)
    cfg = cnn.TrainConfig(GATE_ITERATIONS, 32, GATE_EVAL_EVERY, seed)
    _, curve = cnn.train(net, (x_tr, y_tr), (x_te, y_te), cfg)
    at = {p.iteration: p.test_accuracy for p in curve.points}

    model = shallow.fit(dataset.load_images(train), train.labels, image_size=GATE_SIZE,
                        vocab_size=GATE_VOCAB, seed=seed)
    svm_acc = float(np.mean(model.predict(dataset.load_images(test)) == test.labels))
    return {"cnn": at[GATE_ITERATIONS], "cnn_half": at[GATE_ITERATIONS // 2], "svm": svm_acc}


@pytest.fixture(scope="module")
def gate_results(tmp_path_factory):
    return {s: _gate_run(tmp_path_factory.mktemp(f"gate{s}"), s) for s in GATE_SEEDS}


def _per_seed(results, key):
    return ", ".join(f"{results[s][key]:.3f}" for s in GATE_SEEDS)


@pytest.mark.slow
def test_3_cnn_gate(gate_results):
    ok = all(r["cnn"] >= 0.95 for r in gate_results.values())
    record_acceptance(3, ok, f"CNN test accuracy per seed [{_per_seed(gate_results, 'cnn')}] (>= 0.95), "
                             f"{GATE_ITERATIONS} iterations")
    assert ok


@pytest.mark.slow
def test_4_shallow_gate(gate_results):
    above = all(r["svm"] >= 0.90 for r in gate_results.values())
    below = sum(r["svm"] < r["cnn"] for r in gate_results.values())
    ok = above and below >= 4
    record_acceptance(4, ok, f"SVM test accuracy per seed [{_per_seed(gate_results, 'svm')}] (>= 0.90), "
                             f"below CNN in {below}/5 seeds (>= 4)")
    assert ok


@pytest.mark.slow
def test_9_learning_curve_shape(gate_results):
    good = sum(r["cnn_half"] >= 0.9 * r["cnn"] for r in gate_results.values())
    ok = good >= 4
    record_acceptance(9, ok, f"accuracy at half budget [{_per_seed(gate_results, 'cnn_half')}] >= 0.9 x final "
                             f"in {good}/5 seeds (>= 4)")
    assert ok
