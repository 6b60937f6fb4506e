import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtkit.evaluate import compute_confusion, format_report, write_report
from vtkit.errors import ShapeError

NAMES = ("bus", "truck", "van", "small_car")


def test_all_correct_is_diagonal():
    labels = ["bus", "truck", "van", "small_car", "van"]
    r = compute_confusion(labels, labels)
    assert r.accuracy == 1.0
    np.testing.assert_array_equal(r.confusion, np.diag([1, 1, 2, 1]))
    assert not r.misclassified and not r.undefined


def test_two_sample_example():
    r = compute_confusion(["bus", "van"], ["van", "van"])
    assert r.accuracy == 0.5
    assert r.confusion[0, 2] == 1 and r.confusion[2, 2] == 1 and r.confusion.sum() == 2
    assert r.misclassified[0].true == "bus" and r.misclassified[0].predicted == "van"


def test_zero_denominators_flagged():
    r = compute_confusion(["bus", "van"], ["van", "van"])
    assert r.precision[0] == 0.0 and "precision:bus" in r.undefined
    assert "recall:truck" in r.undefined and "precision:truck" in r.undefined
    assert r.recall[0] == 0.0 and "recall:bus" not in r.undefined
    assert r.precision[2] == 0.5 and r.recall[2] == 1.0


def test_length_mismatch():
    with pytest.raises(ShapeError):
        compute_confusion(["bus"], ["bus", "van"])


def test_chance_level_random_labels():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 4, 10_000), rng.integers(0, 4, 10_000)
    assert abs(compute_confusion(t, p).accuracy - 0.25) <= 0.02


def test_constant_predictor_on_balanced_set():
    t = np.repeat(np.arange(4), 25)
    r = compute_confusion(t, np.zeros(100, int))
    assert r.accuracy == 0.25
    assert r.confusion[:, 0].tolist() == [25] * 4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_accuracy_is_trace_over_sum(pairs):
    t, p = zip(*pairs)
    r = compute_confusion(t, p)
    assert r.n == len(pairs)
    assert r.accuracy == np.trace(r.confusion) / r.confusion.sum()
    assert len(r.misclassified) == r.n - np.trace(r.confusion)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), np.bincount(t, minlength=4))


def test_written_report(tmp_path):
    r = compute_confusion(["bus", "van", "truck"], ["bus", "bus", "truck"], NAMES,
                          paths=["a.ppm", "b.ppm", "c.ppm"],
                          probabilities=[[1, 0, 0, 0], [0.6, 0.1, 0.2, 0.1], [0, 1, 0, 0]])
    write_report(r, tmp_path / "rep", title="demo")
    rep = tmp_path / "rep"
    assert {p.name for p in rep.iterdir()} == {"report.txt", "summary.csv", "confusion.csv", "per_class.csv",
                                               "misclassified.csv", "confusion.png"}
    rows = list(csv.reader(open(rep / "misclassified.csv")))
    assert rows[0] == ["path", "true", "predicted", "p_bus", "p_truck", "p_van", "p_small_car"]
    assert rows[1] == ["b.ppm", "van", "bus", "0.600000", "0.100000", "0.200000", "0.100000"]
    conf = list(csv.reader(open(rep / "confusion.csv")))
    assert conf[3] == ["van", "1", "0", "0", "0"]
    summary = list(csv.reader(open(rep / "summary.csv")))
    assert float(summary[1][1]) == pytest.approx(2 / 3)
    text = (rep / "report.txt").read_text()
    assert text == format_report(r, "demo") and "b.ppm: van -> bus" in text


def test_report_files_are_reproducible(tmp_path):
    r = compute_confusion([0, 1, 2, 3], [0, 1, 3, 3])
    write_report(r, tmp_path / "a")
    write_report(r, tmp_path / "b")
    for name in ("report.txt", "summary.csv", "confusion.csv", "per_class.csv", "misclassified.csv",
                 "confusion.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
