import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import resize_points
from vtkit import dataset as ds_mod
from vtkit.dataset import LabeledDataset, LabeledSample
from vtkit.errors import (
    DatasetError,
    ImageFormatError,
    ImageSizeMismatchError,
    ParameterError,
    TruncatedImageError,
)


def test_decode_p6_exact_values():
    data = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153])
    img = ds_mod.decode_image_bytes(data)
    assert img.shape == (3, 2, 2) and img.dtype == np.float32
    assert img[0, 0, 0] == 1.0 and img[1, 0, 0] == 0.0
    assert img[1, 0, 1] == 1.0 and img[2, 1, 0] == 1.0
    np.testing.assert_array_equal(img[:, 1, 1], np.float32([51, 102, 153]) / np.float32(255))


def test_decode_p5_replicates_channels():
    data = b"P5\n# comment\n3 1\n255\n" + bytes([0, 128, 255])
    img = ds_mod.decode_image_bytes(data)
    assert img.shape == (3, 1, 3)
    np.testing.assert_array_equal(img[0], img[1])
    np.testing.assert_array_equal(img[0], img[2])


def test_decode_errors_are_distinct():
    good = b"P6\n2 2\n255\n" + bytes(12)
    with pytest.raises(TruncatedImageError):
        ds_mod.decode_image_bytes(good[:-1])
    with pytest.raises(TruncatedImageError):
        ds_mod.decode_image_bytes(b"P6\n2 2")
    with pytest.raises(ImageSizeMismatchError):
        ds_mod.decode_image_bytes(good + b"\0")
    with pytest.raises(ImageFormatError):
        ds_mod.decode_image_bytes(b"\x89PNG\r\n")
    with pytest.raises(ImageFormatError):
        ds_mod.decode_image_bytes(b"P6\n2 2\n65535\n" + bytes(24))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**31))
def test_codec_round_trips_8bit(h, w, gray, seed):
    raw = np.random.default_rng(seed).integers(0, 256, (h, w) if gray else (3, h, w), dtype=np.uint8)
    image = raw.astype(np.float32) / 255
    back = ds_mod.decode_image_bytes(ds_mod.encode_image(image))
    expect = np.broadcast_to(raw, (3, h, w)) if gray else raw
    np.testing.assert_array_equal(ds_mod.to_uint8(back), expect)


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((3, 7, 7)).astype(np.float32)
    np.testing.assert_array_equal(ds_mod.resize_bilinear(img, 7), img)
    flat = np.full((3, 5, 9), 0.3, np.float32)
    for t in (1, 4, 13):
        np.testing.assert_allclose(ds_mod.resize_bilinear(flat, t), 0.3, atol=1e-6)


def test_resize_2_to_4_matches_hand_oracle():
    img = np.array([[[0.0, 1.0], [0.5, 0.25]]], np.float32).repeat(3, axis=0)
    out = ds_mod.resize_bilinear(img, 4)
    # first row by hand: sample x at -0.25, 0.25, 0.75, 1.25 -> clamp to [0, 1]
    np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)
    np.testing.assert_allclose(out, resize_points(img, 4, 4), atol=1e-6)


@pytest.mark.parametrize("shape,target", [((3, 48, 64), 32), ((3, 10, 7), 23), ((3, 96, 96), 64)])
def test_resize_matches_pointwise_oracle(shape, target):
    img = np.random.default_rng(1).random(shape).astype(np.float32)
    np.testing.assert_allclose(ds_mod.resize_bilinear(img, target), resize_points(img, target, target), atol=1e-6)


def test_resize_letterbox_and_errors():
    img = np.ones((3, 30, 60), np.float32)
    out = ds_mod.resize_bilinear(img, 20, letterbox=True)
    assert out.shape == (3, 20, 20)
    assert out[:, :5].max() == 0 and out[:, 15:].max() == 0 and out[:, 5:15].min() == 1
    with pytest.raises(ParameterError):
        ds_mod.resize_bilinear(img, 0)


def test_normalize_moments_and_flat():
    img = np.random.default_rng(2).random((3, 16, 16))
    out = ds_mod.normalize_brightness(img)
    assert abs(out.mean()) <= 1e-5 and abs(out.std() - 1) <= 1e-4
    assert not ds_mod.normalize_brightness(np.full((3, 4, 4), 0.4)).any()


def test_normalize_affine_invariance_20_images():
    rng = np.random.default_rng(3)
    for _ in range(20):
        img = rng.random((3, 12, 12))
        a, b = rng.uniform(0.1, 5), rng.uniform(-2, 2)
        np.testing.assert_allclose(ds_mod.normalize_brightness(a * img + b), ds_mod.normalize_brightness(img),
                                   atol=1e-4)


def test_equalize_option():
    img = np.random.default_rng(4).random((3, 8, 8)) ** 3
    out = ds_mod.normalize_brightness(img, "equalize")
    assert abs(out.mean()) <= 1e-5
    np.testing.assert_allclose(out, ds_mod.normalize_brightness(np.sqrt(img), "equalize"), atol=1e-6)
    with pytest.raises(ParameterError):
        ds_mod.normalize_brightness(img, "gamma")


def make_ds(counts, cameras=("cam1",)):
    samples = []
    for name, n in zip(ds_mod.CLASS_NAMES, counts):
        samples += [LabeledSample(f"{name}_{i}.ppm", name, cameras[i % len(cameras)]) for i in range(n)]
    return LabeledDataset(samples)


def test_split_40_30_20_10():
    train, test = ds_mod.stratified_split(make_ds((40, 30, 20, 10)), 0.10, seed=0)
    assert list(test.class_counts.values()) == [4, 3, 2, 1]
    assert len(train) == 90


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_split_partition_and_proportions(seed):
    ds = make_ds((40, 31, 25, 15))
    train, test = ds_mod.stratified_split(ds, 0.10, seed=seed)
    assert sorted(s.path for s in train.samples + test.samples) == sorted(s.path for s in ds.samples)
    assert not {s.path for s in train} & {s.path for s in test}
    for name, n in ds.class_counts.items():
        assert abs(test.class_counts[name] - n * 0.10) <= 0.5
    again = ds_mod.stratified_split(ds, 0.10, seed=seed)
    assert again[1].samples == test.samples


def test_split_seed_changes_partition():
    ds = make_ds((40, 30, 20, 10))
    a = ds_mod.stratified_split(ds, 0.1, seed=1)[1]
    b = ds_mod.stratified_split(ds, 0.1, seed=2)[1]
    assert a.samples != b.samples


def test_split_class_too_small():
    with pytest.raises(DatasetError, match="van"):
        ds_mod.stratified_split(make_ds((40, 30, 9, 10)), 0.10)


def test_manifest_round_trip_and_alias(tmp_path):
    (tmp_path / "sub").mkdir()
    text = "path,label,camera_id\nsub/a.ppm,normal_vehicle,cam2\nb.ppm,bus,\n"
    (tmp_path / "m.csv").write_text(text)
    ds = ds_mod.read_manifest(tmp_path / "m.csv")
    assert [s.label for s in ds] == ["small_car", "bus"]
    assert ds.samples[0].path == tmp_path / "sub" / "a.ppm"
    ds_mod.write_manifest(ds, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_text() == "path,label,camera_id\nsub/a.ppm,small_car,cam2\nb.ppm,bus,\n"


def test_manifest_errors(tmp_path):
    (tmp_path / "bad_header.csv").write_text("file,label\n")
    with pytest.raises(DatasetError, match="header"):
        ds_mod.read_manifest(tmp_path / "bad_header.csv")
    (tmp_path / "bad_label.csv").write_text("path,label,camera_id\na.ppm,tractor,\n")
    with pytest.raises(DatasetError, match="tractor"):
        ds_mod.read_manifest(tmp_path / "bad_label.csv")


def test_filter_camera_and_counts():
    ds = make_ds((4, 4, 4, 4), cameras=("cam1", "cam2"))
    one = ds.filter_camera("cam1")
    assert len(one) == 8 and set(s.camera_id for s in one) == {"cam1"}
    assert one.class_counts == {"bus": 2, "truck": 2, "van": 2, "small_car": 2}
    assert ds.labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_counts_and_determinism(tmp_path):
    ds = ds_mod.generate_synthetic(tmp_path / "a", 5, image_size=32, seed=7)
    assert len(ds) == 20 and set(ds.class_counts.values()) == {5}
    assert len(list((tmp_path / "a" / "images").iterdir())) == 20
    assert {s.camera_id for s in ds} == {"cam1", "cam2"}
    manifest = ds_mod.read_manifest(tmp_path / "a" / "manifest.csv")
    assert manifest.class_counts == ds.class_counts
    img = ds_mod.decode_image(manifest.samples[0].path)
    assert img.shape == (3, 32, 32)
    ds_mod.generate_synthetic(tmp_path / "b", 5, image_size=32, seed=7)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    ds_mod.generate_synthetic(tmp_path / "c", 5, image_size=32, seed=8)
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_generate_rejects_zero():
    with pytest.raises(ParameterError):
        ds_mod.generate_synthetic("unused", 0)


def test_load_arrays(tmp_path):
    ds = ds_mod.generate_synthetic(tmp_path, 2, image_size=40, seed=0)
    x, y = ds_mod.load_arrays(ds, 24)
    assert x.shape == (8, 3, 24, 24) and x.dtype == np.float32
    assert y.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    np.testing.assert_allclose(x.reshape(8, -1).mean(axis=1), 0, atol=1e-5)


def test_generated_classes_are_not_separable_by_raw_pixel_centroids():
    # difficulty calibration: a nearest-centroid classifier on raw pixels stays well short of the learned models
    rng = np.random.default_rng(0)
    x, y = [], []
    for i in range(250):
        for k, name in enumerate(ds_mod.CLASS_NAMES):
            x.append(ds_mod.render_vehicle(name, 64, "cam1" if (i + k) % 2 == 0 else "cam2", rng).ravel())
            y.append(k)
    x, y = np.array(x), np.array(y)
    train = np.arange(len(y)) % 5 != 0
    centroids = np.array([x[train & (y == k)].mean(axis=0) for k in range(4)])
    d = ((x[~train][:, None] - centroids[None]) ** 2).sum(axis=-1)
    acc = np.mean(d.argmin(axis=1) == y[~train])
    assert 0.55 <= acc <= 0.8
