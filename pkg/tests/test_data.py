import numpy as np
import numpy.testing as npt
import pytest

from fbk.data import (
    DatasetIOError,
    LabeledImageSet,
    SyntheticQuadraticSpec,
    augment,
    balanced_subset,
    crop_flip,
    decode_records,
    encode_records,
    gen_synthetic,
    load_cifar,
    synthetic_scores,
)
from fbk.errors import ConfigError, DataError
from fbk.tensor import load_tensor


def one_record(label=7):
    img = np.arange(3072, dtype=np.int64).reshape(3, 32, 32) % 256
    return img.astype(np.uint8), bytes([label]) + img.astype(np.uint8).tobytes()


def test_decode_single_record():
    img, raw = one_record()
    images, labels, coarse = decode_records(raw, "cifar10")
    assert labels.tolist() == [7] and coarse is None
    npt.assert_array_equal(images[0], img)
    assert images[0, 1, 0, 0] == 1024 % 256  # channel-major layout


def test_cifar100_label_bytes():
    img, _ = one_record()
    raw = encode_records(img[None], np.array([42]), "cifar100", coarse=np.array([3]))
    images, labels, coarse = decode_records(raw, "cifar100")
    assert labels.tolist() == [42] and coarse.tolist() == [3]
    npt.assert_array_equal(images[0], img)


def test_encode_decode_roundtrip(rng):
    imgs = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.uint8)
    labels = rng.integers(0, 10, 5)
    back, lab, _ = decode_records(encode_records(imgs, labels, "cifar10"), "cifar10")
    npt.assert_array_equal(back, imgs)
    npt.assert_array_equal(lab, labels)


def test_decode_rejects_partial_record():
    _, raw = one_record()
    with pytest.raises(DatasetIOError, match="multiple"):
        decode_records(raw[:-1], "cifar10", "x.bin")


def _write_cifar10(root, rng, per_file=10000, test=10000):
    for i in range(1, 6):
        imgs = rng.integers(0, 256, (per_file, 3, 32, 32), dtype=np.uint8)
        (root / f"data_batch_{i}.bin").write_bytes(encode_records(imgs, np.arange(per_file) % 10, "cifar10"))
    imgs = rng.integers(0, 256, (test, 3, 32, 32), dtype=np.uint8)
    (root / "test_batch.bin").write_bytes(encode_records(imgs, np.arange(test) % 10, "cifar10"))


@pytest.fixture(scope="module")
def cifar10_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar10")
    _write_cifar10(root, np.random.default_rng(0))
    return root


def test_full_size_cifar10(cifar10_dir):
    train, test = load_cifar(cifar10_dir, dtype=np.float32)
    assert train.images.shape == (50000, 3, 32, 32) and train.images.dtype == np.float32
    assert len(test) == 10000 and train.class_count == 10
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    npt.assert_allclose(train.mean, train.images.mean(axis=(0, 2, 3)), rtol=1e-5)
    npt.assert_array_equal(test.mean, train.mean)
    assert len(train.content_hash) == 40


def test_cifar_env_var(cifar10_dir, monkeypatch):
    monkeypatch.setenv("FBK_DATA_DIR", str(cifar10_dir))
    train, _ = load_cifar(None, dtype=np.float32)
    assert len(train) == 50000


def test_full_size_cifar100(tmp_path, rng):
    root = tmp_path / "cifar-100-binary"
    root.mkdir()
    for name, count in (("train.bin", 50000), ("test.bin", 10000)):
        imgs = rng.integers(0, 256, (count, 3, 32, 32), dtype=np.uint8)
        (root / name).write_bytes(encode_records(imgs, np.arange(count) % 100, "cifar100",
                                                 coarse=np.arange(count) % 20))
    train, test = load_cifar(tmp_path, "cifar100", dtype=np.float32)
    assert len(test) == 10000 and test.class_count == 100
    assert test.coarse_labels.max() == 19


def test_missing_file_names_it(tmp_path):
    with pytest.raises(DatasetIOError, match="data_batch_1.bin"):
        load_cifar(tmp_path)


def test_truncated_file_names_it(tmp_path):
    _, raw = one_record()
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(raw * 3)
    with pytest.raises(DatasetIOError, match="data_batch_1.bin"):
        load_cifar(tmp_path)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        load_cifar(".", "svhn")


def test_labeled_set_validation():
    with pytest.raises(DataError):
        LabeledImageSet(np.zeros((2, 3, 32, 32)), np.array([0, 10]), 10)
    with pytest.raises(DataError):
        LabeledImageSet(np.zeros((0, 3, 32, 32)), np.zeros(0, int), 10)


def _toy_set(rng, n=300, classes=3):
    imgs = rng.random((n, 3, 4, 4))
    labels = np.arange(n) % classes
    return LabeledImageSet(imgs, labels, classes, imgs.mean(axis=(0, 2, 3)), imgs.std(axis=(0, 2, 3)))


def test_balanced_subset(rng):
    ds = _toy_set(rng)
    sub = balanced_subset(ds, 60, rng)
    assert np.bincount(sub.labels).tolist() == [20, 20, 20]
    npt.assert_array_equal(sub.mean, ds.mean)  # statistics stay those of the full training split
    with pytest.raises(ConfigError):
        balanced_subset(ds, 61, rng)
    with pytest.raises(DataError):
        balanced_subset(ds, 600, rng)


def test_normalization_uses_training_stats(rng):
    ds = _toy_set(rng)
    z = ds.normalize(ds.images)
    npt.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    npt.assert_allclose(z.std(axis=(0, 2, 3)), 1.0)


def test_synthetic_deterministic():
    spec = SyntheticQuadraticSpec(n=6, rank=2, classes=3, n_train=50, n_test=20, seed=4)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert a.content_hash() == b.content_hash()
    assert gen_synthetic(SyntheticQuadraticSpec(n=6, rank=2, classes=3, n_train=50, n_test=20,
                                                seed=5)).content_hash() != a.content_hash()


def test_synthetic_labels_follow_scores():
    data = gen_synthetic(SyntheticQuadraticSpec(n=6, rank=2, classes=3, n_train=100, n_test=10))
    npt.assert_array_equal(synthetic_scores(data.train_x, data.generator).argmax(axis=1), data.train_y)
    npt.assert_allclose(np.linalg.norm(data.generator["U"], axis=2), 1.0)


def test_synthetic_image_shape(tmp_path):
    data = gen_synthetic(SyntheticQuadraticSpec(rank=2, classes=3, n_train=10, n_test=5, image_shape=(3, 4, 4)))
    assert data.in_shape == (3, 4, 4) and data.spec.n == 48
    data.save(tmp_path / "syn")
    npt.assert_array_equal(load_tensor(tmp_path / "syn" / "train_x.fbkt"), data.train_x)


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticQuadraticSpec(n=4, rank=5)
    with pytest.raises(ConfigError):
        SyntheticQuadraticSpec(noise=-1.0)


def test_rank_zero_is_linearly_separable():
    data = gen_synthetic(SyntheticQuadraticSpec(n=16, rank=0, classes=4, n_train=2000, n_test=10))
    # least-squares on one-hot targets is a weak learner; the true A achieves zero error
    X = np.hstack([data.train_x, np.ones((2000, 1))])
    coef, *_ = np.linalg.lstsq(X, np.eye(4)[data.train_y], rcond=None)
    assert np.mean((X @ coef).argmax(axis=1) == data.train_y) >= 0.75
    assert np.mean((data.train_x @ data.generator["A"].T).argmax(axis=1) == data.train_y) >= 0.99


def test_crop_center_without_flip_is_identity(rng):
    batch = rng.random((3, 3, 32, 32))
    out = crop_flip(batch, np.full((3, 2), 4), np.zeros(3, bool))
    npt.assert_array_equal(out, batch)


def test_double_flip_is_identity(rng):
    batch = rng.random((2, 3, 8, 8))
    offsets = np.full((2, 2), 4)
    once = crop_flip(batch, offsets, np.ones(2, bool))
    npt.assert_array_equal(once, batch[..., ::-1])
    npt.assert_array_equal(crop_flip(once, offsets, np.ones(2, bool)), batch)


def test_augmented_pixels_come_from_image_or_padding(rng):
    batch = rng.integers(1, 255, (4, 3, 32, 32)).astype(np.float64)
    out = augment(batch, rng)
    assert out.shape == batch.shape
    for src, dst in zip(batch, out):
        assert set(np.unique(dst)) <= set(np.unique(src)) | {0.0}
