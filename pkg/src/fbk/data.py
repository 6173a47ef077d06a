"""Dataset loading, synthetic generation and augmentation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor import save_tensor

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32

_CIFAR = {
    "cifar10": {
        "dirs": ("", "cifar-10-batches-bin"),
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
        "label_bytes": 1,
        "classes": 10,
    },
    "cifar100": {
        "dirs": ("", "cifar-100-binary"),
        "train": ["train.bin"],
        "test": ["test.bin"],
        "label_bytes": 2,
        "classes": 100,
    },
}


class DatasetIOError(OSError):
    """Missing or truncated dataset file."""


@dataclass
class LabeledImageSet:
    images: np.ndarray              # (N, 3, 32, 32), values in [0, 1]
    labels: np.ndarray              # (N,) int64
    class_count: int
    mean: np.ndarray | None = None  # per-channel, from the training split
    std: np.ndarray | None = None
    coarse_labels: np.ndarray | None = None
    content_hash: str = ""

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("empty image set")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return images
        return (images - self.mean[None, :, None, None]) / self.std[None, :, None, None]


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def decode_records(raw: bytes, variant: str, source: str = "<bytes>"):
    """Split CIFAR binary records into (uint8 images, fine labels, coarse labels or None)."""
    info = _CIFAR[variant]
    rec = info["label_bytes"] + PIXELS
    if len(raw) == 0 or len(raw) % rec:
        raise DatasetIOError(
            f"{source}: size {len(raw)} bytes is not a positive multiple of the {rec}-byte {variant} record"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, info["label_bytes"] - 1].astype(np.int64)
    coarse = arr[:, 0].astype(np.int64) if info["label_bytes"] == 2 else None
    images = arr[:, info["label_bytes"]:].reshape(-1, *IMAGE_SHAPE)
    return images, labels, coarse


def encode_records(images: np.ndarray, labels: np.ndarray, variant: str, coarse=None) -> bytes:
    """Inverse of :func:`decode_records` for uint8 images."""
    info = _CIFAR[variant]
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if info["label_bytes"] == 2:
        c = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, c[:, None])
    return np.concatenate(cols + [images], axis=1).tobytes()


def _resolve(root: Path, variant: str, name: str, expected_bytes: int) -> Path:
    for sub in _CIFAR[variant]["dirs"]:
        candidate = root / sub / name
        if candidate.exists():
            return candidate
    raise DatasetIOError(f"missing {variant} file {root / name} (expected {expected_bytes} bytes)")


def _read_split(root: Path, variant: str, split: str, dtype):
    images, labels, coarse, hashes = [], [], [], []
    per_file = 50000 // len(_CIFAR[variant][split]) if split == "train" else 10000
    rec = _CIFAR[variant]["label_bytes"] + PIXELS
    for name in _CIFAR[variant][split]:
        path = _resolve(root, variant, name, per_file * rec)
        raw = path.read_bytes()
        if len(raw) != per_file * rec:
            raise DatasetIOError(f"{path}: {len(raw)} bytes, expected {per_file * rec} ({per_file} records)")
        im, lab, co = decode_records(raw, variant, str(path))
        images.append(im)
        labels.append(lab)
        if co is not None:
            coarse.append(co)
        hashes.append(git_blob_hash(raw))
    imgs = np.concatenate(images).astype(dtype)
    imgs /= 255.0
    return (imgs, np.concatenate(labels), np.concatenate(coarse) if coarse else None,
            hashlib.sha1("".join(hashes).encode()).hexdigest())


def channel_stats(images: np.ndarray):
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def load_cifar(path: str | Path | None, variant: str = "cifar10", dtype=np.float64):
    """Load train and test splits; normalization stats come from the training split only."""
    if variant not in _CIFAR:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    root = Path(path if path is not None else os.environ.get("FBK_DATA_DIR", "."))
    classes = _CIFAR[variant]["classes"]
    tr_img, tr_lab, tr_co, tr_hash = _read_split(root, variant, "train", dtype)
    te_img, te_lab, te_co, te_hash = _read_split(root, variant, "test", dtype)
    mean, std = channel_stats(tr_img)
    train = LabeledImageSet(tr_img, tr_lab, classes, mean, std, tr_co, tr_hash)
    test = LabeledImageSet(te_img, te_lab, classes, mean, std, te_co, te_hash)
    return train, test


def balanced_subset(ds: LabeledImageSet, count: int, rng: np.random.Generator) -> LabeledImageSet:
    """Class-balanced random subset of ``count`` images (count divisible by class count)."""
    per_class, rem = divmod(count, ds.class_count)
    if rem:
        raise ConfigError(f"subset size {count} is not divisible by {ds.class_count} classes")
    picks = []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has only {len(idx)} images, need {per_class}")
        picks.append(rng.choice(idx, per_class, replace=False))
    sel = np.sort(np.concatenate(picks))
    return LabeledImageSet(
        ds.images[sel], ds.labels[sel], ds.class_count, ds.mean, ds.std,
        None if ds.coarse_labels is None else ds.coarse_labels[sel],
        hashlib.sha1((ds.content_hash + sel.tobytes().hex()).encode()).hexdigest(),
    )


# -- synthetic quadratic-interaction task -------------------------------------

@dataclass
class SyntheticQuadraticSpec:
    n: int = 16
    rank: int = 4
    classes: int = 4
    n_train: int = 4000
    n_test: int = 2000
    noise: float = 0.0
    seed: int = 0
    linear_scale: float = 1.0
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.image_shape is not None:
            self.image_shape = tuple(self.image_shape)
            self.n = int(np.prod(self.image_shape))
        if not 0 <= self.rank <= self.n:
            raise ConfigError(f"rank must lie in [0, n={self.n}], got {self.rank}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


@dataclass
class SyntheticData:
    spec: SyntheticQuadraticSpec
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    generator: dict = field(repr=False)

    @property
    def in_shape(self) -> tuple:
        return self.train_x.shape[1:]

    def content_hash(self) -> str:
        h = hashlib.sha1()
        for a in (self.train_x, self.train_y, self.test_x, self.test_y):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train_x", "test_x"):
            save_tensor(directory / f"{name}.fbkt", getattr(self, name))
        for name in ("train_y", "test_y"):
            save_tensor(directory / f"{name}.fbkt", getattr(self, name).astype(np.float64))
        (directory / "spec.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True))
        return directory


def synthetic_scores(x: np.ndarray, generator: dict) -> np.ndarray:
    """Noise-free class scores: ``A x + sum_t (U_jt . x)^2``."""
    flat = x.reshape(len(x), -1)
    scores = flat @ generator["A"].T
    U = generator["U"]                                   # (classes, rank, n)
    if U.shape[1]:
        scores = scores + (np.einsum("crn,sn->scr", U, flat) ** 2).sum(axis=2)
    return scores


def gen_synthetic(spec: SyntheticQuadraticSpec, dtype=np.float64) -> SyntheticData:
    """Gaussian inputs labelled by the argmax of linear plus rank-r quadratic class scores.

    Quadratic directions have unit norm so every class has the same expected
    quadratic score; linear directions have norm ``linear_scale``.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    A = rng.standard_normal((spec.classes, spec.n))
    A *= spec.linear_scale / np.linalg.norm(A, axis=1, keepdims=True)
    U = rng.standard_normal((spec.classes, spec.rank, spec.n))
    if spec.rank:
        U /= np.linalg.norm(U, axis=2, keepdims=True)
    generator = {"A": A, "U": U}

    def draw(count):
        x = rng.standard_normal((count, spec.n))
        s = synthetic_scores(x, generator)
        if spec.noise:
            s = s + spec.noise * rng.standard_normal(s.shape)
        if spec.image_shape is not None:
            x = x.reshape(count, *spec.image_shape)
        return x.astype(dtype), s.argmax(axis=1).astype(np.int64)

    train_x, train_y = draw(spec.n_train)
    test_x, test_y = draw(spec.n_test)
    return SyntheticData(spec, train_x, train_y, test_x, test_y, generator)


# -- augmentation ------------------------------------------------------------

def crop_flip(batch: np.ndarray, offsets: np.ndarray, flips: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop at per-image (dy, dx) offsets, then mirror where ``flips``."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random 32x32 crop of the 4-pixel zero-padded image, mirrored with probability 0.5."""
    n = batch.shape[0]
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return crop_flip(batch, offsets, flips, pad)
