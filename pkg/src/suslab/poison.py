"""Desk-scale image data, triggers, and the clean/poison split.

Images are float64 arrays of shape (h, w, c) with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from suslab.errors import DimensionError, InvariantError
from suslab.net import pad_features

DSET_MAGIC = b"DSET"
DSET_VERSION = 1
_DSET_HEADER = struct.Struct("<4sHIIIII")

TRIGGER_KINDS = ("corner_patch", "blend", "random_patch")


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w, c)
    labels: np.ndarray  # (N,)
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DimensionError("images must be (N, h, w, c) with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvariantError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def features(self) -> np.ndarray:
        """Row-major flattened images, zero-padded to a multiple of 4 features."""
        return pad_features(self.images.reshape(len(self), int(np.prod(self.shape))))


def _synthetic_digits(seed: int, n: int) -> Dataset:
    rng = np.random.default_rng(seed)
    h = w = 8
    k = 10
    # class structure: three Gaussian blobs per class, kept off the bottom-right corner
    centers = rng.uniform(0.5, 5.5, size=(k, 3, 2))
    labels = rng.permutation(np.arange(n) % k)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    jitter = rng.normal(0.0, 0.45, size=(n, 3, 2))
    amp = rng.uniform(0.6, 1.0, size=(n, 3))
    c = centers[labels] + jitter                                    # (n, 3, 2)
    d2 = (yy[None, None] - c[..., 0, None, None]) ** 2 + (xx[None, None] - c[..., 1, None, None]) ** 2
    img = (amp[..., None, None] * np.exp(-d2 / (2 * 1.1**2))).sum(axis=1)
    img = img + rng.normal(0.0, 0.12, size=img.shape)
    return Dataset(np.clip(img, 0.0, 1.0)[..., None], labels, k)


def make_desk_dataset(kind: str = "synthetic_digits", seed: int = 0, n: int = 5000, path=None) -> Dataset:
    """``synthetic_digits``: 8x8 grayscale, 10 balanced classes. ``external``: read ``path``."""
    if kind == "synthetic_digits":
        return _synthetic_digits(seed, n)
    if kind == "external":
        if path is None:
            raise InvariantError("external dataset needs a path")
        return load_dataset(path)
    raise InvariantError(f"unknown dataset kind {kind!r}")


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# Triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    target: int = 0
    size: int = 2
    value: float = 1.0
    alpha: float = 0.2
    pattern: Optional[np.ndarray] = field(default=None, compare=False)
    # random_patch: True -> every sample gets its own position (drawn once per
    # sample); False -> one position shared by all samples
    per_sample_position: bool = True

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise InvariantError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "blend" and not 0.0 < self.alpha < 1.0:
            raise InvariantError("blend ratio must lie in (0, 1)")
        if self.kind != "blend" and self.size < 1:
            raise InvariantError("patch size must be positive")
        if self.kind in ("blend", "random_patch") and self.pattern is None:
            raise InvariantError(f"{self.kind} trigger needs a pattern")


def corner_patch(size: int = 2, value: float = 1.0, target: int = 0) -> TriggerSpec:
    return TriggerSpec("corner_patch", target=target, size=size, value=value)


def blend(pattern, alpha: float = 0.2, target: int = 0) -> TriggerSpec:
    return TriggerSpec("blend", target=target, alpha=alpha, pattern=np.asarray(pattern, dtype=np.float64))


def random_patch(pattern, target: int = 0, per_sample_position: bool = True) -> TriggerSpec:
    pat = np.asarray(pattern, dtype=np.float64)
    return TriggerSpec(
        "random_patch", target=target, size=pat.shape[0], pattern=pat,
        per_sample_position=per_sample_position,
    )


def _patch(pattern: np.ndarray) -> np.ndarray:
    return pattern[..., None] if pattern.ndim == 2 else pattern


def apply_trigger(image, spec: TriggerSpec, seed=None) -> np.ndarray:
    """Stamp the trigger on one (h, w, c) image; ``seed`` places a random patch."""
    img = np.array(image, dtype=np.float64)
    h, w, c = img.shape
    if spec.kind == "corner_patch":
        s = spec.size
        if s > h or s > w:
            raise DimensionError(f"{s}x{s} patch does not fit a {h}x{w} image")
        img[h - s :, w - s :, :] = spec.value
        return img
    if spec.kind == "blend":
        pattern = np.broadcast_to(_patch(spec.pattern), img.shape)
        return np.clip((1.0 - spec.alpha) * img + spec.alpha * pattern, 0.0, 1.0)
    pattern = _patch(spec.pattern)
    ph, pw = pattern.shape[:2]
    if ph > h or pw > w:
        raise DimensionError(f"{ph}x{pw} patch does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    img[top : top + ph, left : left + pw, :] = pattern
    return img


def sample_seeds(spec: TriggerSpec, seed: int, indices) -> list:
    """Per-sample placement seeds; only random patches depend on them."""
    if spec.kind == "random_patch" and spec.per_sample_position:
        return [(seed, int(i)) for i in indices]
    return [seed] * len(indices)


def apply_trigger_all(ds: Dataset, spec: TriggerSpec, seed: int = 0, indices=None) -> Dataset:
    """Triggered copy of ``ds``; ``indices`` are the original sample ids used for placement."""
    ids = np.arange(len(ds)) if indices is None else np.asarray(indices)
    if spec.kind == "corner_patch":
        images = ds.images.copy()
        s = spec.size
        if s > images.shape[1] or s > images.shape[2]:
            raise DimensionError("patch does not fit the images")
        images[:, -s:, -s:, :] = spec.value
    else:
        seeds = sample_seeds(spec, seed, ids)
        images = np.stack([apply_trigger(img, spec, s) for img, s in zip(ds.images, seeds)]) \
            if len(ds) else ds.images.copy()
    return Dataset(images, ds.labels.copy(), ds.num_classes)


# ---------------------------------------------------------------------------
# Poison split
# ---------------------------------------------------------------------------

@dataclass
class PoisonSplit:
    clean: Dataset
    poisoned: Dataset       # trigger applied, TRUE labels kept
    poison_fraction: float
    clean_idx: np.ndarray
    poison_idx: np.ndarray


def _stratified_pick(labels: np.ndarray, count: int, rng) -> np.ndarray:
    classes, sizes = np.unique(labels, return_counts=True)
    exact = sizes * count / len(labels)
    quota = np.floor(exact).astype(int)
    # largest remainder, ties by class order
    short = count - quota.sum()
    quota[np.argsort(-(exact - quota), kind="stable")[:short]] += 1
    picked = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(labels == cls)
        picked.append(rng.choice(members, size=q, replace=False))
    return np.sort(np.concatenate(picked))


def split_poison(ds: Dataset, spec: TriggerSpec, fraction: float, seed: int) -> PoisonSplit:
    if not 0.0 < fraction < 1.0:
        raise InvariantError(f"poison fraction {fraction} outside (0, 1)")
    count = int(round(fraction * len(ds)))
    if count < 1:
        raise InvariantError(f"poison fraction {fraction} selects no sample out of {len(ds)}")
    if count >= len(ds):
        raise InvariantError("poison fraction leaves no clean sample")
    rng = np.random.default_rng(seed)
    poison_idx = _stratified_pick(ds.labels, count, rng)
    clean_idx = np.setdiff1d(np.arange(len(ds)), poison_idx)
    poisoned = apply_trigger_all(ds.subset(poison_idx), spec, seed, poison_idx)
    return PoisonSplit(ds.subset(clean_idx), poisoned, fraction, clean_idx, poison_idx)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    if ds.num_classes > 0xFFFF:
        raise InvariantError("labels must fit in u16")
    head = _DSET_HEADER.pack(DSET_MAGIC, DSET_VERSION, n, h, w, c, ds.num_classes)
    return head + ds.images.astype("<f8").tobytes() + ds.labels.astype("<u2").tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _DSET_HEADER.size:
        raise InvariantError("truncated dataset header")
    magic, version, n, h, w, c, k = _DSET_HEADER.unpack_from(buf, 0)
    if magic != DSET_MAGIC or version != DSET_VERSION:
        raise InvariantError("not a DSET v1 file")
    off = _DSET_HEADER.size
    count = n * h * w * c
    if len(buf) != off + 8 * count + 2 * n:
        raise InvariantError("dataset payload length does not match header")
    images = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(n, h, w, c)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off + 8 * count)
    return Dataset(images.astype(np.float64), labels.astype(np.int64), k)


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            return dataset_from_bytes(fh.read())
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
