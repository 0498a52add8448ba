"""Dataset ingestion: the synthetic shapes16 generator and CIFAR-style archives.

Images are float32 tensors in [0,1], NCHW. Batch order is a pure function of
(seed, tag, epoch); the test split is always served in a fixed sequential
order. shapes16 is generated on the fly from the seed so the full test and
acceptance suites run without downloads.
"""

from __future__ import annotations

import hashlib
import pickle
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .seeding import derive_generator, derive_seed


class Dataset:
    """In-memory labeled image set with deterministic batch iteration."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, num_classes: int,
                 seed: int, split: str, batch_size: int = 128):
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.seed = seed
        self.split = split
        self.batch_size = batch_size
        self._epoch_counter = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        # (h, w, c) to match the config convention
        _, c, h, w = self.images.shape
        return (h, w, c)

    def epoch_batches(self, epoch: int, batch_size: int = None, tag: str = "train"):
        """Shuffled batches whose order depends only on (seed, tag, epoch)."""
        bs = batch_size or self.batch_size
        gen = derive_generator(self.seed, self.split, tag, epoch)
        order = torch.randperm(len(self), generator=gen)
        for start in range(0, len(self), bs):
            idx = order[start:start + bs]
            yield self.images[idx], self.labels[idx]

    def sequential_batches(self, batch_size: int = None):
        """Fixed-order batches (used for the test split and evaluation)."""
        bs = batch_size or self.batch_size
        for start in range(0, len(self), bs):
            yield self.images[start:start + bs], self.labels[start:start + bs]

    def __iter__(self):
        if self.split == "train":
            epoch = self._epoch_counter
            self._epoch_counter += 1
            return self.epoch_batches(epoch)
        return self.sequential_batches()

    def subset(self, n: int) -> "Dataset":
        """First-n slice, preserving order (probe/eval subsets)."""
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.num_classes,
                       self.seed, self.split, self.batch_size)


# ---------------------------------------------------------------------------
# shapes16: parametric shapes on noise backgrounds
# ---------------------------------------------------------------------------

_BG_LOW, _BG_HIGH = 0.40, 0.60
_FG_LOW, _FG_HIGH = 0.85, 0.95


def _shape_mask(rng: np.random.Generator, cls: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    cy = h / 2 + rng.uniform(-h / 10, h / 10)
    cx = w / 2 + rng.uniform(-w / 10, w / 10)
    if cls == 0:  # filled disk
        r = rng.uniform(0.26, 0.32) * scale
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if cls == 1:  # filled square
        s = rng.uniform(0.22, 0.28) * scale
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if cls == 2:  # plus / cross
        t = rng.uniform(0.07, 0.10) * scale
        arm = rng.uniform(0.34, 0.40) * scale
        horiz = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= arm)
        return horiz | vert
    # ring / annulus
    r_out = rng.uniform(0.30, 0.36) * scale
    r_in = r_out - rng.uniform(0.12, 0.16) * scale
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out ** 2) & (d2 >= r_in ** 2)


# Class-keyed micro-pattern amplitude: small enough to be invisible and to
# fit inside an 8/255 ball, so it is a brittle shortcut feature. Naturally
# trained models latch onto it and collapse under PGD; adversarially trained
# models must ignore it and read the shape geometry instead.
_PATTERN_AMPLITUDE = 0.02


def _class_patterns(seed: int, num_classes: int, c: int, h: int, w: int) -> np.ndarray:
    pats = np.empty((num_classes, c, h, w), dtype=np.float64)
    for cls in range(num_classes):
        rng = np.random.default_rng(
            np.random.SeedSequence(derive_seed(seed, "shapes16", "pattern", cls)))
        pats[cls] = rng.choice([-1.0, 1.0], size=(c, h, w))
    return pats


def make_shapes16(seed: int, split: str, size: int, image_shape: tuple,
                  num_classes: int, batch_size: int = 128) -> Dataset:
    """Synthesize the shapes16 split deterministically from the seed.

    Bright parametric shapes on duller uniform-noise backgrounds, plus a
    per-class micro-pattern (shared by both splits). The foreground gap
    survives an 8/255 perturbation, so robust models have real margins; the
    micro-pattern does not, which is what separates them from natural ones.
    """
    h, w, c = image_shape
    rng = np.random.default_rng(np.random.SeedSequence(derive_seed(seed, "shapes16", split)))
    patterns = _class_patterns(seed, num_classes, c, h, w)
    images = np.empty((size, c, h, w), dtype=np.float32)
    labels = np.empty(size, dtype=np.int64)
    for i in range(size):
        cls = i % num_classes
        bg = rng.uniform(_BG_LOW, _BG_HIGH, size=(c, h, w))
        mask = _shape_mask(rng, cls, h, w)
        fg = rng.uniform(_FG_LOW, _FG_HIGH) + rng.uniform(-0.02, 0.02, size=(h, w))
        img = bg
        img[:, mask] = fg[mask]
        img = np.clip(img + _PATTERN_AMPLITUDE * patterns[cls], 0.0, 1.0)
        images[i] = img.astype(np.float32)
        labels[i] = cls
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels),
                   num_classes, seed, split, batch_size)


# ---------------------------------------------------------------------------
# CIFAR-style pickled archives
# ---------------------------------------------------------------------------

_CIFAR_FILES = {
    "cifar10": {"train": [f"data_batch_{i}" for i in range(1, 6)], "test": ["test_batch"]},
    "cifar100": {"train": ["train"], "test": ["test"]},
}


def _read_cifar_file(path: Path, checksums: dict = None) -> tuple:
    if not path.exists():
        raise DataError(f"dataset file missing: {path}")
    blob = path.read_bytes()
    if checksums and path.name in checksums:
        digest = hashlib.md5(blob).hexdigest()
        if digest != checksums[path.name].lower():
            raise DataError(f"checksum mismatch for {path.name}: got {digest}")
    try:
        record = pickle.loads(blob, encoding="bytes")
        data = np.asarray(record[b"data"], dtype=np.uint8)
        labels = record.get(b"labels", record.get(b"fine_labels"))
        if labels is None:
            raise KeyError("labels")
        labels = np.asarray(labels, dtype=np.int64)
        if data.ndim != 2 or data.shape[1] != 3072 or data.shape[0] != labels.shape[0]:
            raise ValueError(f"unexpected array shapes {data.shape} / {labels.shape}")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"corrupt or unparseable archive {path}: {exc}") from exc
    return data, labels


def stratified_subset(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    """Indices of a class-balanced (within +-1) subset, deterministic.

    Per-class quotas differ by at most one (first n % C classes get the
    extra item); within a class the earliest examples in dataset order are
    taken. Returned indices preserve dataset order.
    """
    if n > labels.shape[0]:
        raise DataError(f"requested subset of {n} from only {labels.shape[0]} examples")
    base, extra = divmod(n, num_classes)
    chosen = []
    for cls in range(num_classes):
        quota = base + (1 if cls < extra else 0)
        cls_idx = np.nonzero(labels == cls)[0]
        if cls_idx.shape[0] < quota:
            raise DataError(
                f"class {cls} has only {cls_idx.shape[0]} examples, need {quota} for a stratified subset"
            )
        chosen.append(cls_idx[:quota])
    return np.sort(np.concatenate(chosen))


def load_cifar_archive(dataset_id: str, data_dir, split: str, size: int,
                       num_classes: int, seed: int, batch_size: int,
                       checksums: dict = None) -> Dataset:
    files = _CIFAR_FILES[dataset_id][split]
    parts = [_read_cifar_file(Path(data_dir) / name, checksums) for name in files]
    data = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"label out of range: found {int(labels.min())}..{int(labels.max())}, "
            f"expected [0, {num_classes})"
        )
    if size < labels.shape[0]:
        idx = stratified_subset(labels, size, num_classes)
        data, labels = data[idx], labels[idx]
    elif size > labels.shape[0]:
        raise DataError(f"requested {split} size {size} exceeds the {labels.shape[0]} available")
    images = data.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels),
                   num_classes, seed, split, batch_size)


def load_dataset(config, split: str) -> Dataset:
    """Load one split per the config. split is 'train' or 'test'."""
    if split not in ("train", "test"):
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    size = config.train_size if split == "train" else config.test_size
    if config.dataset_id == "shapes16":
        return make_shapes16(config.seed, split, size, config.image_shape,
                             config.num_classes, config.batch_size)
    return load_cifar_archive(config.dataset_id, config.data_dir, split, size,
                              config.num_classes, config.seed, config.batch_size,
                              config.dataset_checksums)
