"""Dataset loading and the deterministic synthetic image set.

All datasets are materialized as float arrays (N, H, W, C) in [0, 1] with
int64 labels, so poisoning, digesting and training all see one format.
CIFAR-10 / GTSRB load through torchvision from the data-cache root
(``LATSEP_DATA_ROOT``, default ``./data``); the synthetic set is generated
procedurally and needs no files at all, which keeps smoke tests and CI
independent of downloads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

DATA_ROOT_ENV = "LATSEP_DATA_ROOT"


def data_root(root=None) -> str:
    return root or os.environ.get(DATA_ROOT_ENV, "./data")


@dataclass
class ImageDataset:
    name: str
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError("images/labels length mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name=None) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, name=name or self.name, images=self.images[indices],
                       labels=self.labels[indices])


def subsample(dataset: ImageDataset, n: int, seed: int = 0) -> ImageDataset:
    """Class-stratified random subset of size ~n (deterministic per seed)."""
    if n >= len(dataset):
        return dataset
    rng = np.random.default_rng([seed, 17])
    per_class = n // dataset.num_classes
    picked = []
    for c in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == c)
        take = min(per_class, len(pool))
        picked.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(picked))
    return dataset.subset(idx, name=f"{dataset.name}-sub{len(idx)}")


def split_validation(dataset: ImageDataset, n_val: int = 2000, seed: int = 0):
    """Split off a clean validation set (used by defenses as their held-out
    clean base); returns (validation, remainder)."""
    rng = np.random.default_rng([seed, 29])
    idx = rng.permutation(len(dataset))
    val_idx, rest_idx = np.sort(idx[:n_val]), np.sort(idx[n_val:])
    return (dataset.subset(val_idx, name=f"{dataset.name}-val"),
            dataset.subset(rest_idx, name=f"{dataset.name}-heldout"))


# ---------------------------------------------------------------------------
# Synthetic dataset: ten texture/shape classes on gradient backgrounds.
# Entirely procedural and seeded, so content is stable across runs/machines.
# ---------------------------------------------------------------------------

_SYNTH_HUES = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1],
    [0.8, 0.2, 0.8], [0.1, 0.8, 0.8], [0.95, 0.55, 0.1], [0.55, 0.35, 0.15],
    [0.6, 0.9, 0.5], [0.85, 0.85, 0.9],
], dtype=np.float32)


def _shape_mask(cls: int, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy ** 2 + dx ** 2)
    if cls == 0:  # disk
        return dist < r
    if cls == 1:  # square frame
        box = (np.abs(dy) < r) & (np.abs(dx) < r)
        inner = (np.abs(dy) < r * 0.55) & (np.abs(dx) < r * 0.55)
        return box & ~inner
    if cls == 2:  # cross
        return ((np.abs(dy) < r * 0.35) & (np.abs(dx) < r)) | ((np.abs(dx) < r * 0.35) & (np.abs(dy) < r))
    if cls == 3:  # diagonal stripes
        return (((yy + xx) % 6) < 3) & (dist < r * 1.4)
    if cls == 4:  # horizontal bars
        return ((yy % 6) < 3) & (dist < r * 1.4)
    if cls == 5:  # ring
        return (dist < r) & (dist > r * 0.6)
    if cls == 6:  # triangle-ish wedge
        return (dy > -r) & (dy < r) & (np.abs(dx) < (dy + r) * 0.6)
    if cls == 7:  # checkerboard
        return (((yy // 4) + (xx // 4)) % 2 == 0) & (dist < r * 1.4)
    if cls == 8:  # dot grid
        return ((yy % 7) < 2) & ((xx % 7) < 2) & (dist < r * 1.6)
    if cls == 9:  # vertical bars
        return ((xx % 6) < 3) & (dist < r * 1.4)
    raise ValueError(cls)


def make_synthetic(n: int, seed: int, h: int = 32, w: int = 32, name: str = "synth10") -> ImageDataset:
    # Intra-class variation is kept mild (gentle background ramp, small
    # jitter) so a trained model's class latents form a single cluster;
    # strongly multimodal classes would confound the poison detectors.
    rng = np.random.default_rng([seed, 101])
    num_classes = 10
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, h, w, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for i in range(n):
        c = int(labels[i])
        base = rng.uniform(0.15, 0.45)
        tint = rng.normal(0, 0.03, 3)
        angle = rng.random() * 2 * np.pi
        ramp = (np.cos(angle) * yy / h + np.sin(angle) * xx / w)
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-9)
        img = (base + 0.12 * (ramp[..., None] - 0.5)) + tint[None, None, :]
        cy = h / 2 + rng.uniform(-3, 3)
        cx = w / 2 + rng.uniform(-3, 3)
        r = rng.uniform(9, 11)
        mask = _shape_mask(c, h, w, cy, cx, r)
        color = np.clip(_SYNTH_HUES[c] + rng.normal(0, 0.05, 3), 0, 1).astype(np.float32)
        img[mask] = 0.2 * img[mask] + 0.8 * color
        img += rng.normal(0, 0.03, img.shape)
        images[i] = np.clip(img, 0, 1)
    return ImageDataset(name=name, images=images, labels=labels, num_classes=num_classes)


# ---------------------------------------------------------------------------
# Real datasets via torchvision.
# ---------------------------------------------------------------------------

def _load_cifar10(root, train: bool) -> ImageDataset:
    import torchvision

    try:
        ds = torchvision.datasets.CIFAR10(root=data_root(root), train=train, download=True)
    except Exception as exc:
        raise ConfigError(
            f"CIFAR-10 is not available under '{data_root(root)}' and could not be "
            f"downloaded ({type(exc).__name__}). Place the extracted "
            f"'cifar-10-batches-py' directory there, or set {DATA_ROOT_ENV}."
        ) from exc
    images = ds.data.astype(np.float32) / 255.0
    return ImageDataset(name="cifar10", images=images,
                        labels=np.asarray(ds.targets), num_classes=10)


def _load_gtsrb(root, train: bool) -> ImageDataset:
    import torchvision
    from PIL import Image

    split = "train" if train else "test"
    try:
        ds = torchvision.datasets.GTSRB(root=data_root(root), split=split, download=True)
    except Exception as exc:
        raise ConfigError(
            f"GTSRB is not available under '{data_root(root)}' and could not be "
            f"downloaded ({type(exc).__name__}); set {DATA_ROOT_ENV} to a root that "
            f"contains the torchvision GTSRB layout."
        ) from exc
    images, labels = [], []
    for img, label in ds:
        img = img.resize((32, 32), Image.BILINEAR)
        images.append(np.asarray(img, dtype=np.float32) / 255.0)
        labels.append(label)
    return ImageDataset(name="gtsrb", images=np.stack(images),
                        labels=np.asarray(labels), num_classes=43)


def load_dataset(name: str, root=None, train: bool = True, synth_n: int | None = None,
                 synth_seed: int = 0) -> ImageDataset:
    """Load a registered dataset split.

    ``synth10`` accepts ``synth_n``/``synth_seed``; train and test splits use
    disjoint seeds so they are disjoint draws from the same generator.
    """
    if name == "cifar10":
        return _load_cifar10(root, train)
    if name == "gtsrb":
        return _load_gtsrb(root, train)
    if name == "synth10":
        n = synth_n if synth_n is not None else (6000 if train else 1500)
        seed = [synth_seed, 0] if train else [synth_seed, 1]
        return make_synthetic(n, seed=int(np.random.default_rng(seed).integers(2 ** 31)),
                              name="synth10")
    raise ConfigError(f"unknown dataset '{name}' (registered: cifar10, gtsrb, synth10)")
