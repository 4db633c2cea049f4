"""Victim-model training, checkpointing, latent extraction and evaluation.

Training is plain SGD with momentum, a step learning-rate schedule, and the
dataset-specific augmentation recipe (random crop + horizontal flip, or
random rotation). The whole dataset is held in memory and batched manually
with a seeded generator, which keeps runs reproducible on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset
from .errors import ConfigError, TrainingDivergedError
from .models import build_model
from .poison import dataset_digest

AUG_RECIPES = ("cifar", "gtsrb")


@dataclass
class TrainConfig:
    architecture: str = "resnet20"
    epochs: int = 30
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (15, 25)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    augment: bool = True
    aug_recipe: str = "cifar"
    seed: int = 0

    def __post_init__(self):
        decays = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])) or any(e >= self.epochs for e in decays):
            raise ConfigError(
                f"lr_decay_epochs must be strictly increasing and < epochs, got {decays} / {self.epochs}"
            )
        if self.aug_recipe not in AUG_RECIPES:
            raise ConfigError(f"unknown augmentation recipe '{self.aug_recipe}'")
        object.__setattr__(self, "lr_decay_epochs", decays)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_decay_epochs"] = tuple(d.get("lr_decay_epochs", ()))
        return cls(**d)


# Paper-style full-scale recipes and the reduced desk-scale preset.
PRESET_TRAIN_CONFIGS = {
    "cifar10_full": TrainConfig(epochs=200, lr_decay_epochs=(100, 150), aug_recipe="cifar"),
    "gtsrb_full": TrainConfig(epochs=100, lr_decay_epochs=(40, 80), aug_recipe="gtsrb"),
    "desk": TrainConfig(epochs=30, lr_decay_epochs=(15, 25), aug_recipe="cifar"),
}


def _augment_batch(x: torch.Tensor, recipe: str, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    if recipe == "cifar":
        pad = 4
        padded = F.pad(x, (pad, pad, pad, pad))
        dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
        dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
        out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
        flip = torch.rand(n, generator=gen) < 0.5
        out[flip] = torch.flip(out[flip], dims=(3,))
        return out
    if recipe == "gtsrb":
        angles = (torch.rand(n, generator=gen) * 30.0 - 15.0) * torch.pi / 180.0
        cos, sin = torch.cos(angles), torch.sin(angles)
        theta = torch.zeros(n, 2, 3)
        theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
        theta[:, 1, 0], theta[:, 1, 1] = sin, cos
        grid = F.affine_grid(theta, x.shape, align_corners=False)
        return F.grid_sample(x, grid, align_corners=False, padding_mode="zeros")
    raise ConfigError(f"unknown augmentation recipe '{recipe}'")


@dataclass
class ModelCheckpoint:
    architecture: str
    num_classes: int
    state_dict: dict
    train_config: TrainConfig
    dataset_digest: str
    metrics: dict = field(default_factory=dict)

    def model(self, device="cpu") -> torch.nn.Module:
        m = build_model(self.architecture, self.num_classes)
        m.load_state_dict(self.state_dict)
        return m.to(device).eval()

    def save(self, path) -> None:
        torch.save({
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "state_dict": self.state_dict,
            "train_config": self.train_config.to_dict(),
            "dataset_digest": self.dataset_digest,
            "metrics": self.metrics,
        }, path)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        return cls(
            architecture=blob["architecture"],
            num_classes=blob["num_classes"],
            state_dict=blob["state_dict"],
            train_config=TrainConfig.from_dict(blob["train_config"]),
            dataset_digest=blob["dataset_digest"],
            metrics=blob.get("metrics", {}),
        )


def train(dataset: ImageDataset, config: TrainConfig, device: str = "cpu",
          progress: bool = False, eval_set: ImageDataset | None = None,
          digest: str | None = None) -> ModelCheckpoint:
    """Train a victim model on (possibly poisoned) data.

    Deterministic for a fixed (dataset digest, config, seed) on a given
    platform; the seed covers weight init, shuffling and augmentation.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)

    model = build_model(config.architecture, dataset.num_classes).to(device)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    images = torch.as_tensor(dataset.images).permute(0, 3, 1, 2).contiguous()
    labels = torch.as_tensor(dataset.labels)
    n = len(labels)

    iterator = range(config.epochs)
    if progress:
        from tqdm import tqdm
        iterator = tqdm(iterator, desc=f"train[{config.architecture}]")

    for epoch in iterator:
        lr = config.lr * config.lr_decay_factor ** sum(epoch >= e for e in config.lr_decay_epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x, y = images[idx].to(device), labels[idx].to(device)
            if config.augment:
                x = _augment_batch(x, config.aug_recipe, gen)
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss.backward()
            opt.step()

    metrics = {"train_accuracy": accuracy(model, dataset, device=device)}
    if eval_set is not None:
        metrics["test_accuracy"] = accuracy(model, eval_set, device=device)
    return ModelCheckpoint(
        architecture=config.architecture,
        num_classes=dataset.num_classes,
        state_dict={k: v.cpu() for k, v in model.state_dict().items()},
        train_config=replace(config),
        dataset_digest=digest or dataset_digest(dataset.images, dataset.labels),
        metrics=metrics,
    )


@torch.no_grad()
def _forward_batched(model, images: np.ndarray, fn, batch_size=512, device="cpu"):
    model.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size]).permute(0, 3, 1, 2).to(device)
        outs.append(fn(model, x).cpu())
    return torch.cat(outs)


def predict(model, images: np.ndarray, batch_size=512, device="cpu") -> np.ndarray:
    logits = _forward_batched(model, images, lambda m, x: m(x), batch_size, device)
    return logits.argmax(dim=1).numpy()


def accuracy(model, dataset: ImageDataset, device="cpu") -> float:
    pred = predict(model, dataset.images, device=device)
    return float((pred == dataset.labels).mean())


def extract_latents(model_or_checkpoint, images: np.ndarray, batch_size=512, device="cpu") -> np.ndarray:
    """Penultimate-layer representations, one row per sample (eval mode)."""
    model = (model_or_checkpoint.model(device)
             if isinstance(model_or_checkpoint, ModelCheckpoint) else model_or_checkpoint)
    feats = _forward_batched(model, images, lambda m, x: m.features(x), batch_size, device)
    return feats.numpy().astype(np.float32)


def evaluate(model_or_checkpoint, test_set: ImageDataset, trigger_fn=None,
             target_class: int | None = None, device="cpu") -> dict:
    """Clean accuracy on the full test set; ASR over trigger-planted samples
    drawn from non-target classes (target-class samples are excluded so a
    correct prediction is never counted as an attack success)."""
    model = (model_or_checkpoint.model(device)
             if isinstance(model_or_checkpoint, ModelCheckpoint) else model_or_checkpoint)
    out = {"clean_accuracy": accuracy(model, test_set, device=device)}
    if trigger_fn is not None:
        if target_class is None:
            raise ConfigError("target_class is required to compute ASR")
        keep = test_set.labels != target_class
        planted = trigger_fn(test_set.images[keep])
        pred = predict(model, planted, device=device)
        out["asr"] = float((pred == target_class).mean())
    return out
