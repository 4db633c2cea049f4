"""Anti-backdoor learning: flooding-loss isolation, finetuning on the
remainder, then gradient-ascent unlearning on the isolated set.

Stage 1 trains with loss |CE - flood| + flood, which stalls easy (low-loss)
samples; the lowest-loss samples after isolation training are treated as
suspected poison. Stage 2 finetunes on everything else; stage 3 maximizes
the loss on the isolated set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..data import ImageDataset
from ..errors import StageError
from ..models import build_model
from ..training import _augment_batch


@dataclass
class ABLResult:
    isolated_indices: np.ndarray
    isolation_precision: float | None
    metrics: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)


def _run_epochs(model, images, labels, *, epochs, lr_fn, batch_size, gen, device,
                stage, loss_transform=None, ascent=False, augment=None):
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9, weight_decay=1e-4)
    n = len(labels)
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = lr_fn(epoch)
        model.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x, y = images[idx].to(device), labels[idx].to(device)
            if augment is not None:
                x = _augment_batch(x, augment, gen)
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if loss_transform is not None:
                loss = loss_transform(loss)
            if ascent:
                loss = -loss
            if not torch.isfinite(loss):
                raise StageError(stage, f"loss diverged in stage '{stage}' at epoch {epoch}")
            loss.backward()
            opt.step()
    return model


@torch.no_grad()
def _per_sample_losses(model, images, labels, batch_size, device) -> np.ndarray:
    model.eval()
    out = np.empty(len(labels), dtype=np.float64)
    for start in range(0, len(labels), batch_size):
        x = images[start:start + batch_size].to(device)
        y = labels[start:start + batch_size].to(device)
        losses = F.cross_entropy(model(x), y, reduction="none")
        out[start:start + len(x)] = losses.cpu().numpy()
    return out


def abl(dataset: ImageDataset, architecture: str = "resnet20", *,
        isolation_count: int = 500, isolation_epochs: int = 20, isolation_lr: float = 0.1,
        flooding: float = 0.5, finetune_epochs: int = 60, finetune_lr: float = 0.1,
        finetune_decay_epoch: int = 40, unlearn_epochs: int = 5, unlearn_lr: float = 5e-4,
        batch_size: int = 128, seed: int = 0, device: str = "cpu",
        manifest=None, augment: str | None = None):
    """Run the three ABL stages on a (possibly poisoned) training set.

    Returns (model, ABLResult); isolation precision is scored against the
    manifest's payload set when a manifest is given.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    images = torch.as_tensor(dataset.images).permute(0, 3, 1, 2).contiguous()
    labels = torch.as_tensor(dataset.labels)
    model = build_model(architecture, dataset.num_classes).to(device)

    # stage 1: flooding-loss isolation training
    flood = lambda loss: (loss - flooding).abs() + flooding
    _run_epochs(model, images, labels, epochs=isolation_epochs,
                lr_fn=lambda e: isolation_lr, batch_size=batch_size, gen=gen,
                device=device, stage="abl-isolation", loss_transform=flood,
                augment=augment)
    losses = _per_sample_losses(model, images, labels, batch_size, device)
    count = min(isolation_count, len(losses))
    isolated = np.sort(np.argsort(losses)[:count])

    # stage 2: finetune on the remainder
    keep = np.setdiff1d(np.arange(len(losses)), isolated)
    _run_epochs(model, images[keep], labels[keep], epochs=finetune_epochs,
                lr_fn=lambda e: finetune_lr if e < finetune_decay_epoch else finetune_lr * 0.1,
                batch_size=batch_size, gen=gen, device=device, stage="abl-finetune",
                augment=augment)

    # stage 3: gradient-ascent unlearning on the isolated set
    _run_epochs(model, images[isolated], labels[isolated], epochs=unlearn_epochs,
                lr_fn=lambda e: unlearn_lr, batch_size=batch_size, gen=gen,
                device=device, stage="abl-unlearn", ascent=True, augment=augment)

    precision = None
    if manifest is not None:
        payload = set(manifest.payload_indices.tolist())
        precision = len(payload & set(isolated.tolist())) / max(count, 1)

    result = ABLResult(
        isolated_indices=isolated,
        isolation_precision=precision,
        parameters={"isolation_count": isolation_count, "isolation_epochs": isolation_epochs,
                    "isolation_lr": isolation_lr, "flooding": flooding,
                    "finetune_epochs": finetune_epochs, "finetune_lr": finetune_lr,
                    "finetune_decay_epoch": finetune_decay_epoch,
                    "unlearn_epochs": unlearn_epochs, "unlearn_lr": unlearn_lr,
                    "batch_size": batch_size, "seed": seed},
    )
    return model.eval(), result
