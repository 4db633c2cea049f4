"""Trigger reverse engineering with mask-norm anomaly detection, plus the
patched-finetuning unlearning step.

For every class an (additive mask, pattern) pair is optimized so that
masked inputs are classified to that class while the mask's L1 norm is
penalized with a dynamically scheduled cost. A class whose reversed mask is
anomalously small (MAD-scaled deviation > 2, norm below the median) is
selected as the backdoor target; its reversed trigger is then attached to a
fraction of clean samples (true labels kept) for one unlearning epoch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

MAD_SCALE = 1.4826  # consistency constant for the median absolute deviation
ANOMALY_THRESHOLD = 2.0


@dataclass
class NCResult:
    masks: dict[int, np.ndarray]
    patterns: dict[int, np.ndarray]
    mask_norms: dict[int, float]
    anomaly_indices: dict[int, float]
    selected_target: int | None
    parameters: dict = field(default_factory=dict)


def anomaly_indices_from_norms(norms: dict[int, float]) -> dict[int, float]:
    """MAD-scaled deviation of each class's mask norm from the median.
    Infinite norms (failed optimizations) are excluded from the median/MAD
    and receive a NaN index."""
    finite = {c: v for c, v in norms.items() if np.isfinite(v)}
    out = {c: float("nan") for c in norms}
    if not finite:
        return out
    values = np.array(list(finite.values()), dtype=np.float64)
    median = float(np.median(values))
    mad = float(np.median(np.abs(values - median))) * MAD_SCALE
    for c, v in finite.items():
        out[c] = abs(v - median) / mad if mad > 0 else 0.0
    return out


def select_target(norms: dict[int, float], indices: dict[int, float]) -> int | None:
    """Highest anomaly index among classes with index > 2 whose mask norm is
    also smaller than the median norm."""
    finite = [v for v in norms.values() if np.isfinite(v)]
    if not finite:
        return None
    median = float(np.median(finite))
    candidates = [c for c, ai in indices.items()
                  if np.isfinite(ai) and ai > ANOMALY_THRESHOLD and norms[c] <= median]
    if not candidates:
        return None
    return max(candidates, key=lambda c: indices[c])


def _reverse_engineer_class(model, images: torch.Tensor, target: int, *, epochs, patience,
                            batch_size, init_cost, success_threshold, lr, cost_multiplier,
                            gen, device):
    h, w = images.shape[2], images.shape[3]
    c = images.shape[1]
    theta_m = torch.full((1, 1, h, w), -2.0, device=device, requires_grad=True)
    theta_p = torch.zeros((1, c, h, w), device=device, requires_grad=True)
    opt = torch.optim.Adam([theta_m, theta_p], lr=lr, betas=(0.5, 0.9))
    cost = init_cost
    up_counter = down_counter = 0
    best_norm, best = float("inf"), None
    n = len(images)
    target_vec = torch.full((batch_size,), target, dtype=torch.long, device=device)

    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        hits = total = 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x = images[idx].to(device)
            m = torch.sigmoid(theta_m)
            p = torch.sigmoid(theta_p)
            x_adv = (1 - m) * x + m * p
            logits = model(x_adv)
            loss = F.cross_entropy(logits, target_vec[: len(idx)]) + cost * m.abs().sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            hits += int((logits.argmax(dim=1) == target).sum())
            total += len(idx)
        asr = hits / max(total, 1)
        norm = float(torch.sigmoid(theta_m).detach().abs().sum())
        if asr >= success_threshold:
            if norm < best_norm:
                best_norm = norm
                best = (torch.sigmoid(theta_m).detach(), torch.sigmoid(theta_p).detach())
            up_counter, down_counter = up_counter + 1, 0
            if up_counter >= patience:
                cost *= cost_multiplier
                up_counter = 0
        else:
            down_counter, up_counter = down_counter + 1, 0
            if down_counter >= patience:
                cost /= cost_multiplier
                down_counter = 0

    if best is None:
        # failed to reach the success threshold: record last iterate, infinite norm
        return (torch.sigmoid(theta_m).detach(), torch.sigmoid(theta_p).detach()), float("inf")
    return best, best_norm


def neural_cleanse(model, val_images: np.ndarray, num_classes: int, *, epochs: int = 30,
                   patience: int = 5, batch_size: int = 32, init_cost: float = 1e-3,
                   success_threshold: float = 0.99, lr: float = 0.1,
                   cost_multiplier: float = 2.0, seed: int = 0, device: str = "cpu",
                   progress: bool = False) -> NCResult:
    """Reverse engineer a trigger per class on a clean validation set and
    compute mask-norm anomaly indices."""
    model = model.to(device).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    images = torch.as_tensor(val_images, dtype=torch.float32).permute(0, 3, 1, 2)
    gen = torch.Generator().manual_seed(seed)

    classes = range(num_classes)
    if progress:
        from tqdm import tqdm
        classes = tqdm(classes, desc="neural-cleanse")

    masks, patterns, norms = {}, {}, {}
    for target in classes:
        (m, p), norm = _reverse_engineer_class(
            model, images, target, epochs=epochs, patience=patience,
            batch_size=batch_size, init_cost=init_cost,
            success_threshold=success_threshold, lr=lr,
            cost_multiplier=cost_multiplier, gen=gen, device=device,
        )
        masks[target] = m.squeeze().cpu().numpy()
        patterns[target] = p.squeeze(0).permute(1, 2, 0).cpu().numpy()
        norms[target] = norm

    for p in model.parameters():
        p.requires_grad_(True)
    indices = anomaly_indices_from_norms(norms)
    return NCResult(
        masks=masks, patterns=patterns, mask_norms=norms, anomaly_indices=indices,
        selected_target=select_target(norms, indices),
        parameters={"epochs": epochs, "patience": patience, "batch_size": batch_size,
                    "init_cost": init_cost, "success_threshold": success_threshold,
                    "lr": lr, "cost_multiplier": cost_multiplier, "seed": seed,
                    "mad_scale": MAD_SCALE, "anomaly_threshold": ANOMALY_THRESHOLD},
    )


def nc_unlearn(model, mask: np.ndarray, pattern: np.ndarray, clean_images: np.ndarray,
               clean_labels: np.ndarray, *, patch_fraction: float = 0.2, epochs: int = 1,
               lr: float = 1e-2, batch_size: int = 128, seed: int = 0,
               device: str = "cpu"):
    """Fine-tune a copy of the model on clean samples of which
    ``patch_fraction`` carry the reversed trigger but keep their true labels."""
    model = copy.deepcopy(model).to(device)
    images = np.asarray(clean_images, dtype=np.float32).copy()
    labels = np.asarray(clean_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n_patch = int(round(patch_fraction * len(images)))
    patched = rng.choice(len(images), size=n_patch, replace=False)
    m = np.asarray(mask, dtype=np.float32)[..., None]
    images[patched] = (1 - m) * images[patched] + m * np.asarray(pattern, dtype=np.float32)

    x = torch.as_tensor(images).permute(0, 3, 1, 2)
    y = torch.as_tensor(labels)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(x[idx].to(device)), y[idx].to(device))
            loss.backward()
            opt.step()
    return model.eval()
