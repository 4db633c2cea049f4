"""STRIP: perturbation-entropy screening, as a cleanser and an input filter.

Each input is superimposed with random clean images; a backdoored input
usually keeps its (target-class) prediction under superposition, giving a
low average prediction entropy. The threshold is calibrated on held-clean
validation entropies at a fixed false-positive rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..cleansers import CleanseResult
from ..errors import ConfigError

DEFAULT_OVERLAYS = 64


@dataclass
class StripProfile:
    entropies: np.ndarray
    threshold: float
    fpr_target: float = 0.10


@torch.no_grad()
def strip_entropies(model, samples: np.ndarray, overlay_pool: np.ndarray,
                    n_overlays: int = DEFAULT_OVERLAYS, seed: int = 0,
                    batch_size: int = 32, device: str = "cpu") -> np.ndarray:
    """Average Shannon entropy of the model's prediction over ``n_overlays``
    superpositions (pixel-wise mean of the sample and a random pool image)."""
    if len(overlay_pool) == 0:
        raise ConfigError("STRIP needs a non-empty overlay pool")
    model.eval()
    rng = np.random.default_rng(seed)
    pool = torch.as_tensor(overlay_pool, dtype=torch.float32).permute(0, 3, 1, 2)
    xs = torch.as_tensor(samples, dtype=torch.float32).permute(0, 3, 1, 2)
    out = np.empty(len(xs), dtype=np.float64)
    for start in range(0, len(xs), batch_size):
        chunk = xs[start:start + batch_size]
        k = len(chunk)
        pick = rng.integers(0, len(pool), size=(k, n_overlays))
        mixed = 0.5 * (chunk[:, None] + pool[pick])  # (k, n_overlays, C, H, W)
        logits = model(mixed.reshape(k * n_overlays, *mixed.shape[2:]).to(device))
        probs = F.softmax(logits, dim=1)
        ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=1)
        out[start:start + k] = ent.reshape(k, n_overlays).mean(dim=1).cpu().numpy()
    return out


def strip_threshold(clean_val_entropies: np.ndarray, fpr: float = 0.10) -> float:
    """Entropy below which ~``fpr`` of the clean validation set falls."""
    return float(np.percentile(np.asarray(clean_val_entropies, dtype=np.float64), fpr * 100.0))


def strip_cleanse(train_entropies: np.ndarray, clean_val_entropies: np.ndarray,
                  fpr: float = 0.10) -> CleanseResult:
    """Suspect every training sample whose entropy falls below the clean
    validation ``fpr``-quantile."""
    if len(clean_val_entropies) == 0:
        raise ConfigError("STRIP cleanse needs validation entropies")
    threshold = strip_threshold(clean_val_entropies, fpr)
    train_entropies = np.asarray(train_entropies, dtype=np.float64)
    suspected = np.flatnonzero(train_entropies < threshold)
    return CleanseResult(
        method="strip_cleanse",
        suspected_indices=suspected,
        per_class_scores={},
        flagged_classes=set(),
        parameters={"threshold": threshold, "fpr_target": fpr},
    )


def strip_filter(model, test_inputs: np.ndarray, threshold: float,
                 overlay_pool: np.ndarray, n_overlays: int = DEFAULT_OVERLAYS,
                 seed: int = 0, device: str = "cpu"):
    """Accept/reject test inputs by entropy against a pre-calibrated
    threshold; returns (accepted boolean mask, entropies)."""
    entropies = strip_entropies(model, test_inputs, overlay_pool,
                                n_overlays=n_overlays, seed=seed, device=device)
    return entropies >= threshold, entropies
