"""Fine-Pruning: zero the most dormant channels of the final convolution
stage until just before clean accuracy drops by the allowed amount.

The channels of the last convolution stage are exactly the dimensions of the
penultimate representation, so pruning operates as a mask on ``features``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


class PrunedModel(nn.Module):
    """Wraps a victim model with a channel mask on its penultimate features."""

    def __init__(self, base: nn.Module, mask: np.ndarray):
        super().__init__()
        self.base = base
        self.register_buffer("channel_mask", torch.as_tensor(mask, dtype=torch.float32))

    def features(self, x):
        return self.base.features(x) * self.channel_mask

    def forward(self, x):
        return self.base.fc(self.features(x))


@torch.no_grad()
def fine_prune(model, probe_images: np.ndarray, probe_labels: np.ndarray,
               max_ca_drop: float = 0.10, device: str = "cpu"):
    """Iteratively zero the channel with the lowest mean probe activation;
    stop before the probe accuracy drop exceeds ``max_ca_drop``.

    Returns (pruned model, info dict). The returned model's probe accuracy
    is always >= (1 - max_ca_drop) * original probe accuracy.
    """
    from ..training import extract_latents

    model = model.to(device).eval()
    feats = torch.as_tensor(extract_latents(model, probe_images, device=device))
    labels = torch.as_tensor(np.asarray(probe_labels, dtype=np.int64))
    fc = model.fc

    def probe_ca(mask: torch.Tensor) -> float:
        pred = fc((feats * mask)).argmax(dim=1)
        return float((pred == labels).float().mean())

    dim = feats.shape[1]
    mask = torch.ones(dim)
    ca_before = probe_ca(mask)
    floor = (1.0 - max_ca_drop) * ca_before
    order = torch.argsort(feats.mean(dim=0)).tolist()  # ascending mean activation

    pruned = []
    for ch in order:
        mask[ch] = 0.0
        if probe_ca(mask) < floor:
            mask[ch] = 1.0  # revert the violating prune and stop
            break
        pruned.append(int(ch))

    info = {
        "pruned_channels": pruned,
        "n_pruned": len(pruned),
        "probe_ca_before": ca_before,
        "probe_ca_after": probe_ca(mask),
        "max_ca_drop": max_ca_drop,
    }
    return PrunedModel(model, mask.numpy()), info
