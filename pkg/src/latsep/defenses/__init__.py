from .abl import ABLResult, abl
from .fine_pruning import PrunedModel, fine_prune
from .neural_cleanse import NCResult, anomaly_indices_from_norms, nc_unlearn, neural_cleanse
from .strip import StripProfile, strip_cleanse, strip_entropies, strip_filter

__all__ = [
    "ABLResult",
    "NCResult",
    "PrunedModel",
    "StripProfile",
    "abl",
    "anomaly_indices_from_norms",
    "fine_prune",
    "nc_unlearn",
    "neural_cleanse",
    "strip_cleanse",
    "strip_entropies",
    "strip_filter",
]
