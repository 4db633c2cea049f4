"""Latent-separability poison detectors.

Each cleanser maps (latents, assigned labels, parameters) to a set of
suspected training-sample indices plus per-class scores. Removal budgets
follow the round-half-up convention of :func:`latsep.poison.round_half_up`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError
from .latent import CLEAN, PAYLOAD, ClassLatents
from .poison import round_half_up

E_THRESHOLD = math.e


@dataclass
class CleanseResult:
    method: str
    suspected_indices: np.ndarray
    per_class_scores: dict[int, float]
    flagged_classes: set[int]
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.suspected_indices = np.sort(np.asarray(self.suspected_indices, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "suspected_indices": self.suspected_indices.tolist(),
            "per_class_scores": {str(k): float(v) for k, v in self.per_class_scores.items()},
            "flagged_classes": sorted(int(c) for c in self.flagged_classes),
            "parameters": self.parameters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleanseResult":
        return cls(
            method=d["method"],
            suspected_indices=np.asarray(d["suspected_indices"], dtype=np.int64),
            per_class_scores={int(k): v for k, v in d["per_class_scores"].items()},
            flagged_classes=set(d["flagged_classes"]),
            parameters=d.get("parameters", {}),
        )


def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def spectral_signature(latents: np.ndarray, labels: np.ndarray, payload_rate: float,
                       budget_scale: float = 1.5) -> CleanseResult:
    """Top-singular-direction outlier scores; removes the round(1.5*rho_p*n_c)
    highest-scoring samples of every class."""
    latents = np.asarray(latents, dtype=np.float64)
    suspected, scores, flagged = [], {}, set()
    for c, idx in _class_indices(labels).items():
        if len(idx) < 2:
            warnings.warn(f"class {c} has fewer than 2 samples; skipped")
            continue
        X = latents[idx]
        Xc = X - X.mean(axis=0)
        if not Xc.any():
            warnings.warn(f"class {c} latents have rank 0; skipped")
            continue
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        tau = (Xc @ vt[0]) ** 2
        scores[c] = float(tau.max())
        budget = min(round_half_up(budget_scale * payload_rate * len(idx)), len(idx))
        if budget > 0:
            top = np.argsort(tau)[::-1][:budget]
            suspected.extend(idx[top].tolist())
            flagged.add(c)
    return CleanseResult(
        method="spectral_signature",
        suspected_indices=np.asarray(suspected, dtype=np.int64),
        per_class_scores=scores,
        flagged_classes=flagged,
        parameters={"payload_rate": payload_rate, "budget_scale": budget_scale,
                    "budget_rule": "round_half_up(scale * rho_p * class_size) per class"},
    )


def activation_clustering(latents: np.ndarray, labels: np.ndarray,
                          silhouette_threshold: float = 0.15,
                          min_cluster_fraction: float | None = None,
                          pca_dim: int = 10, seed: int = 0,
                          kmeans_retries: int = 3) -> CleanseResult:
    """Per class: 10-D PCA, 2-means, silhouette of the split. A class is
    flagged when silhouette exceeds the threshold (or, in the large-latent
    variant, when the smaller cluster is below ``min_cluster_fraction``);
    its smaller cluster is the suspected set."""
    from sklearn.cluster import KMeans
    from sklearn.decomposition import PCA
    from sklearn.metrics import silhouette_score

    latents = np.asarray(latents, dtype=np.float64)
    suspected, scores, flagged = [], {}, set()
    for c, idx in _class_indices(labels).items():
        if len(idx) < 4:
            warnings.warn(f"class {c} has fewer than 4 samples; skipped")
            continue
        X = latents[idx]
        k = min(pca_dim, X.shape[1], len(idx) - 1)
        Xr = PCA(n_components=k, random_state=seed).fit_transform(X)
        assign = None
        for attempt in range(kmeans_retries):
            km = KMeans(n_clusters=2, n_init=10, random_state=seed + attempt).fit(Xr)
            if len(np.unique(km.labels_)) == 2:
                assign = km.labels_
                break
        if assign is None:
            warnings.warn(f"2-means failed to split class {c} after {kmeans_retries} tries")
            continue
        sil = float(silhouette_score(Xr, assign))
        scores[c] = sil
        sizes = np.bincount(assign, minlength=2)
        smaller = int(np.argmin(sizes))
        if min_cluster_fraction is None:
            keep = sil > silhouette_threshold
        else:
            keep = sizes[smaller] < min_cluster_fraction * len(idx)
        if keep:
            flagged.add(c)
            suspected.extend(idx[assign == smaller].tolist())
    return CleanseResult(
        method="activation_clustering",
        suspected_indices=np.asarray(suspected, dtype=np.int64),
        per_class_scores=scores,
        flagged_classes=flagged,
        parameters={"silhouette_threshold": silhouette_threshold,
                    "min_cluster_fraction": min_cluster_fraction,
                    "pca_dim": pca_dim, "seed": seed},
    )


def _two_group_untangle(Z: np.ndarray, max_iter: int, seed: int):
    """Hard-EM split of whitened rows into two mean clusters (shared identity
    covariance). Returns (assignments, mu, converged)."""
    _, _, vt = np.linalg.svd(Z - Z.mean(axis=0), full_matrices=False)
    assign = (Z @ vt[0] > np.median(Z @ vt[0])).astype(int)
    rng = np.random.default_rng(seed)
    converged = False
    for _ in range(max_iter):
        if assign.min() == assign.max():  # one group emptied; random restart
            assign = rng.integers(0, 2, size=len(Z))
            continue
        mu = np.stack([Z[assign == g].mean(axis=0) for g in (0, 1)])
        d0 = ((Z - mu[0]) ** 2).sum(axis=1)
        d1 = ((Z - mu[1]) ** 2).sum(axis=1)
        new_assign = (d1 < d0).astype(int)
        if np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
    mu = np.stack([Z[assign == g].mean(axis=0) if (assign == g).any() else np.zeros(Z.shape[1])
                   for g in (0, 1)])
    return assign, mu, converged


def scan(latents: np.ndarray, labels: np.ndarray, clean_base_latents: np.ndarray,
         clean_base_labels: np.ndarray, threshold: float = E_THRESHOLD,
         max_iter: int = 100, ridge: float = 1e-6, pca_dim: int | None = None,
         seed: int = 0) -> CleanseResult:
    """Statistical contamination analysis: estimate the global intra-class
    covariance from a held-clean base, untangle each class into identity +
    variation components, and score the class by the per-sample normalized
    likelihood-ratio gain of a two-component fit over a one-component fit.
    Classes scoring above ``threshold`` (default e) are flagged and the
    minority component's members suspected."""
    latents = np.asarray(latents, dtype=np.float64)
    base = np.asarray(clean_base_latents, dtype=np.float64)
    base_labels = np.asarray(clean_base_labels)
    if len(base) == 0:
        raise ConfigError("scan requires a non-empty clean base set")

    if pca_dim is not None and pca_dim < latents.shape[1]:
        from sklearn.decomposition import PCA

        reducer = PCA(n_components=pca_dim, random_state=seed).fit(base)
        base = reducer.transform(base)
        latents = reducer.transform(latents)

    # pooled within-class covariance of the clean base
    residuals = []
    for c in np.unique(base_labels):
        Xc = base[base_labels == c]
        residuals.append(Xc - Xc.mean(axis=0))
    R = np.concatenate(residuals, axis=0)
    d = R.shape[1]
    S = (R.T @ R) / max(len(R) - 1, 1)
    S += ridge * (np.trace(S) / d + 1.0) * np.eye(d)
    L = np.linalg.cholesky(S)

    suspected, scores, flagged = [], {}, set()
    low_confidence = []
    for c, idx in _class_indices(labels).items():
        X = latents[idx]
        if len(idx) < 4:
            warnings.warn(f"class {c} has fewer than 4 samples; skipped")
            continue
        Zc = solve_triangular(L, (X - X.mean(axis=0)).T, lower=True).T
        assign, mu, converged = _two_group_untangle(Zc, max_iter=max_iter, seed=seed)
        if not converged:
            low_confidence.append(int(c))
        one = (Zc ** 2).sum()
        two = sum(((Zc[assign == g] - mu[g]) ** 2).sum() for g in (0, 1) if (assign == g).any())
        score = float((one - two) / len(idx))
        scores[c] = score
        if score > threshold:
            flagged.add(c)
            sizes = np.bincount(assign, minlength=2)
            minority = int(np.argmin(sizes))
            suspected.extend(idx[assign == minority].tolist())
    return CleanseResult(
        method="scan",
        suspected_indices=np.asarray(suspected, dtype=np.int64),
        per_class_scores=scores,
        flagged_classes=flagged,
        parameters={"threshold": threshold, "max_iter": max_iter, "ridge": ridge,
                    "pca_dim": pca_dim, "seed": seed,
                    "low_confidence_classes": low_confidence,
                    "score": "per-sample two-vs-one component likelihood-ratio gain"},
    )


def _symmetric_inv_sqrt(S: np.ndarray, ridge: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    floor = ridge * (np.abs(vals).max() + 1.0)
    vals = np.maximum(vals, floor)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def _que_scores(Y: np.ndarray, alpha: float) -> np.ndarray:
    """Quadratic outlier scores y' Q y with Q = exp(alpha*(S-I)/(||S||-1))/tr."""
    S = np.cov(Y, rowvar=False)
    S = np.atleast_2d(S)
    k = S.shape[0]
    opnorm = float(np.linalg.eigvalsh(S).max())
    if opnorm - 1.0 < 1e-9:
        Q = np.eye(k) / k
    else:
        vals, vecs = np.linalg.eigh(alpha * (S - np.eye(k)) / (opnorm - 1.0))
        Q = (vecs * np.exp(vals)) @ vecs.T
        Q /= np.trace(Q)
    return np.einsum("ij,jk,ik->i", Y, Q, Y)


def spectre(latents: np.ndarray, labels: np.ndarray, payload_rate: float,
            budget_scale: float = 1.5, pca_dim: int = 32, alpha: float = 4.0,
            trim_steps: int = 2, ridge: float = 1e-6) -> CleanseResult:
    """Robust-whitening QUE outlier detection. Classes are ranked by their
    highest QUE score; only the top class loses its round(1.5*rho_p*n)
    highest-scoring samples."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    by_class = _class_indices(labels)

    class_scores, class_taus = {}, {}
    for c, idx in by_class.items():
        X = latents[idx]
        k = min(pca_dim, X.shape[1])
        if len(idx) <= k:
            raise ConfigError(
                f"class {c} has {len(idx)} samples, not more than the reduced dimension {k}"
            )
        from sklearn.decomposition import PCA

        Z = PCA(n_components=k, random_state=0).fit_transform(X)
        # expected poison count if this class is the target: all payload lands here
        eps = max(1, min(round_half_up(budget_scale * payload_rate * n), len(idx) // 3))
        selected = np.arange(len(idx))
        tau = np.zeros(len(idx))
        for _ in range(max(trim_steps, 1)):
            mu = Z[selected].mean(axis=0)
            cov = np.cov(Z[selected], rowvar=False)
            W = _symmetric_inv_sqrt(np.atleast_2d(cov), ridge)
            Y = (Z - mu) @ W
            tau = _que_scores(Y, alpha)
            keep = min(len(idx), max(len(idx) - 2 * eps, k + 1))
            selected = np.argsort(tau)[:keep]
        class_taus[c] = tau
        class_scores[c] = float(tau.max())

    target = max(class_scores, key=class_scores.get)
    budget = min(round_half_up(budget_scale * payload_rate * n), len(by_class[target]))
    tau = class_taus[target]
    top = np.argsort(tau)[::-1][:budget]
    suspected = by_class[target][top]
    return CleanseResult(
        method="spectre",
        suspected_indices=suspected,
        per_class_scores=class_scores,
        flagged_classes={int(target)},
        parameters={"payload_rate": payload_rate, "budget_scale": budget_scale,
                    "pca_dim": pca_dim, "alpha": alpha, "trim_steps": trim_steps,
                    "ridge": ridge,
                    "budget_rule": "round_half_up(scale * rho_p * n) in the top class"},
    )


def synth_latents(n_clean: int, n_poison: int, dim: int, separation: float,
                  seed: int) -> ClassLatents:
    """Synthetic oracle-test latents: clean rows ~ N(0, I), poison rows
    ~ N(separation * u, I) for a seeded random unit direction u."""
    if dim < 2:
        raise ConfigError("synth_latents needs dim >= 2")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    clean = rng.normal(size=(n_clean, dim))
    poison = rng.normal(size=(n_poison, dim)) + separation * u
    reps = np.concatenate([clean, poison], axis=0)
    roles = np.array([CLEAN] * n_clean + [PAYLOAD] * n_poison, dtype=object)
    return ClassLatents(label_class=0, reps=reps, roles=roles,
                        indices=np.arange(n_clean + n_poison))
