"""Latent-space partitioning and separability diagnostics.

For each label class c the latent rows split into the clean population
(samples never touched by the attack) and the trigger-planted population
(payload or cover samples whose assigned label is c). The diagnostics
quantify how separable those two populations are: unsupervised 2-D
projections (PCA / t-SNE) for figures, and an oracle fit (a linear SVM
trained on the ground-truth roles) plus a silhouette score as numeric
criteria.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, UndefinedProfileError
from .poison import PoisonedDatasetManifest, Role

CLEAN, PAYLOAD, COVER = "clean", "payload", "cover"


@dataclass
class ClassLatents:
    label_class: int
    reps: np.ndarray  # (m, d)
    roles: np.ndarray  # (m,) of {clean, payload, cover}
    indices: np.ndarray  # (m,) original dataset indices

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        self.roles = np.asarray(self.roles)
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def planted_mask(self) -> np.ndarray:
        return self.roles != CLEAN

    @property
    def clean_reps(self) -> np.ndarray:
        return self.reps[~self.planted_mask]

    @property
    def planted_reps(self) -> np.ndarray:
        return self.reps[self.planted_mask]


def partition_by_class(latents: np.ndarray, assigned_labels: np.ndarray,
                       manifest: PoisonedDatasetManifest) -> dict[int, ClassLatents]:
    """Group latent rows by their assigned (possibly poisoned) label, with
    per-row roles recovered from the manifest."""
    latents = np.asarray(latents)
    assigned_labels = np.asarray(assigned_labels)
    if len(latents) != manifest.n or len(assigned_labels) != manifest.n:
        raise IntegrityError(
            f"latents/labels rows ({len(latents)}/{len(assigned_labels)}) != manifest n ({manifest.n})"
        )
    roles = np.full(manifest.n, CLEAN, dtype=object)
    for e in manifest.plan.entries:
        roles[e.index] = PAYLOAD if e.role is Role.PAYLOAD else COVER

    out = {}
    for c in np.unique(assigned_labels):
        idx = np.flatnonzero(assigned_labels == c)
        out[int(c)] = ClassLatents(
            label_class=int(c), reps=latents[idx], roles=roles[idx], indices=idx,
        )
    return out


@dataclass
class PCAResult:
    coords: np.ndarray  # (n, 2)
    explained_variance_ratio: np.ndarray  # (2,)
    components: np.ndarray  # (2, d)


def project_pca(reps: np.ndarray) -> PCAResult:
    """Project onto the top-2 principal directions of the mean-centered data.

    Components are ordered by descending explained variance; a zero-variance
    direction yields a warning and zero coordinates on that axis.
    """
    X = np.asarray(reps, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("PCA projection needs at least 2 samples")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    comps = vt[:2].copy()
    if comps.shape[0] < 2:  # d == 1
        comps = np.vstack([comps, np.zeros_like(comps[0])])
        s = np.append(s, 0.0)
        var = np.append(var, 0.0)
    # deterministic sign: make the largest-loading coefficient positive
    for k in range(2):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    coords = Xc @ comps.T
    scale = max(float(s[0]), 1.0)
    for k in range(2):
        if s[k] <= 1e-12 * scale:
            warnings.warn(f"principal axis {k} has zero variance; coordinates set to 0")
            coords[:, k] = 0.0
    ratio = (var[:2] / total) if total > 0 else np.zeros(2)
    return PCAResult(coords=coords, explained_variance_ratio=ratio, components=comps)


TSNE_PERPLEXITY = 30.0


def project_tsne(reps: np.ndarray, seed: int) -> np.ndarray:
    """Standard 2-D t-SNE embedding (figures only, never metrics)."""
    from sklearn.manifold import TSNE

    X = np.asarray(reps, dtype=np.float64)
    n = len(X)
    if n < 10:
        raise ValueError("t-SNE projection needs at least 10 samples")
    perplexity = min(TSNE_PERPLEXITY, (n - 1) / 3.0)
    emb = TSNE(n_components=2, perplexity=perplexity, init="pca",
               random_state=seed).fit_transform(X)
    return np.asarray(emb, dtype=np.float64)


SVM_PENALTY = 100.0  # large penalty approximating a hard-margin oracle fit


@dataclass
class SeparabilityProfile:
    label_class: int
    pca_coords: np.ndarray | None = None
    tsne_coords: np.ndarray | None = None
    svm_signed_distances: np.ndarray | None = None
    svm_train_accuracy: float | None = None
    silhouette: float | None = None
    counts: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    low_confidence: bool = False


def oracle_svm_profile(cl: ClassLatents) -> SeparabilityProfile:
    """Fit a max-margin linear separator with oracle role labels and report
    per-row signed distances to its hyperplane plus the training accuracy.

    Accuracy is balanced over the two roles so the chance level stays at 0.5
    even though planted rows are heavily outnumbered.
    """
    from sklearn.svm import LinearSVC

    y = cl.planted_mask.astype(int)
    if y.min() == y.max():
        raise UndefinedProfileError(
            f"class {cl.label_class} has a single role; oracle profile undefined"
        )
    clf = LinearSVC(C=SVM_PENALTY, class_weight="balanced", max_iter=50000, tol=1e-5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # liblinear convergence chatter on inseparable data
        clf.fit(cl.reps, y)
    w = clf.coef_.ravel()
    margin = clf.decision_function(cl.reps) / max(np.linalg.norm(w), 1e-12)
    pred = clf.predict(cl.reps)
    acc_clean = float((pred[y == 0] == 0).mean())
    acc_poison = float((pred[y == 1] == 1).mean())
    return SeparabilityProfile(
        label_class=cl.label_class,
        svm_signed_distances=np.asarray(margin, dtype=np.float64),
        svm_train_accuracy=0.5 * (acc_clean + acc_poison),
        counts={"clean": int((y == 0).sum()), "planted": int((y == 1).sum())},
        params={"svm_penalty": SVM_PENALTY, "class_weight": "balanced",
                "accuracy": "balanced over roles"},
    )


def separability_score(cl: ClassLatents) -> dict:
    """Silhouette (Euclidean, raw latents, oracle role labels) together with
    the oracle SVM training accuracy; both feed the heterogeneity decision."""
    from sklearn.metrics import silhouette_score

    y = cl.planted_mask.astype(int)
    if y.min() == y.max():
        raise UndefinedProfileError(
            f"class {cl.label_class} has a single role; separability undefined"
        )
    low_confidence = min((y == 0).sum(), (y == 1).sum()) < 2
    if low_confidence:
        # single-point convention: a singleton cluster contributes silhouette 0
        from sklearn.metrics import silhouette_samples

        vals = silhouette_samples(cl.reps, y)
        sil = float(vals.mean())
    else:
        sil = float(silhouette_score(cl.reps, y))
    profile = oracle_svm_profile(cl)
    return {
        "silhouette": sil,
        "svm_train_accuracy": profile.svm_train_accuracy,
        "low_confidence": low_confidence,
    }


def separability_profile(cl: ClassLatents, seed: int = 0, with_tsne: bool = True,
                         max_tsne_rows: int | None = None) -> SeparabilityProfile:
    """Full per-class profile: projections plus oracle scores where defined."""
    pca = project_pca(cl.reps)
    profile = SeparabilityProfile(label_class=cl.label_class, pca_coords=pca.coords)
    profile.params["pca_explained_variance_ratio"] = pca.explained_variance_ratio.tolist()
    profile.params["tsne"] = {"seed": seed, "perplexity": TSNE_PERPLEXITY}
    if with_tsne and len(cl.reps) >= 10:
        reps = cl.reps
        tsne_rows = np.arange(len(reps))
        if max_tsne_rows is not None and len(reps) > max_tsne_rows:
            rng = np.random.default_rng(seed)
            tsne_rows = np.sort(rng.choice(len(reps), size=max_tsne_rows, replace=False))
            profile.params["tsne"]["subsampled_to"] = int(max_tsne_rows)
            reps = reps[tsne_rows]
        profile.tsne_coords = project_tsne(reps, seed)
        profile.params["tsne_rows"] = tsne_rows
    has_both_roles = 0 < cl.planted_mask.sum() < len(cl.reps)
    if has_both_roles:
        scores = separability_score(cl)
        svm = oracle_svm_profile(cl)
        profile.svm_signed_distances = svm.svm_signed_distances
        profile.svm_train_accuracy = svm.svm_train_accuracy
        profile.silhouette = scores["silhouette"]
        profile.low_confidence = scores["low_confidence"]
        profile.counts = svm.counts
    else:
        profile.counts = {"clean": int((~cl.planted_mask).sum()),
                          "planted": int(cl.planted_mask.sum())}
    return profile
