import numpy as np
import pytest

from latsep.cleansers import (
    E_THRESHOLD,
    CleanseResult,
    activation_clustering,
    scan,
    spectral_signature,
    spectre,
    synth_latents,
)
from latsep.errors import ConfigError
from latsep.latent import CLEAN, PAYLOAD


def multiclass(num_classes=10, n_per_class=300, dim=64, poisoned_class=0,
               n_poison=0, separation=10.0, seed=0):
    """Synthetic multi-class latent set; class `poisoned_class` carries
    `n_poison` planted rows offset by `separation` along a seeded direction.
    Returns (latents, labels, planted_indices)."""
    rng = np.random.default_rng(seed)
    blocks, labels, planted = [], [], []
    cursor = 0
    for c in range(num_classes):
        if c == poisoned_class and n_poison > 0:
            cl = synth_latents(n_per_class - n_poison, n_poison, dim, separation, seed=seed + 100)
            blocks.append(cl.reps)
            planted = (cursor + np.flatnonzero(cl.roles == PAYLOAD)).tolist()
        else:
            blocks.append(rng.normal(size=(n_per_class, dim)))
        labels.extend([c] * n_per_class)
        cursor += n_per_class
    return np.concatenate(blocks), np.asarray(labels), np.asarray(planted, dtype=np.int64)


# ---------------------------------------------------------------------------
# spectral signature
# ---------------------------------------------------------------------------

def test_spectral_signature_recovers_shifted_rows_exactly():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(110, 64))
    axis = np.zeros(64)
    axis[7] = 1.0
    shifted = np.arange(100, 110)
    X[shifted] += 10.0 * axis
    labels = np.zeros(110, dtype=int)

    # independent oracle: scores from the eigendecomposition of the scatter
    Xc = X - X.mean(axis=0)
    eigvals, eigvecs = np.linalg.eigh(Xc.T @ Xc)
    v = eigvecs[:, -1]
    oracle_scores = (Xc @ v) ** 2
    assert set(np.argsort(oracle_scores)[-10:]) == set(shifted)

    rate = 10 / (1.5 * 110)  # budget of exactly 10
    result = spectral_signature(X, labels, payload_rate=rate)
    assert set(result.suspected_indices.tolist()) == set(shifted)


def test_spectral_signature_budget_arithmetic():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10000, 4))
    labels = np.repeat([0, 1], 5000)
    result = spectral_signature(X, labels, payload_rate=0.005)
    # round-half-up: 1.5 * 0.005 * 5000 = 37.5 -> 38 per class
    per_class = {c: int((labels[result.suspected_indices] == c).sum()) for c in (0, 1)}
    assert per_class == {0: 38, 1: 38}
    assert len(result.suspected_indices) == 76


def test_spectral_signature_skips_degenerate_class():
    X = np.zeros((20, 8))
    X[10:] = np.random.default_rng(2).normal(size=(10, 8))
    labels = np.array([0] * 10 + [1] * 10)
    with pytest.warns(UserWarning, match="rank 0"):
        result = spectral_signature(X, labels, payload_rate=0.2)
    assert 0 not in result.flagged_classes
    assert 1 in result.flagged_classes


# ---------------------------------------------------------------------------
# activation clustering
# ---------------------------------------------------------------------------

def test_activation_clustering_flags_split_class():
    latents, labels, planted = multiclass(num_classes=3, n_per_class=200, dim=32,
                                          n_poison=60, separation=10.0, seed=3)
    result = activation_clustering(latents, labels)
    assert result.flagged_classes == {0}
    assert result.per_class_scores[0] > 0.15
    assert set(planted.tolist()) <= set(result.suspected_indices.tolist())


def test_activation_clustering_quiet_on_single_cluster():
    rng = np.random.default_rng(4)
    flags = 0
    for rep in range(20):
        X = rng.normal(size=(200, 16))
        result = activation_clustering(X, np.zeros(200, dtype=int), seed=rep)
        flags += bool(result.flagged_classes)
        assert result.per_class_scores[0] < 0.15
    assert flags == 0


def test_activation_clustering_size_rule_variant():
    latents, labels, planted = multiclass(num_classes=2, n_per_class=200, dim=16,
                                          n_poison=40, separation=10.0, seed=5)
    result = activation_clustering(latents, labels, min_cluster_fraction=0.35)
    assert 0 in result.flagged_classes
    assert set(planted.tolist()) <= set(result.suspected_indices.tolist())


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------

def base_set(dim=64, n=2000, seed=11, num_classes=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, num_classes, size=n)


def test_scan_homogeneous_class_below_threshold():
    base, base_labels = base_set()
    rng = np.random.default_rng(6)
    X = rng.normal(size=(1000, 64))
    labels = np.zeros(1000, dtype=int)
    result = scan(X, labels, base, base_labels)
    assert result.per_class_scores[0] < E_THRESHOLD
    assert not result.flagged_classes


def test_scan_two_component_class_flagged_and_minority_suspected():
    base, base_labels = base_set()
    cl = synth_latents(n_clean=700, n_poison=300, dim=64, separation=10.0, seed=7)
    labels = np.zeros(1000, dtype=int)
    result = scan(cl.reps, labels, base, base_labels)

    # oracle lower bound: likelihood-ratio gain of the true split
    mu_all = cl.reps.mean(axis=0)
    gain_true = 0.0
    for role in (CLEAN, PAYLOAD):
        G = cl.reps[cl.roles == role]
        gain_true += ((G - mu_all) ** 2).sum() - ((G - G.mean(axis=0)) ** 2).sum()
    gain_true /= len(cl.reps)

    score = result.per_class_scores[0]
    assert score > E_THRESHOLD
    assert score >= 0.8 * gain_true
    planted = set(np.flatnonzero(cl.roles == PAYLOAD).tolist())
    assert planted <= set(result.suspected_indices.tolist())
    assert result.flagged_classes == {0}


def test_scan_null_false_positive_rate():
    base, base_labels = base_set(seed=12)
    flagged = 0
    for rep in range(25):
        rng = np.random.default_rng(1000 + rep)
        X = rng.normal(size=(600, 64))
        result = scan(X, np.zeros(600, dtype=int), base, base_labels, seed=rep)
        flagged += bool(result.flagged_classes)
    assert flagged == 0


def test_scan_requires_base():
    with pytest.raises(ConfigError):
        scan(np.zeros((10, 4)), np.zeros(10, dtype=int), np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_scan_pca_reduction_path():
    base, base_labels = base_set(dim=96, seed=13)
    cl = synth_latents(n_clean=400, n_poison=100, dim=96, separation=10.0, seed=8)
    result = scan(cl.reps, np.zeros(500, dtype=int), base, base_labels, pca_dim=32)
    assert result.parameters["pca_dim"] == 32
    assert result.per_class_scores[0] > E_THRESHOLD


# ---------------------------------------------------------------------------
# spectre
# ---------------------------------------------------------------------------

def test_spectre_flags_planted_class_and_recovers():
    latents, labels, planted = multiclass(num_classes=10, n_per_class=300, dim=64,
                                          n_poison=15, separation=10.0, seed=9)
    rate = len(planted) / len(labels)
    result = spectre(latents, labels, payload_rate=rate)
    assert result.flagged_classes == {0}
    recovered = set(result.suspected_indices.tolist()) & set(planted.tolist())
    assert len(recovered) >= 0.9 * len(planted)
    # single-class budget: round_half_up(1.5 * rho_p * n)
    assert len(result.suspected_indices) == round(1.5 * rate * len(labels) + 0.5) or \
        len(result.suspected_indices) == int(np.floor(1.5 * rate * len(labels) + 0.5))


def test_spectre_all_clean_still_picks_exactly_one_class():
    rng = np.random.default_rng(10)
    latents = rng.normal(size=(900, 32))
    labels = np.repeat(np.arange(3), 300)
    result = spectre(latents, labels, payload_rate=0.01)
    assert len(result.flagged_classes) == 1
    budget = int(np.floor(1.5 * 0.01 * 900 + 0.5))
    assert len(result.suspected_indices) == budget
    flagged = next(iter(result.flagged_classes))
    assert (labels[result.suspected_indices] == flagged).all()


def test_spectre_rejects_tiny_classes():
    rng = np.random.default_rng(11)
    latents = rng.normal(size=(40, 64))
    labels = np.repeat([0, 1], 20)
    with pytest.raises(ConfigError):
        spectre(latents, labels, payload_rate=0.1, pca_dim=32)


# ---------------------------------------------------------------------------
# shared properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["spectral_signature", "activation_clustering", "scan", "spectre"])
def test_determinism(method):
    latents, labels, _ = multiclass(num_classes=3, n_per_class=150, dim=32,
                                    n_poison=30, separation=8.0, seed=12)
    base, base_labels = base_set(dim=32, n=600, seed=14, num_classes=3)

    def run():
        if method == "spectral_signature":
            return spectral_signature(latents, labels, payload_rate=30 / 450)
        if method == "activation_clustering":
            return activation_clustering(latents, labels)
        if method == "scan":
            return scan(latents, labels, base, base_labels)
        return spectre(latents, labels, payload_rate=30 / 450)

    a, b = run(), run()
    assert np.array_equal(a.suspected_indices, b.suspected_indices)
    assert a.per_class_scores == b.per_class_scores
    assert a.flagged_classes == b.flagged_classes


def test_label_permutation_equivariance():
    latents, labels, _ = multiclass(num_classes=4, n_per_class=120, dim=16,
                                    n_poison=24, separation=9.0, seed=15)
    perm = {0: 2, 1: 3, 2: 0, 3: 1}
    permuted = np.vectorize(perm.get)(labels)
    a = activation_clustering(latents, labels)
    b = activation_clustering(latents, permuted)
    assert {perm[c] for c in a.flagged_classes} == b.flagged_classes
    assert np.array_equal(a.suspected_indices, b.suspected_indices)


def test_cleanse_result_roundtrip():
    result = CleanseResult(
        method="demo",
        suspected_indices=np.array([5, 1, 9]),
        per_class_scores={0: 1.5, 3: 0.2},
        flagged_classes={3},
        parameters={"x": 1},
    )
    assert np.array_equal(result.suspected_indices, [1, 5, 9])
    back = CleanseResult.from_dict(result.to_dict())
    assert np.array_equal(back.suspected_indices, result.suspected_indices)
    assert back.per_class_scores == result.per_class_scores
    assert back.flagged_classes == result.flagged_classes


# ---------------------------------------------------------------------------
# synth_latents generator
# ---------------------------------------------------------------------------

def test_synth_latents_separation_zero_is_one_population():
    cl = synth_latents(500, 500, dim=16, separation=0.0, seed=16)
    clean = cl.reps[cl.roles == CLEAN]
    poison = cl.reps[cl.roles == PAYLOAD]
    assert np.linalg.norm(clean.mean(axis=0) - poison.mean(axis=0)) < 0.5


def test_synth_latents_no_poison():
    cl = synth_latents(100, 0, dim=8, separation=5.0, seed=17)
    assert (cl.roles == CLEAN).all()
    assert len(cl.planted_reps) == 0


def test_synth_latents_separable_at_10_sigma():
    from sklearn.svm import LinearSVC

    cl = synth_latents(200, 50, dim=64, separation=10.0, seed=18)
    y = cl.planted_mask.astype(int)
    acc = LinearSVC(C=1.0).fit(cl.reps, y).score(cl.reps, y)
    assert acc == pytest.approx(1.0)


def test_synth_latents_dim_guard():
    with pytest.raises(ConfigError):
        synth_latents(10, 10, dim=1, separation=1.0, seed=0)
