import numpy as np
import pytest

from mfclust.evaluate import (
    contingency_table,
    facet_label_accuracies,
    factor_accuracies,
    hungarian_accuracy,
    majority_accuracy,
    probe_accuracy,
    stability_sweep,
)


def labels_from_table(table):
    """Materialize (pred, truth) arrays realizing a contingency table."""
    pred, truth = [], []
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            pred += [i] * table[i, j]
            truth += [j] * table[i, j]
    return np.array(pred), np.array(truth)


def test_hungarian_identity_and_relabeling():
    truth = np.array([0, 1, 2, 0, 1, 2, 2])
    assert hungarian_accuracy(truth, truth) == 1.0
    relabeled = (truth + 1) % 3
    assert hungarian_accuracy(relabeled, truth) == 1.0


def test_hungarian_three_by_three_example():
    table = np.array([[5, 1, 0], [0, 4, 2], [1, 0, 7]])
    pred, truth = labels_from_table(table)
    # enumerate all 6 permutations by hand: the diagonal assignment wins
    assert hungarian_accuracy(pred, truth) == pytest.approx(16 / 20)


def test_hungarian_cardinality_mismatch_directs_to_majority():
    pred = np.array([0, 0, 1, 1, 2, 2])
    truth = np.array([0, 0, 1, 1, 1, 0])
    with pytest.raises(ValueError, match="majority_accuracy"):
        hungarian_accuracy(pred, truth)


def test_hungarian_large_k_uses_assignment_solver():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 12, size=500)
    perm = rng.permutation(12)
    pred = perm[truth]
    assert hungarian_accuracy(pred, truth) == 1.0


def test_majority_pure_clusters():
    pred = np.array([0, 0, 1, 1, 2, 2])
    truth = np.array([2, 2, 0, 0, 1, 1])
    assert majority_accuracy(pred, truth) == 1.0


def test_majority_single_cluster_fraction():
    pred = np.zeros(10, dtype=int)
    truth = np.array([0] * 6 + [1] * 4)
    assert majority_accuracy(pred, truth) == pytest.approx(0.6)


def test_majority_equals_hungarian_on_dominant_diagonal_tables():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        table = rng.integers(0, 10, size=(k, k))
        table[np.arange(k), np.arange(k)] += 100
        pred, truth = labels_from_table(table)
        assert majority_accuracy(pred, truth) == pytest.approx(
            hungarian_accuracy(pred, truth))


def test_majority_dominates_hungarian_on_random_equal_cardinality_tables():
    rng = np.random.default_rng(2)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        table = rng.integers(1, 12, size=(k, k))
        pred, truth = labels_from_table(table)
        assert majority_accuracy(pred, truth) >= hungarian_accuracy(pred, truth) - 1e-12


def test_accuracy_bounds_and_permutation_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k = int(rng.integers(2, 5))
        pred = rng.integers(0, k, size=200)
        truth = rng.integers(0, k, size=200)
        if len(np.unique(pred)) != len(np.unique(truth)):
            continue
        maj = majority_accuracy(pred, truth)
        hung = hungarian_accuracy(pred, truth)
        max_freq = np.bincount(truth).max() / len(truth)
        assert max_freq <= maj <= 1.0
        assert 1.0 / k - 1e-12 <= hung <= 1.0

        cluster_perm = rng.permutation(k)
        class_perm = rng.permutation(k)
        assert majority_accuracy(cluster_perm[pred], class_perm[truth]) == pytest.approx(maj)
        assert hungarian_accuracy(cluster_perm[pred], class_perm[truth]) == pytest.approx(hung)


def test_facet_and_factor_accuracy_helpers():
    assignments = np.stack([
        np.array([0, 0, 1, 1, 2, 2]),     # facet 0 clusters factor A
        np.array([0, 1, 0, 1, 0, 1]),     # facet 1 clusters factor B
    ], axis=-1)
    labels = {"A": np.array([0, 0, 1, 1, 2, 2]),
              "B": np.array([1, 0, 1, 0, 1, 0])}
    facet_acc = facet_label_accuracies(assignments, labels)
    np.testing.assert_allclose(facet_acc, [1.0, 1.0])
    factor_acc = factor_accuracies(assignments, labels)
    assert factor_acc["A"] == 1.0 and factor_acc["B"] == 1.0


def test_probe_reads_separable_blobs():
    rng = np.random.default_rng(4)
    centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    X = np.concatenate([rng.normal(c, 0.4, size=(200, 2)) for c in centers])
    y = np.repeat([0, 1, 2], 200)
    shuffle = rng.permutation(len(y))
    X, y = X[shuffle], y[shuffle]
    acc = probe_accuracy(X[:450], y[:450], X[450:], y[450:],
                         rng=np.random.default_rng(5))
    assert acc > 0.95


def test_probe_on_random_labels_is_chance_level():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(400, 3))
    y = rng.integers(0, 4, size=400)
    acc = probe_accuracy(X[:300], y[:300], X[300:], y[300:],
                         rng=np.random.default_rng(7))
    assert abs(acc - 0.25) < 0.1


def test_probe_rejects_single_class():
    X = np.zeros((10, 2))
    y = np.zeros(10, dtype=int)
    with pytest.raises(ValueError):
        probe_accuracy(X, y, X, y)


def test_stability_sweep_identical_seeds_zero_std(tmp_path):
    from mfclust.model import ModelConfig
    from mfclust.train import TrainConfig
    from test_train import tiny_synth

    data = tiny_synth(seed=13)
    mcfg = ModelConfig(J=2, input_dim=256, z_dims=(2, 2), K=(2, 2),
                       backbone_widths=(16, 8), fade_in_batches=5)
    tcfg = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=0)
    curve_path = tmp_path / "curves.csv"
    summary_path = tmp_path / "summary.csv"
    curves, agg = stability_sweep(mcfg, tcfg, data, data, seeds=[5, 5],
                                  curve_path=curve_path, summary_path=summary_path)
    assert np.all(agg["std"] == 0.0)

    rows = curve_path.read_text().strip().splitlines()
    assert rows[0].startswith("seed,epoch,acc_facet_0")
    assert len(rows) - 1 == 2 * 2  # seeds x epochs
    assert summary_path.exists()


def test_stability_sweep_needs_two_seeds():
    with pytest.raises(ValueError):
        stability_sweep(None, None, None, None, seeds=[1])
