import numpy as np
import pytest

from kpdiscover.evaluation import (
    BehaviorDataset,
    average_precision,
    fit_keypoint_regression,
    mean_average_precision,
    precision_recall_curve,
    train_behavior_classifier,
)


class TestKeypointRegression:
    def test_exact_linear_zero_error(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (50, 8))
        w_true = rng.normal(0, 1, (8, 4))
        res = fit_keypoint_regression(x, x @ w_true, image_size=1.0)
        assert res.pct_mse <= 1e-8
        assert not res.rank_deficient

    def test_identity_when_discovered_equals_truth(self):
        rng = np.random.default_rng(1)
        y_px = rng.uniform(0, 256, (40, 6))
        res = fit_keypoint_regression(
            y_px.copy(), y_px, image_size=256.0, coord_columns=range(6)
        )
        assert res.pct_mse <= 1e-8
        np.testing.assert_allclose(res.weights, np.eye(6), atol=1e-8)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (200, 20))
        w_true = rng.normal(0, 1, (20, 6))
        y = x @ w_true + rng.normal(0, 0.01, (200, 6))
        res = fit_keypoint_regression(x, y, image_size=1.0)

        w_oracle = np.linalg.solve(x.T @ x, x.T @ y)
        pct_oracle = 100.0 * np.mean((x @ w_oracle - y) ** 2)
        assert res.pct_mse == pytest.approx(pct_oracle, abs=1e-10)

    def test_reparameterization_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, (100, 10))
        y = rng.normal(0, 1, (100, 4))
        a = rng.normal(0, 1, (10, 10)) + 3 * np.eye(10)
        base = fit_keypoint_regression(x, y, image_size=1.0).pct_mse
        reparam = fit_keypoint_regression(x @ a, y, image_size=1.0).pct_mse
        assert reparam == pytest.approx(base, abs=1e-8)

    def test_rank_deficient_flagged(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, (30, 4))
        x = np.concatenate([x, x[:, :1]], axis=1)  # duplicated column
        y = rng.normal(0, 1, (30, 2))
        res = fit_keypoint_regression(x, y, image_size=1.0)
        assert res.rank_deficient
        assert np.isfinite(res.pct_mse)

    def test_frame_count_mismatch(self):
        with pytest.raises(ValueError, match="frame count"):
            fit_keypoint_regression(np.zeros((5, 2)), np.zeros((6, 2)), 1.0)

    def test_non_finite_rejected(self):
        x = np.zeros((5, 2))
        x[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            fit_keypoint_regression(x, np.zeros((5, 2)), 1.0)


def oracle_average_precision(scores, positives):
    """Threshold-sweep AP with explicit loops."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = scores >= t
        tp = (predicted & positives).sum()
        precision = tp / predicted.sum()
        recall = tp / n_pos
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


class TestAveragePrecision:
    def test_perfect_ranking(self):
        scores = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
        positives = np.array([1, 1, 1, 0, 0], dtype=bool)
        assert average_precision(scores, positives) == pytest.approx(1.0)

    def test_constant_scores_give_prevalence(self):
        positives = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0], dtype=bool)
        scores = np.full(10, 0.5)
        assert average_precision(scores, positives) == pytest.approx(0.3)

    def test_hand_computed_example(self):
        # ranks of positives: 1, 4, 5, 9 ->
        # AP = 1*(1/4) + (2/4)*(1/4) + (3/5)*(1/4) + (4/9)*(1/4)
        scores = np.array([0.9, 0.8, 0.75, 0.7, 0.6, 0.5, 0.45, 0.4, 0.3, 0.2])
        positives = np.array([1, 0, 0, 1, 1, 0, 0, 0, 1, 0], dtype=bool)
        expected = 0.25 * (1.0 + 0.5 + 0.6 + 4.0 / 9.0)
        assert average_precision(scores, positives) == pytest.approx(expected)
        assert oracle_average_precision(scores, positives) == pytest.approx(expected)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_threshold_sweep_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 50))
        scores = rng.choice(np.linspace(0, 1, 7), size=n)  # plenty of ties
        positives = rng.random(n) < 0.4
        if not positives.any():
            positives[0] = True
        assert average_precision(scores, positives) == pytest.approx(
            oracle_average_precision(scores, positives), abs=1e-12
        )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(9)
        scores = rng.random(40)
        positives = rng.random(40) < 0.3
        positives[:2] = True
        a = average_precision(scores, positives)
        b = average_precision(np.exp(3 * scores) + 7, positives)
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_positives_errors(self):
        with pytest.raises(ValueError):
            average_precision(np.ones(4), np.zeros(4, dtype=bool))


class TestMeanAveragePrecision:
    def test_perfect(self):
        labels = np.array([0, 1, 0, 1])
        scores = np.eye(2)[labels]
        res = mean_average_precision(scores, labels)
        assert res.map == pytest.approx(1.0)

    def test_absent_class_excluded(self):
        labels = np.array([0, 0, 1, 1])
        scores = np.random.default_rng(0).random((4, 3))
        res = mean_average_precision(scores, labels)
        assert res.excluded_classes == [2]
        assert set(res.per_class_ap) == {0, 1}

    def test_constant_scores_map_is_mean_prevalence(self):
        labels = np.array([0] * 7 + [1] * 3)
        scores = np.full((10, 2), 0.5)
        res = mean_average_precision(scores, labels)
        assert res.per_class_ap[0] == pytest.approx(0.7)
        assert res.per_class_ap[1] == pytest.approx(0.3)
        assert res.map == pytest.approx(0.5)

    def test_non_finite_rejected(self):
        scores = np.full((4, 2), np.inf)
        with pytest.raises(ValueError):
            mean_average_precision(scores, np.array([0, 1, 0, 1]))

    def test_pr_curve_consistent_with_ap(self):
        rng = np.random.default_rng(11)
        scores = rng.random(30)
        positives = rng.random(30) < 0.4
        positives[0] = True
        precision, recall, _ = precision_recall_curve(scores, positives)
        deltas = np.diff(np.concatenate([[0.0], recall]))
        assert (precision * deltas).sum() == pytest.approx(
            average_precision(scores, positives), abs=1e-12
        )


def _block_dataset(rng, frames=240, block=40, noise=0.05):
    labels = (np.arange(frames) // block) % 2
    features = np.stack(
        [labels + rng.normal(0, noise, frames), rng.normal(0, 1, frames)], axis=1
    )
    return BehaviorDataset(features, labels)


class TestBehaviorClassifier:
    def test_separable_data_memorized(self):
        rng = np.random.default_rng(0)
        ds = _block_dataset(rng)
        clf = train_behavior_classifier(ds, window=5, epochs=20, seed=0)
        pred = clf.scores(ds.features).argmax(axis=1)
        assert (pred == ds.labels).mean() > 0.99

    def test_shuffled_labels_map_near_prior(self):
        rng = np.random.default_rng(1)
        features = rng.normal(0, 1, (300, 4)).astype(np.float32)
        labels = rng.integers(0, 2, 300)
        clf = train_behavior_classifier(
            BehaviorDataset(features[:200], labels[:200]), window=5, epochs=5, seed=0
        )
        scores = clf.scores(features[200:])
        res = mean_average_precision(scores, labels[200:])
        prior = np.mean([(labels[200:] == c).mean() for c in (0, 1)])
        assert abs(res.map - prior) < 0.1

    def test_train_set_as_test_matches(self):
        rng = np.random.default_rng(2)
        ds = _block_dataset(rng)
        clf = train_behavior_classifier(ds, window=5, epochs=10, seed=1)
        scores_a = clf.scores(ds.features)
        scores_b = clf.scores(ds.features.copy())
        map_a = mean_average_precision(scores_a, ds.labels).map
        map_b = mean_average_precision(scores_b, ds.labels).map
        assert map_b >= map_a - 0.01

    def test_single_class_errors(self):
        ds = BehaviorDataset(np.zeros((10, 2)), np.zeros(10, dtype=int))
        with pytest.raises(ValueError, match="2 classes"):
            train_behavior_classifier(ds)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(3)
        ds = _block_dataset(rng, frames=120)
        a = train_behavior_classifier(ds, window=5, epochs=3, seed=7)
        b = train_behavior_classifier(ds, window=5, epochs=3, seed=7)
        assert np.array_equal(a.scores(ds.features), b.scores(ds.features))

    def test_even_window_rejected(self):
        rng = np.random.default_rng(4)
        ds = _block_dataset(rng, frames=120)
        with pytest.raises(ValueError, match="odd"):
            train_behavior_classifier(ds, window=6)
