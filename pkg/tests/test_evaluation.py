import itertools
import math

import numpy as np
import pytest

from conftest import make_params
from core.core_module import ContractViolation
from data.data_module import Dataset
from evaluation.evaluation_module import (HEATMAP_COLUMNS, clustering_accuracy, extreme_instances, heatmap_grid,
                                          stability_stats)
from smoothness.smoothness_module import StabilityRow


def _brute_force(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    best = 0
    for perm in itertools.permutations(range(k)):
        best = max(best, int(np.sum(np.asarray(perm)[pred] == truth)))
    return best / pred.size


class TestClusteringAccuracy:

    def test_identity(self):
        truth = np.array([0, 1, 2, 1, 0])
        result = clustering_accuracy(truth, truth)
        assert result.accuracy == 1.0
        assert result.permutation == [0, 1, 2]

    def test_swapped_labels(self):
        truth = np.array([0, 0, 1, 1, 1])
        result = clustering_accuracy(1 - truth, truth)
        assert result.accuracy == 1.0
        assert result.permutation == [1, 0]

    def test_full_tie_gives_identity(self):
        result = clustering_accuracy(np.zeros(6, dtype=int), np.zeros(6, dtype=int), 4)
        assert result.permutation == [0, 1, 2, 3]
        assert result.accuracy == 1.0

    def test_partial_tie_prefers_low_labels_for_low_clusters(self):
        result = clustering_accuracy(np.array([0, 1]), np.array([2, 2]), 3)
        assert result.permutation == [0, 2, 1]
        assert result.accuracy == 0.5

    def test_ties_match_first_optimal_permutation(self, rng):
        for _ in range(200):
            k = int(rng.integers(2, 5))
            pred = rng.integers(0, k, size=int(rng.integers(1, 6)))
            truth = rng.integers(0, k, size=pred.size)
            scores = {perm: int(np.sum(np.asarray(perm)[pred] == truth)) for perm in itertools.permutations(range(k))}
            best = max(scores.values())
            first = min(perm for perm, score in scores.items() if score == best)
            assert tuple(clustering_accuracy(pred, truth, k).permutation) == first

    def test_four_of_six(self):
        pred = np.array([0, 0, 0, 1, 1, 1])
        truth = np.array([0, 0, 1, 1, 1, 0])
        result = clustering_accuracy(pred, truth)
        assert result.accuracy == pytest.approx(4 / 6)
        assert result.accuracy == pytest.approx(_brute_force(pred, truth, 2))
        np.testing.assert_array_equal(result.confusion, [[2, 1], [1, 2]])

    def test_matches_brute_force(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 7))
            n = int(rng.integers(1, 40))
            pred = rng.integers(0, k, size=n)
            truth = rng.integers(0, k, size=n)
            result = clustering_accuracy(pred, truth, k)
            assert result.accuracy == pytest.approx(_brute_force(pred, truth, k), abs=1e-12)
            assert sorted(result.permutation) == list(range(k))

    def test_invariant_under_relabeling(self, rng):
        for _ in range(100):
            pred = rng.integers(0, 4, size=30)
            truth = rng.integers(0, 4, size=30)
            relabel = rng.permutation(4)
            a = clustering_accuracy(pred, truth, 4).accuracy
            b = clustering_accuracy(relabel[pred], truth, 4).accuracy
            assert a == pytest.approx(b, abs=1e-12)

    def test_random_predictions_near_chance(self):
        rng = np.random.default_rng(7)
        n, k = 30000, 3
        truth = np.repeat(np.arange(k), n // k)
        pred = rng.integers(0, k, size=n)
        sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
        # the maximum over permutations adds a small upward bias
        assert abs(clustering_accuracy(pred, truth, k).accuracy - 1 / k) <= 3 * sigma + 0.01

    def test_nmi(self):
        truth = np.array([0, 0, 1, 1])
        assert clustering_accuracy(1 - truth, truth).nmi == pytest.approx(1.0)
        assert clustering_accuracy(np.array([0, 1, 0, 1]), truth).nmi == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("pred,truth", [([0, 1], [0]), ([], []), ([0, 3], [0, 1])])
    def test_contract(self, pred, truth):
        with pytest.raises(ContractViolation):
            clustering_accuracy(pred, truth, 2)

    def test_to_dict(self):
        payload = clustering_accuracy([0, 1], [1, 0]).to_dict()
        assert payload["accuracy"] == 1.0
        assert payload["permutation"] == [1, 0]
        assert payload["confusion"] == [[0, 1], [1, 0]]


class TestStabilityStats:

    def test_constant_model(self, constant_params, rng):
        rows, summary = stability_stats(constant_params, Dataset(rng.normal(size=(12, 2))))
        assert len(rows) == 12
        assert all(r.fisher_trace == 0.0 for r in rows)
        assert all(r.confidence == pytest.approx(0.5) for r in rows)

    def test_summary_means_match_rows(self, rng):
        params = make_params(input_dim=3, hidden_dims=(8,), num_classes=3, seed=2)
        rows, summary = stability_stats(params, Dataset(rng.normal(size=(60, 3))))
        for label in summary.index:
            traces = [r.fisher_trace for r in rows if r.predicted_label == label]
            assert summary.loc[label, "fisher_trace_mean"] == pytest.approx(np.mean(traces), abs=1e-9)
            assert summary.loc[label, "fisher_trace_count"] == len(traces)
        assert "confidence_50%" in summary.columns

    def test_extremes(self):
        rows = [StabilityRow(i, i % 2, 0.9, float(i), float(i)) for i in range(20)]
        picked = extreme_instances(rows, per_class=2)
        assert [r.index for r in picked] == [0, 2, 16, 18, 1, 3, 17, 19]

    def test_extremes_small_class_has_no_duplicates(self):
        rows = [StabilityRow(i, 0, 0.9, float(i), float(i)) for i in range(3)]
        assert [r.index for r in extreme_instances(rows, per_class=5)] == [0, 1, 2]


class TestHeatmap:

    def test_constant_model(self, constant_params):
        frame = heatmap_grid(constant_params, (-1.0, 1.0, -2.0, 2.0), 5)
        assert list(frame.columns) == HEATMAP_COLUMNS
        assert len(frame) == 25
        np.testing.assert_allclose(frame["prob"], 0.5)
        np.testing.assert_array_equal(frame["trace"], 0.0)
        np.testing.assert_allclose(frame["entropy"], math.log(2))

    def test_bounds_and_threads(self, tiny_params):
        one = heatmap_grid(tiny_params, (-3.0, 3.0, -3.0, 3.0), 30, threads=1)
        many = heatmap_grid(tiny_params, (-3.0, 3.0, -3.0, 3.0), 30, threads=4)
        assert len(one) == 900
        assert np.all((one["entropy"] >= 0) & (one["entropy"] <= math.log(2) + 1e-12))
        assert np.all((one["prob"] >= 0) & (one["prob"] <= 1))
        assert np.all(one["trace"] >= 0)
        np.testing.assert_array_equal(one.to_numpy(), many.to_numpy())

    def test_needs_two_inputs(self):
        with pytest.raises(ContractViolation):
            heatmap_grid(make_params(input_dim=3), (-1.0, 1.0, -1.0, 1.0), 4)

    @pytest.mark.parametrize("bbox,resolution", [((-1.0, 1.0, -1.0, 1.0), 1), ((1.0, 1.0, -1.0, 1.0), 4)])
    def test_invalid_grid(self, constant_params, bbox, resolution):
        with pytest.raises(ContractViolation):
            heatmap_grid(constant_params, bbox, resolution)
