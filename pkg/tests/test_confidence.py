import itertools
import math

import numpy as np
import pytest

from confidence.confidence_module import (ConfidenceConfig, batch_size_bound, confidence_loss_graph, epoch_batches,
                                          exact_worst_case_loss, sample_batch, sweep_batch_size_bound,
                                          transmission_loss)
from conftest import make_params
from core.core_module import ContractViolation, NoLabelCompleteSubsetError
from discriminator.discriminator_module import predict
from divergence.divergence_module import DivergenceKind
from transmission.transmission_module import is_label_complete


class TestBatchSizeBound:

    def test_small_example(self):
        # ln(1 * 2 / 0.01) / 0.5 = 10.6
        assert batch_size_bound(0.5, 1, 2, 0.01) == 11

    def test_strict_inequality_and_minimality(self):
        for prior, T, k, eps in [(0.1, 1000, 10, 0.01), (0.25, 50, 4, 1e-4), (1 / 3, 7, 3, 0.2)]:
            b = batch_size_bound(prior, T, k, eps)
            rhs = math.log(T * k / eps) / prior
            assert b > rhs >= b - 1

    @pytest.mark.parametrize("args", [(0.0, 1, 2, 0.1), (1.5, 1, 2, 0.1), (0.5, 0, 2, 0.1), (0.5, 1, 2, 1.0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ContractViolation):
            batch_size_bound(*args)

    def test_sweep_bound_is_self_consistent(self):
        for k, n, sweeps, eps in [(10, 60000, 1000, 1e-4), (2, 600, 1500, 1e-4), (3, 1500, 200, 1e-3)]:
            b = sweep_batch_size_bound(k, n, sweeps, eps)

            def rhs(size):
                return math.log(sweeps * n * k / (eps * size)) * k

            assert b > rhs(b)
            assert not (b - 1 > rhs(b - 1))

    def test_label_completeness_monte_carlo(self):
        """With the bound's batch size, almost every uniform batch is label complete."""
        rng = np.random.default_rng(0)
        b = batch_size_bound(0.1, 1000, 10, 0.01)
        trials = 10_000
        draws = rng.integers(0, 10, size=(trials, b))
        counts = np.zeros((trials, 10), dtype=int)
        np.add.at(counts, (np.repeat(np.arange(trials), b), draws.ravel()), 1)
        failure = np.mean(np.any(counts == 0, axis=1))
        sigma = math.sqrt(0.01 * 0.99 / trials)
        assert failure <= 0.01 + 3 * sigma

    def test_sampled_batches_are_label_complete(self):
        """Batches drawn by sample_batch from balanced labeled data meet the bound's failure rate."""
        rng = np.random.default_rng(1)
        n = 1000
        labels = np.repeat(np.arange(10), n // 10)
        b = batch_size_bound(0.1, n, 10, 0.01)
        trials = 5000
        failures = sum(not is_label_complete(labels[sample_batch(n, b, rng)], 10) for _ in range(trials))
        sigma = math.sqrt(0.01 * 0.99 / trials)
        assert failures / trials <= 0.01 + 3 * sigma

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            ConfidenceConfig(batch_size=2).validate(num_classes=3)
        ConfidenceConfig(batch_size=16).validate(num_classes=2)


class TestTransmissionLoss:

    def test_confident_complete_batch_is_zero(self):
        Q = np.eye(3)[[0, 1, 2, 2, 0]]
        for kind in DivergenceKind:
            assert transmission_loss(Q, kind) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_predictions(self):
        Q = np.full((6, 3), 1 / 3)
        assert transmission_loss(Q, DivergenceKind.KL) == pytest.approx(math.log(3))
        assert transmission_loss(Q, DivergenceKind.SQ_HELLINGER) == pytest.approx(1 - math.sqrt(1 / 3))

    def test_worst_label_dominates(self):
        # T(0|0) = 5/6 and T(1|1) = 9/10: the loss is the worse label, not the average
        Q = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.0, 1.0]])
        assert transmission_loss(Q, DivergenceKind.KL) == pytest.approx(-math.log(5 / 6))
        assert transmission_loss(Q, DivergenceKind.SQ_HELLINGER) == pytest.approx(1 - math.sqrt(5 / 6))

    def test_missing_label_is_penalized(self):
        Q = np.eye(3)[[0, 1, 1]]
        assert transmission_loss(Q) == pytest.approx(-math.log(1e-8))

    @pytest.mark.parametrize("kind", list(DivergenceKind))
    def test_graph_matches_numpy(self, rng, kind):
        params = make_params(input_dim=3, hidden_dims=(5,), num_classes=3, seed=4)
        X = rng.normal(size=(8, 3))
        loss = confidence_loss_graph(params, X, mode="eval", kind=kind)
        assert loss.value() == pytest.approx(transmission_loss(predict(params, X), kind), abs=1e-12)

    @pytest.mark.parametrize("kind", list(DivergenceKind))
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, rng, kind, mode):
        params = make_params(input_dim=3, hidden_dims=(5,), num_classes=3, seed=5)
        loss = confidence_loss_graph(params, rng.normal(size=(8, 3)), mode=mode, kind=kind)
        report = loss.check(wrt=list(params.weights))
        assert report.passed, report.errors


class TestWorstCase:
    """Any sampled label-complete batch scores at most the exact worst case."""

    def test_sampled_batches_bounded_by_exact(self, rng):
        for seed in range(5):
            params = make_params(input_dim=2, hidden_dims=(6,), num_classes=2, seed=seed)
            X = rng.normal(size=(8, 2))
            labels = np.array([0, 1, 0, 1, 1, 0, 0, 1])
            exact = exact_worst_case_loss(params, X, labels)
            Q = predict(params, X)
            for size in range(2, 9):
                for subset in itertools.combinations(range(8), size):
                    idx = list(subset)
                    if is_label_complete(labels[idx], 2):
                        assert transmission_loss(Q[idx]) <= exact + 1e-12

    def test_requires_every_label(self, tiny_params, rng):
        with pytest.raises(NoLabelCompleteSubsetError):
            exact_worst_case_loss(tiny_params, rng.normal(size=(4, 2)), np.zeros(4, dtype=int))

    def test_refuses_large_sets(self, tiny_params, rng):
        with pytest.raises(ContractViolation):
            exact_worst_case_loss(tiny_params, rng.normal(size=(13, 2)), np.arange(13) % 2)


class TestBatching:

    def test_sample_batch_distinct(self, rng):
        idx = sample_batch(20, 10, rng)
        assert len(set(idx.tolist())) == 10

    def test_sample_batch_is_seeded(self):
        a = sample_batch(50, 12, np.random.default_rng(5))
        b = sample_batch(50, 12, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_sample_batch_of_everything(self, rng):
        np.testing.assert_array_equal(np.sort(sample_batch(17, 17, rng)), np.arange(17))

    def test_sample_batch_too_large(self, rng):
        with pytest.raises(ContractViolation):
            sample_batch(5, 6, rng)

    def test_epoch_drops_tail(self, rng):
        batches = epoch_batches(23, 5, rng)
        assert len(batches) == 4
        assert len(set(np.concatenate(batches).tolist())) == 20
