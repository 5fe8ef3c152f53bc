import itertools

import numpy as np
import pytest

from autodiff.autodiff_module import Graph, evaluate, gradient_check
from core.core_module import ContractViolation
from transmission.transmission_module import (instance_transition, is_diagonal, is_label_complete, label_transition,
                                              label_transition_node, recurrent_class_count, reverse_conditional)


def binary_batches(max_n=6, class_counts=(2, 3)):
    """Every {0,1}-valued Q on batches of 1..max_n instances."""
    for num_classes in class_counts:
        for n in range(1, max_n + 1):
            for assignment in itertools.product(range(num_classes), repeat=n):
                labels = np.array(assignment)
                yield labels, np.eye(num_classes)[labels], num_classes


class TestReverseConditional:

    def test_columns_are_distributions(self, rng):
        Q = rng.dirichlet(np.ones(3), size=7)
        P = reverse_conditional(Q)
        np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-12)

    def test_empty_label_becomes_uniform(self):
        Q = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(reverse_conditional(Q)[:, 1], 1.0 / 3.0)

    def test_rejects_non_stochastic_rows(self):
        with pytest.raises(ContractViolation):
            label_transition(np.array([[0.5, 0.6]]))


class TestLabelTransition:
    """T is diagonal exactly for {0,1}-valued, label-complete Q."""

    def test_row_stochastic(self, rng):
        T = label_transition(rng.dirichlet(np.ones(4), size=9))
        np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)

    def test_exhaustive_binary_batches(self):
        for labels, Q, num_classes in binary_batches():
            T = label_transition(Q)
            assert is_diagonal(T) == is_label_complete(labels, num_classes)

    def test_perturbed_batches_are_never_diagonal(self, rng):
        for _ in range(100):
            num_classes = int(rng.integers(2, 4))
            n = int(rng.integers(num_classes, 7))
            labels = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, n - num_classes)])
            delta = rng.uniform(0.01, 0.5)
            Q = (1 - delta) * np.eye(num_classes)[labels] + delta * rng.dirichlet(np.ones(num_classes), size=n)
            assert not is_diagonal(label_transition(Q))

    def test_uniform_predictions(self):
        Q = np.full((4, 2), 0.5)
        np.testing.assert_allclose(label_transition(Q), 0.5)

    def test_graph_node_matches_and_differentiates(self, rng):
        graph = Graph()
        logits = graph.parameter("logits", (5, 3))
        q = graph.exp(graph.log_softmax(logits))
        T = label_transition_node(graph, q)
        out = graph.sum(graph.mul(T, graph.constant(rng.normal(size=(3, 3)))))
        bindings = {"logits": rng.normal(size=(5, 3))}
        values = evaluate(graph, bindings)
        np.testing.assert_allclose(values[T], label_transition(values[q]), atol=1e-12)
        assert gradient_check(graph, out, bindings).passed


class TestInstanceTransition:
    """S splits into |Y| recurrent classes exactly when T is diagonal."""

    def test_symmetric_and_stochastic(self, rng):
        S = instance_transition(rng.dirichlet(np.ones(3), size=6))
        np.testing.assert_allclose(S, S.T, atol=1e-12)
        np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-12)

    def test_recurrent_classes_match_diagonal_t(self):
        for labels, Q, num_classes in binary_batches():
            S = instance_transition(Q)
            T = label_transition(Q)
            assert (recurrent_class_count(S) == num_classes) == is_diagonal(T)

    def test_reverse_conditionals_are_stationary(self):
        for labels, Q, num_classes in binary_batches():
            if not is_label_complete(labels, num_classes):
                continue
            S = instance_transition(Q)
            P = reverse_conditional(Q)
            for y in range(num_classes):
                np.testing.assert_allclose(P[:, y] @ S, P[:, y], atol=1e-9)

    def test_rank_bounded_by_label_count(self, rng):
        for _ in range(20):
            Q = rng.dirichlet(np.ones(3), size=8)
            singular = np.linalg.svd(instance_transition(Q), compute_uv=False)
            assert np.all(singular[3:] < 1e-8)

    def test_perturbed_batches_are_irreducible(self, rng):
        Q = rng.dirichlet(np.ones(3), size=6)
        assert recurrent_class_count(instance_transition(Q)) == 1

    def test_asymmetric_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            recurrent_class_count(np.array([[0.5, 0.5], [0.0, 1.0]]))
