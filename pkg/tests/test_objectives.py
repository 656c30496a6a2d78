"""Tests for the adaptation objectives, checked against brute-force references."""

import math

import numpy as np
import pytest

from core.memory_queue import MemoryQueue
from core.objectives import (
    InsufficientHistoryError,
    ObjectiveError,
    bia_loss,
    confidence_select,
    cross_entropy,
    knn_pseudo_labels,
    pla_loss,
    selection_count,
    self_entropy,
    sia_loss,
)
from core.tensor import ComputeGraph, ParameterError, Tensor, backward, finite_diff_gradient, relative_error


def ref_softmax(z, tau=1.0):
    z = np.asarray(z, dtype=float) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_entropy(z, tau=1.0):
    p = ref_softmax(z, tau)
    return -(p * np.log(p)).sum(axis=-1)


class TestEntropy:
    """Self-entropy and the batch loss."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.logits = self.rng.normal(size=(8, 5))

    def test_uniform_logits_have_log_c_entropy(self):
        """Test equal logits give the maximal entropy log c."""
        assert self_entropy(np.zeros(4)).item() == pytest.approx(np.log(4))

    def test_matches_reference(self):
        """Test entropy matches the direct formula at several temperatures."""
        for tau in (0.07, 0.5, 1.0):
            np.testing.assert_allclose(self_entropy(self.logits, tau).data, ref_entropy(self.logits, tau), atol=1e-10)

    def test_confident_logits_have_low_entropy(self):
        """Test a dominant logit drives entropy near zero."""
        assert self_entropy(np.array([50.0, 0.0, 0.0])).item() < 1e-10

    def test_bia_loss_is_batch_mean(self):
        """Test the batch loss is the mean row entropy."""
        assert bia_loss(self.logits).item() == pytest.approx(ref_entropy(self.logits).mean())

    def test_bia_loss_rejects_empty_batch(self):
        """Test an empty batch raises ObjectiveError."""
        with pytest.raises(ObjectiveError):
            bia_loss(np.zeros((0, 3)))

    def test_bad_temperature(self):
        """Test a zero temperature raises ParameterError."""
        with pytest.raises(ParameterError):
            self_entropy(self.logits, tau=0.0)

    def test_bia_gradient(self):
        """Test the entropy gradient against finite differences."""
        leaf = Tensor(self.logits, requires_grad=True)
        grads = backward(bia_loss(leaf, 0.5), ComputeGraph().register_all([leaf]))
        numeric = finite_diff_gradient(lambda t: bia_loss(t, 0.5), Tensor(self.logits)).data
        assert relative_error(grads[leaf].data, numeric) < 1e-6


class TestSelection:
    """Confidence selection."""

    def test_selection_count(self):
        """Test the kept count is max(1, round(eta*K))."""
        assert selection_count(64, 0.1) == 6
        assert selection_count(5, 0.1) == 1
        assert selection_count(10, 1.0) == 10
        assert selection_count(15, 0.1) == 2

    def test_keeps_lowest_entropy_rows(self):
        """Test the kept rows are exactly the lowest-entropy ones."""
        logits = np.random.default_rng(3).normal(scale=3.0, size=(64, 10))
        mask = confidence_select(logits, 1.0, 0.1)
        expected = np.argsort(ref_entropy(logits), kind="stable")[:6]
        assert mask.kept == [int(i) for i in expected]
        assert mask.threshold == pytest.approx(ref_entropy(logits)[expected[-1]])

    def test_ties_go_to_lower_index(self):
        """Test equal entropies keep the earlier row."""
        mask = confidence_select(np.zeros((4, 3)), 1.0, 0.5)
        assert mask.kept == [0, 1]

    def test_eta_out_of_range(self):
        """Test eta outside (0, 1] is rejected."""
        with pytest.raises(ParameterError):
            confidence_select(np.zeros((4, 3)), 1.0, 0.0)


class TestSiaLoss:
    """Marginal entropy over confident views."""

    def setup_method(self):
        self.logits = np.random.default_rng(1).normal(scale=2.0, size=(20, 4))

    def test_logit_average(self):
        """Test the loss is the entropy of the mean selected logits."""
        kept = np.argsort(ref_entropy(self.logits), kind="stable")[:2]
        expected = ref_entropy(self.logits[kept].mean(axis=0))
        assert sia_loss(self.logits, eta=0.1).item() == pytest.approx(expected)

    def test_probability_average(self):
        """Test the probability-averaging variant."""
        kept = np.argsort(ref_entropy(self.logits), kind="stable")[:2]
        p_bar = ref_softmax(self.logits[kept]).mean(axis=0)
        expected = -(p_bar * np.log(p_bar)).sum()
        assert sia_loss(self.logits, eta=0.1, average="probs").item() == pytest.approx(expected)

    def test_unknown_average(self):
        """Test an unknown averaging mode raises ObjectiveError."""
        with pytest.raises(ObjectiveError):
            sia_loss(self.logits, average="median")

    def test_gradient_ignores_unselected_views(self):
        """Test views dropped by selection receive no gradient."""
        leaf = Tensor(self.logits, requires_grad=True)
        grads = backward(sia_loss(leaf, eta=0.1), ComputeGraph().register_all([leaf]))[leaf].data
        kept = set(np.argsort(ref_entropy(self.logits), kind="stable")[:2].tolist())
        for row in range(20):
            if row not in kept:
                assert np.all(grads[row] == 0.0)


class TestPseudoLabels:
    """kNN pseudo-labels and the pseudo-label loss."""

    def setup_method(self):
        self.queue = MemoryQueue(capacity=10)
        self.features = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1], [-1.0, 0.0]])
        self.logits = np.array([[2.0, 0.0], [0.0, 2.0], [4.0, 0.0], [0.0, 8.0]])
        self.queue.extend(self.features, self.logits)

    def test_knn_average_of_nearest(self):
        """Test the pseudo-label averages the logits of the two most similar entries."""
        label = knn_pseudo_labels(np.array([[2.0, 0.1]]), self.queue, k=2)
        np.testing.assert_allclose(label, [[3.0, 0.0]])

    def test_knn_is_scale_invariant(self):
        """Test similarity is cosine, so scaling the query does not matter."""
        a = knn_pseudo_labels(np.array([[0.2, 1.0]]), self.queue, k=1)
        b = knn_pseudo_labels(np.array([[20.0, 100.0]]), self.queue, k=1)
        np.testing.assert_array_equal(a, b)

    def test_insufficient_history(self):
        """Test asking for more neighbours than stored raises."""
        with pytest.raises(InsufficientHistoryError):
            knn_pseudo_labels(np.array([[1.0, 0.0]]), self.queue, k=5)

    def test_pla_loss_matches_reference(self):
        """Test the loss is cross-entropy against the sharpened pseudo-label."""
        z_strong = np.array([[0.5, -0.2, 0.1]])
        z_hat = np.array([[1.0, 0.3, -0.4]])
        expected = -(ref_softmax(z_hat, 0.07) * np.log(ref_softmax(z_strong))).sum()
        assert pla_loss(z_strong, z_hat, 0.07).data[0] == pytest.approx(expected)

    def test_pla_loss_has_no_pseudo_label_gradient(self):
        """Test gradients flow only through the strong-view logits."""
        strong = Tensor(np.array([0.5, -0.2, 0.1]), requires_grad=True)
        hat = Tensor(np.array([1.0, 0.3, -0.4]), requires_grad=True)
        grads = backward(pla_loss(strong, hat), ComputeGraph().register_all([strong, hat]))
        assert np.all(grads[hat].data == 0.0)
        assert np.any(grads[strong].data != 0.0)

    def test_cross_entropy(self):
        """Test cross-entropy of integer labels."""
        logits = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
        expected = -np.mean(np.log(ref_softmax(logits)[[0, 1], [1, 2]]))
        assert cross_entropy(Tensor(logits), np.array([1, 2])).item() == pytest.approx(expected)


def loop_softmax(row, tau):
    top = max(row)
    exps = [math.exp((v - top) / tau) for v in row]
    total = sum(exps)
    return [e / total for e in exps]


def loop_entropy(row, tau):
    return -sum(p * math.log(max(p, 1e-12)) for p in loop_softmax(row, tau))


def loop_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


class TestRandomizedOracles:
    """A thousand random cases per objective against plain-Python references."""

    CASES = 1000

    def setup_method(self):
        self.rng = np.random.default_rng(2024)

    def random_logits(self, rows_max=8, classes_max=12, scale=3.0):
        rows = int(self.rng.integers(1, rows_max + 1))
        classes = int(self.rng.integers(2, classes_max + 1))
        return self.rng.normal(scale=scale, size=(rows, classes))

    def test_self_entropy_oracle(self):
        """Test per-row entropies match the loop reference."""
        for _ in range(self.CASES):
            z = self.random_logits()
            tau = float(self.rng.uniform(0.1, 2.0))
            expected = [loop_entropy(list(row), tau) for row in z]
            np.testing.assert_allclose(self_entropy(z, tau).data, expected, rtol=0, atol=1e-12)

    def test_confidence_select_oracle(self):
        """Test the kept views are the lowest-entropy ones by a full sort."""
        for _ in range(self.CASES):
            z = self.random_logits(rows_max=16)
            tau = float(self.rng.uniform(0.1, 2.0))
            eta = float(self.rng.uniform(0.01, 1.0))
            entropies = [loop_entropy(list(row), tau) for row in z]
            count = max(1, math.floor(eta * len(z) + 0.5))
            expected = sorted(range(len(z)), key=lambda i: (entropies[i], i))[:count]
            assert confidence_select(z, tau, eta).kept == expected

    def test_knn_pseudo_label_oracle(self):
        """Test kNN pseudo-labels match a brute-force cosine scan."""
        for _ in range(self.CASES):
            size = int(self.rng.integers(1, 21))
            dim = int(self.rng.integers(2, 7))
            classes = int(self.rng.integers(2, 7))
            k = int(self.rng.integers(1, size + 1))
            features = self.rng.normal(size=(size, dim))
            logits = self.rng.normal(size=(size, classes))
            query = self.rng.normal(size=dim)
            queue = MemoryQueue(capacity=size)
            queue.extend(features, logits)

            sims = [loop_cosine(query, f) for f in features]
            nearest = sorted(range(size), key=lambda j: (-sims[j], j))[:k]
            expected = [sum(logits[j][c] for j in nearest) / k for c in range(classes)]
            np.testing.assert_allclose(knn_pseudo_labels(query[None, :], queue, k)[0], expected,
                                       rtol=0, atol=1e-12)

    def test_pla_loss_oracle(self):
        """Test the pseudo-label loss matches the loop cross-entropy."""
        for _ in range(self.CASES):
            z_hat = self.random_logits()
            z_strong = self.rng.normal(scale=2.0, size=z_hat.shape)
            tau = float(self.rng.uniform(0.05, 1.0))
            expected = []
            for strong, hat in zip(z_strong, z_hat):
                target = loop_softmax(list(hat), tau)
                student = loop_softmax(list(strong), 1.0)
                expected.append(-sum(t * math.log(max(s, 1e-12)) for t, s in zip(target, student)))
            np.testing.assert_allclose(pla_loss(z_strong, z_hat, tau).data, expected, rtol=1e-12, atol=1e-12)


class TestPseudoLabelProperties:
    """Properties of the pseudo-label objective."""

    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_gibbs_inequality(self):
        """Test the loss is never below the entropy of the sharpened target."""
        for _ in range(1000):
            classes = int(self.rng.integers(2, 11))
            z_hat = self.rng.normal(scale=3.0, size=(4, classes))
            z_strong = self.rng.normal(scale=2.0, size=(4, classes))
            tau = float(self.rng.uniform(0.05, 1.0))
            loss = pla_loss(z_strong, z_hat, tau).data
            floor = self_entropy(z_hat, tau).data
            assert np.all(loss >= 0.0)
            assert np.all(loss >= floor - 1e-12)

    def test_gibbs_equality_when_student_matches_target(self):
        """Test the bound is attained when the student equals the sharpened target."""
        z_hat = self.rng.normal(size=(5, 6))
        tau = 0.5
        np.testing.assert_allclose(pla_loss(z_hat / tau, z_hat, tau).data, self_entropy(z_hat, tau).data,
                                   rtol=0, atol=1e-12)

    def test_single_class_queue(self):
        """Test a queue whose entries all predict one class yields that class as pseudo-label."""
        queue = MemoryQueue(capacity=6)
        logits = self.rng.normal(scale=0.1, size=(6, 4))
        logits[:, 2] = 5.0
        queue.extend(self.rng.normal(size=(6, 3)), logits)
        queries = self.rng.normal(size=(50, 3))
        for k in range(1, 7):
            labels = knn_pseudo_labels(queries, queue, k)
            assert np.all(np.argmax(labels, axis=1) == 2)
            target = ref_softmax(labels, 0.07)
            assert np.all(target[:, 2] > 0.99)
