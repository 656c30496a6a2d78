"""Tests for source training."""

import numpy as np
import pytest

from core.data_corruptions import Dataset
from core.trainer import SourceTrainingError, cosine_lr, evaluate_accuracy, train_source
from core.vit import init_weights
from models.model_config import ViTConfig
from models.run_config import TrainSpec


class TestSchedule:
    """Learning-rate schedule."""

    def test_cosine_endpoints(self):
        """Test cosine decay starts at the base rate and ends near zero."""
        assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
        assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
        assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-12)

    def test_single_step(self):
        """Test a one-step schedule keeps the base rate."""
        assert cosine_lr(0.1, 0, 1) == 0.1


class TestTrainSource:
    """Training runs on the tiny model."""

    def setup_method(self):
        self.spec = TrainSpec(epochs=2, lr=0.05, batch_size=4)

    def test_zero_epochs_returns_initialization(self, tiny_config, tiny_dataset):
        """Test zero epochs returns the seeded initialization."""
        weights, log = train_source(tiny_dataset, tiny_config, TrainSpec(epochs=0), seed=3)
        assert weights.fingerprint() == init_weights(tiny_config, 3).fingerprint()
        assert log.epochs == []

    def test_deterministic(self, tiny_config, tiny_dataset):
        """Test the same seed trains to bit-identical weights."""
        a, _ = train_source(tiny_dataset, tiny_config, self.spec, seed=1)
        b, _ = train_source(tiny_dataset, tiny_config, self.spec, seed=1)
        assert a.fingerprint() == b.fingerprint()

    def test_log_and_update(self, tiny_config, tiny_dataset):
        """Test every epoch is logged and the weights move away from the initialization."""
        weights, log = train_source(tiny_dataset, tiny_config, self.spec, seed=1)
        assert [r.epoch for r in log.epochs] == [0, 1]
        assert all(np.isfinite(r.loss) for r in log.epochs)
        assert weights.fingerprint() != init_weights(tiny_config, 1).fingerprint()
        assert not any(t.requires_grad for t in weights.tensors.values())
        assert log.to_dict()["seed"] == 1

    def test_invalid_schedule(self, tiny_config, tiny_dataset):
        """Test a non-positive learning rate is rejected."""
        with pytest.raises(SourceTrainingError):
            train_source(tiny_dataset, tiny_config, TrainSpec(lr=0.0))

    def test_accuracy_in_percent(self, tiny_weights, tiny_dataset):
        """Test evaluation returns a percentage."""
        assert 0.0 <= evaluate_accuracy(tiny_weights, tiny_dataset, batch_size=5) <= 100.0

    @pytest.mark.slow
    def test_loss_decreases(self, tiny_config, tiny_dataset):
        """Test the training loss falls over a longer schedule."""
        _, log = train_source(tiny_dataset, tiny_config, TrainSpec(epochs=30, lr=0.1, batch_size=4, augment=False))
        assert log.epochs[-1].loss < log.epochs[0].loss


class TestSeparableToy:
    """Two colors, two classes."""

    def setup_method(self):
        rng = np.random.default_rng(7)
        labels = np.arange(40) % 2
        images = rng.uniform(0.0, 0.2, size=(40, 3, 8, 8))
        # class 0 is red, class 1 is blue
        images[labels == 0, 0] += 0.7
        images[labels == 1, 2] += 0.7
        self.dataset = Dataset(images=images, labels=labels.astype(np.int64))
        self.config = ViTConfig(image_size=8, patch_size=4, d=8, n_layers=2, heads=2, mlp_ratio=2.0, num_classes=2)

    def test_fits_within_twenty_epochs(self):
        """Test training reaches 99% on a linearly separable set."""
        weights, _ = train_source(self.dataset, self.config, TrainSpec(epochs=20, lr=0.05, batch_size=8, augment=False))
        assert evaluate_accuracy(weights, self.dataset) >= 99.0
