"""Desk-scale acceptance runs on the default config.

Every test here trains or adapts the default model and is marked slow;
run them with ``pytest -m slow``.
"""

from dataclasses import replace

import numpy as np
import pytest

from app.experiment import ExperimentRunner
from app.run_config_loader import RunConfigLoader
from core.adapt_engine import AdaptationSession, evaluate_source, run_stream
from core.data_corruptions import build_domain_stream, style_shift
from core.trainer import evaluate_accuracy, train_source
from models.run_config import CORRUPTION_FAMILIES, STYLES, DomainSpec

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def runner():
    return ExperimentRunner(RunConfigLoader().load())


@pytest.fixture(scope="module")
def source_weights(runner):
    config = runner.config
    weights, _ = train_source(runner.train_set(), config.model, config.train, seed=config.seed)
    return weights


def adapted_accuracy(runner, weights, stream, regime="bia"):
    config = runner.config
    adapt = replace(config.adapt, regime=regime, lifecycle="continual")
    session = AdaptationSession(weights, config.prompt, adapt, stream_size=len(stream))
    return run_stream(session, stream, batch_size=config.data.batch_size).accuracy()


def source_accuracy(runner, weights, stream):
    return evaluate_source(weights, stream, batch_size=runner.config.data.batch_size).accuracy()


def shifted_stream(runner, domain):
    return build_domain_stream(runner.test_set(), [domain], seed=runner.config.data.seed)


class TestSourceModel:
    """The trained source model on clean and shifted data."""

    def test_clean_accuracy(self, runner, source_weights):
        """Test the default config reaches 90% clean test accuracy."""
        assert evaluate_accuracy(source_weights, runner.test_set()) >= 90.0

    def test_beats_linear_classifier_on_pixels(self, runner, source_weights):
        """Test a least-squares linear classifier on raw pixels stays below the source model."""
        train, test = runner.train_set(), runner.test_set()
        classes = runner.config.model.num_classes

        def features(dataset):
            flat = dataset.images.reshape(len(dataset), -1)
            return np.hstack([flat, np.ones((len(dataset), 1))])

        targets = np.eye(classes)[train.labels]
        coef, *_ = np.linalg.lstsq(features(train), targets, rcond=None)
        linear = 100.0 * np.mean(np.argmax(features(test) @ coef, axis=1) == test.labels)
        assert linear < evaluate_accuracy(source_weights, test)

    @pytest.mark.parametrize("style", STYLES)
    def test_accuracy_drops_under_style(self, style, runner, source_weights):
        """Test every style shift lowers source accuracy."""
        test = runner.test_set()
        shifted = style_shift(test, style, seed=runner.config.data.seed)
        assert evaluate_accuracy(source_weights, shifted) < evaluate_accuracy(source_weights, test)


class TestRobustnessDirection:
    """Continual adaptation against the source model on severity-5 corruptions."""

    def test_bia_improves_most_families(self, runner, source_weights):
        """Test continual prependitive BIA beats the source on at least 5 of 7 families."""
        assert runner.config.prompt.kind == "prependitive"
        improved = 0
        for family in CORRUPTION_FAMILIES:
            stream = shifted_stream(runner, DomainSpec(family, 5))
            improved += adapted_accuracy(runner, source_weights, stream) > source_accuracy(runner, source_weights, stream)
        assert improved >= 5

    def test_pla_beats_bia_on_average(self, runner, source_weights):
        """Test continual PLA has the higher mean corrupted accuracy."""
        by_regime = {"bia": [], "pla": []}
        for family in CORRUPTION_FAMILIES:
            stream = shifted_stream(runner, DomainSpec(family, 5))
            for regime in by_regime:
                by_regime[regime].append(adapted_accuracy(runner, source_weights, stream, regime))
        assert np.mean(by_regime["pla"]) > np.mean(by_regime["bia"])

    def test_clean_stream_not_degraded(self, runner, source_weights):
        """Test adapting on the clean stream costs at most half a point."""
        stream = shifted_stream(runner, DomainSpec())
        assert adapted_accuracy(runner, source_weights, stream) >= source_accuracy(runner, source_weights, stream) - 0.5


class TestLossCurve:
    """Shape of the per-step loss curve."""

    def test_first_step_gives_largest_drop(self, runner, source_weights):
        """Test step 1 makes the largest loss drop in at least 80% of corrupted batches."""
        config = runner.config
        dominant = []
        for family in CORRUPTION_FAMILIES:
            stream = shifted_stream(runner, DomainSpec(family, 5))
            session = AdaptationSession(source_weights, config.prompt, config.adapt, stream_size=len(stream))
            result = run_stream(session, stream, batch_size=config.data.batch_size)
            dominant.extend(r.first_step_dominant for r in result.rows if r.first_step_dominant is not None)
        assert dominant
        assert np.mean(dominant) >= 0.8
