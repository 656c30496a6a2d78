"""Tests for prompt layout, initialization and attachment."""

import numpy as np
import pytest

from core.persistence import save_prompt, save_weights
from core.prompting import (
    PromptConfigurationError,
    attach_additive,
    attach_prependitive,
    init_prompts,
    param_count,
    prompt_from_named,
)
from core.tensor import Tensor
from core.vit import init_weights
from models.model_config import PromptSpec, ViTConfig


class TestPlacements:
    """Default placements and token budgets."""

    def setup_method(self):
        self.config = ViTConfig(image_size=32, patch_size=8, d=16, n_layers=8, heads=2)

    def test_additive_defaults(self):
        """Test additive prompts sit on the first layer and at half depth."""
        assert PromptSpec(kind="additive").resolve_placements(8) == [0, 3]
        assert PromptSpec(kind="additive").resolve_placements(1) == [0]

    def test_prependitive_defaults(self):
        """Test prependitive prompts sit on every other layer."""
        assert PromptSpec(kind="prependitive").resolve_placements(8) == [0, 2, 4, 6]

    def test_explicit_placements_are_sorted_unique(self):
        """Test explicit placements are de-duplicated and sorted."""
        assert PromptSpec(placements=[4, 0, 4]).resolve_placements(8) == [0, 4]

    def test_prependitive_budget(self):
        """Test a prependitive budget is divided over the placements."""
        spec = PromptSpec(kind="prependitive").with_total_tokens(300, self.config)
        assert spec.num_tokens == 75
        assert spec.total_tokens(self.config) == 300

    def test_prependitive_budget_not_divisible(self):
        """Test budgets that do not split evenly are rejected."""
        with pytest.raises(ValueError):
            PromptSpec(kind="prependitive").with_total_tokens(301, self.config)

    def test_additive_budget(self):
        """Test additive budgets pick whole layers of m tokens."""
        spec = PromptSpec(kind="additive").with_total_tokens(32, self.config)
        assert len(spec.resolve_placements(8)) == 2
        assert spec.total_tokens(self.config) == 32
        with pytest.raises(ValueError):
            PromptSpec(kind="additive").with_total_tokens(20, self.config)

    def test_validate_rejects_bad_values(self):
        """Test validation reports kind, length and placement problems."""
        assert PromptSpec(kind="suffix").validate()
        assert PromptSpec(num_tokens=0).validate()
        assert PromptSpec(num_tokens=257).validate()
        assert PromptSpec(placements=[9]).validate(self.config)
        assert PromptSpec().is_valid(self.config)

    def test_param_count(self):
        """Test parameter counts include one gate per prependitive placement."""
        assert param_count(PromptSpec(kind="prependitive", num_tokens=10), self.config) == 4 * 10 * 16 + 4
        assert param_count(PromptSpec(kind="additive"), self.config) == 2 * 16 * 16


class TestInitialization:
    """Initial prompt values."""

    def setup_method(self):
        self.config = ViTConfig(image_size=8, patch_size=4, d=8, n_layers=4, heads=2, num_classes=3)

    def test_additive_starts_at_zero(self):
        """Test additive offsets are exactly zero and are gradient leaves."""
        prompt = init_prompts(PromptSpec(kind="additive"), self.config)
        assert prompt.placements == [0, 1]
        for leaf in prompt.leaves():
            assert leaf.requires_grad
            assert leaf.shape == (4, 8)
            assert np.all(leaf.data == 0.0)

    def test_prependitive_gates_start_closed(self):
        """Test every gate starts at zero and tokens are drawn with the given spread."""
        prompt = init_prompts(PromptSpec(kind="prependitive", num_tokens=5, init_std=0.5), self.config, seed=2)
        assert prompt.placements == [0, 2]
        for layer in prompt.placements:
            assert prompt.gates[layer].data == 0.0
            assert prompt.tokens[layer].shape == (5, 8)
        assert np.std(prompt.tokens[0].data) > 0.1

    def test_invalid_spec_raises(self):
        """Test out-of-range placements raise PromptConfigurationError."""
        with pytest.raises(PromptConfigurationError):
            init_prompts(PromptSpec(placements=[7]), self.config)

    def test_leaf_bounds_clamp_gates_only(self):
        """Test only gates carry an optimizer bound."""
        prompt = init_prompts(PromptSpec(kind="prependitive"), self.config)
        bounds = prompt.leaf_bounds()
        assert bounds[0::2] == [None, None]
        assert all(b is not None for b in bounds[1::2])

    def test_named_round_trip(self):
        """Test prompt tensors survive the name mapping."""
        prompt = init_prompts(PromptSpec(kind="prependitive", num_tokens=3), self.config, seed=4)
        rebuilt = prompt_from_named(prompt.named_tensors(), "prependitive")
        assert rebuilt.placements == prompt.placements
        for layer in prompt.placements:
            np.testing.assert_array_equal(rebuilt.tokens[layer].data, prompt.tokens[layer].data)
            assert rebuilt.gates[layer].shape == ()


class TestAttachment:
    """The attachment operator."""

    def setup_method(self):
        self.tokens = Tensor(np.arange(2 * 5 * 4, dtype=float).reshape(2, 5, 4))

    def test_additive_leaves_cls_untouched(self):
        """Test additive attachment offsets the patches only."""
        out = attach_additive(self.tokens, Tensor(np.ones((4, 4))))
        np.testing.assert_array_equal(out.data[:, 0], self.tokens.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 1:], self.tokens.data[:, 1:] + 1.0)

    def test_additive_shape_mismatch(self):
        """Test an additive prompt with the wrong number of rows is rejected."""
        with pytest.raises(PromptConfigurationError):
            attach_additive(self.tokens, Tensor(np.ones((3, 4))))

    def test_prependitive_inserts_after_cls(self):
        """Test prependitive tokens land between CLS and the patches."""
        prompt = Tensor(np.full((2, 4), -1.0))
        out, gate_spec = attach_prependitive(self.tokens, prompt, Tensor(np.array(0.0)))
        assert out.shape == (2, 7, 4)
        assert (gate_spec.start, gate_spec.stop, gate_spec.count) == (1, 3, 2)
        np.testing.assert_array_equal(out.data[:, 0], self.tokens.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 1:3], -1.0)
        np.testing.assert_array_equal(out.data[:, 3:], self.tokens.data[:, 1:])

    def test_prependitive_width_mismatch(self):
        """Test a prompt of the wrong width is rejected."""
        with pytest.raises(PromptConfigurationError):
            attach_prependitive(self.tokens, Tensor(np.ones((2, 3))), Tensor(np.array(0.0)))


class TestBatching:
    """Attaching a prompt to a batch equals attaching it image by image."""

    def setup_method(self):
        rng = np.random.default_rng(31)
        self.tokens = rng.normal(size=(4, 5, 8))
        self.prompt = rng.normal(size=(4, 8))

    def test_additive_commutes_with_batching(self):
        """Test the batched additive attach stacks the per-image results."""
        batched = attach_additive(Tensor(self.tokens), Tensor(self.prompt)).data
        single = np.stack([attach_additive(Tensor(t), Tensor(self.prompt)).data for t in self.tokens])
        np.testing.assert_array_equal(batched, single)

    def test_prependitive_commutes_with_batching(self):
        """Test the batched prependitive attach stacks the per-image results."""
        gate = Tensor(np.array(0.3))
        batched, spec = attach_prependitive(Tensor(self.tokens), Tensor(self.prompt), gate)
        single = np.stack([attach_prependitive(Tensor(t), Tensor(self.prompt), gate)[0].data for t in self.tokens])
        np.testing.assert_array_equal(batched.data, single)
        assert (spec.start, spec.stop) == (1, 5)


class TestStorage:
    """Prompt size against the backbone it adapts."""

    def setup_method(self):
        self.config = ViTConfig()
        self.weights = init_weights(self.config, seed=0)

    @pytest.mark.parametrize("kind", ["additive", "prependitive"])
    def test_prompt_parameters_below_one_percent(self, kind):
        """Test the default prompts hold under 1% of the backbone parameters."""
        assert param_count(PromptSpec(kind=kind), self.config) < 0.01 * self.weights.num_parameters()

    @pytest.mark.parametrize("kind", ["additive", "prependitive"])
    def test_serialized_prompt_below_one_percent(self, kind, tmp_path):
        """Test a saved default prompt takes under 1% of the saved checkpoint bytes."""
        save_weights(tmp_path / "source.vpac", self.weights)
        save_prompt(tmp_path / "prompt.vpac", init_prompts(PromptSpec(kind=kind), self.config))
        prompt_bytes = (tmp_path / "prompt.vpac").stat().st_size
        weight_bytes = (tmp_path / "source.vpac").stat().st_size
        assert prompt_bytes < 0.01 * weight_bytes
