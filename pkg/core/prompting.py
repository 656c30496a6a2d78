"""Visual prompt state and the attachment operator.

Two prompt kinds are supported:

* additive: a per-layer ``[m, d]`` offset added to the patch tokens entering
  the layer, CLS untouched;
* prependitive: ``n_p`` extra tokens inserted after CLS at the layer input,
  with a per-placement gate scaling their attention-value contribution.

Both start out inert: additive offsets are zero and every gate is zero, so an
initialized prompt reproduces the frozen model's outputs exactly.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from core.tensor import Tensor, concat
from models.model_config import MAX_PREPENDED_TOKENS, PromptSpec, ViTConfig

logger = logging.getLogger(__name__)

GATE_CLAMP = 4.0


class PromptConfigurationError(Exception):
    """Exception raised when a prompt does not fit the model."""
    pass


@dataclass(frozen=True)
class GateSpec:
    """Marks the prepended prompt positions ``[start, stop)`` of a token sequence."""
    start: int
    stop: int
    gate: Tensor

    @property
    def count(self) -> int:
        return self.stop - self.start


@dataclass
class AdditivePrompt:
    """Per-layer additive offsets ``P_i`` of shape ``[m, d]``."""
    tokens: Dict[int, Tensor] = field(default_factory=dict)
    kind: str = "additive"

    @property
    def placements(self) -> List[int]:
        return sorted(self.tokens)

    def leaves(self) -> List[Tensor]:
        return [self.tokens[layer] for layer in self.placements]

    def leaf_bounds(self) -> List[Optional[float]]:
        return [None] * len(self.tokens)

    def with_leaves(self, leaves: List[Tensor]) -> "AdditivePrompt":
        return AdditivePrompt(tokens=dict(zip(self.placements, leaves)))

    def detached(self) -> "AdditivePrompt":
        return AdditivePrompt(tokens={layer: t.detach() for layer, t in self.tokens.items()})

    def named_tensors(self) -> Dict[str, np.ndarray]:
        return {f"prompt.{layer}.tokens": self.tokens[layer].data for layer in self.placements}


@dataclass
class PrependitivePrompt:
    """Per-layer prepended tokens ``P_i`` of shape ``[n_p, d]`` and scalar gates."""
    tokens: Dict[int, Tensor] = field(default_factory=dict)
    gates: Dict[int, Tensor] = field(default_factory=dict)
    persist_outputs: bool = False
    kind: str = "prependitive"

    @property
    def placements(self) -> List[int]:
        return sorted(self.tokens)

    def leaves(self) -> List[Tensor]:
        out = []
        for layer in self.placements:
            out.extend([self.tokens[layer], self.gates[layer]])
        return out

    def leaf_bounds(self) -> List[Optional[float]]:
        return [None, GATE_CLAMP] * len(self.tokens)

    def with_leaves(self, leaves: List[Tensor]) -> "PrependitivePrompt":
        tokens, gates = {}, {}
        for i, layer in enumerate(self.placements):
            tokens[layer] = leaves[2 * i]
            gates[layer] = leaves[2 * i + 1]
        return PrependitivePrompt(tokens=tokens, gates=gates, persist_outputs=self.persist_outputs)

    def detached(self) -> "PrependitivePrompt":
        return PrependitivePrompt(
            tokens={layer: t.detach() for layer, t in self.tokens.items()},
            gates={layer: g.detach() for layer, g in self.gates.items()},
            persist_outputs=self.persist_outputs,
        )

    def named_tensors(self) -> Dict[str, np.ndarray]:
        named = {}
        for layer in self.placements:
            named[f"prompt.{layer}.tokens"] = self.tokens[layer].data
            named[f"prompt.{layer}.gate"] = self.gates[layer].data
        return named


VisualPrompt = Union[AdditivePrompt, PrependitivePrompt]


def init_prompts(spec: PromptSpec, config: ViTConfig, seed: int = 0) -> VisualPrompt:
    """Build a prompt whose forward pass equals the unprompted model.

    Additive offsets start at exactly zero. Prependitive tokens are drawn from
    N(0, init_std²) and every gate starts at zero, which keeps them inert.

    Args:
        spec: Prompt layout
        config: Model configuration (supplies m, d and depth)
        seed: Seed for prependitive token values

    Returns:
        Freshly initialized prompt with gradient leaves

    Raises:
        PromptConfigurationError: If the prompt layout does not fit the model
    """
    errors = spec.validate(config)
    if errors:
        raise PromptConfigurationError("Invalid prompt spec: " + "; ".join(errors))

    dtype = np.dtype(config.dtype)
    placements = spec.resolve_placements(config.n_layers)
    if spec.kind == "additive":
        tokens = {
            layer: Tensor(np.zeros((config.num_patches, config.d), dtype=dtype), requires_grad=True)
            for layer in placements
        }
        return AdditivePrompt(tokens=tokens)

    rng = np.random.default_rng(seed)
    tokens, gates = {}, {}
    for layer in placements:
        values = rng.normal(0.0, spec.init_std, size=(spec.num_tokens, config.d)).astype(dtype)
        tokens[layer] = Tensor(values, requires_grad=True)
        gates[layer] = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
    return PrependitivePrompt(tokens=tokens, gates=gates, persist_outputs=spec.persist_prompt_outputs)


def attach_additive(tokens: Tensor, prompt_tokens: Tensor) -> Tensor:
    """Return ``[CLS; P + E]`` for tokens shaped ``[..., 1 + m, d]``.

    Raises:
        PromptConfigurationError: If the prompt does not match the patch tokens
    """
    patch_shape = tokens.shape[-2:]
    if prompt_tokens.shape != (patch_shape[0] - 1, patch_shape[1]):
        raise PromptConfigurationError(
            f"additive prompt shape {prompt_tokens.shape} does not match patch tokens of {tokens.shape}"
        )
    cls = tokens[..., :1, :]
    patches = tokens[..., 1:, :] + prompt_tokens
    return concat([cls, patches], axis=-2)


def attach_prependitive(tokens: Tensor, prompt_tokens: Tensor, gate: Tensor) -> Tuple[Tensor, GateSpec]:
    """Return ``[CLS; P; E]`` plus the gate spec marking the inserted positions.

    Raises:
        PromptConfigurationError: If the prompt width or length is out of range
    """
    n_p, width = prompt_tokens.shape
    if width != tokens.shape[-1]:
        raise PromptConfigurationError(f"prompt width {width} does not match token width {tokens.shape[-1]}")
    if not 1 <= n_p <= MAX_PREPENDED_TOKENS:
        raise PromptConfigurationError(f"prompt length {n_p} outside [1, {MAX_PREPENDED_TOKENS}]")
    lead = tokens.shape[:-2]
    expanded = prompt_tokens.broadcast_to(lead + (n_p, width)) if lead else prompt_tokens
    out = concat([tokens[..., :1, :], expanded, tokens[..., 1:, :]], axis=-2)
    return out, GateSpec(start=1, stop=1 + n_p, gate=gate)


def param_count(spec: PromptSpec, config: ViTConfig) -> int:
    """Total learnable scalars: tokens·d plus one gate per prependitive placement."""
    placements = spec.resolve_placements(config.n_layers)
    count = spec.total_tokens(config) * config.d
    if spec.kind == "prependitive":
        count += len(placements)
    return count


def prompt_from_named(named: Dict[str, np.ndarray], kind: str) -> VisualPrompt:
    """Rebuild a prompt from ``prompt.<layer>.tokens`` / ``prompt.<layer>.gate`` arrays."""
    tokens, gates = {}, {}
    for name, array in named.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[0] != "prompt":
            continue
        layer = int(parts[1])
        if parts[2] == "tokens":
            tokens[layer] = Tensor(array, requires_grad=True)
        elif parts[2] == "gate":
            gates[layer] = Tensor(array.reshape(()), requires_grad=True)
    if kind == "additive":
        return AdditivePrompt(tokens=tokens)
    if set(tokens) != set(gates):
        raise PromptConfigurationError("prependitive prompt snapshot has tokens and gates for different layers")
    return PrependitivePrompt(tokens=tokens, gates=gates)
