"""A small pre-norm Vision Transformer classifier.

Weights live in a flat, ordered name → tensor mapping so the same object can
be persisted, partially turned into gradient leaves (source training, TENT
baselines) and compared bit-for-bit before and after adaptation.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from core.prompting import (
    AdditivePrompt,
    GateSpec,
    PrependitivePrompt,
    PromptConfigurationError,
    VisualPrompt,
    attach_additive,
    attach_prependitive,
)
from core.tensor import Tensor, concat, gelu, layer_norm, softmax_temp
from models.model_config import ViTConfig

logger = logging.getLogger(__name__)

LAYER_KEYS = (
    "ln1.gamma", "ln1.beta",
    "attn.q.weight", "attn.q.bias",
    "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias",
    "attn.out.weight", "attn.out.bias",
    "ln2.gamma", "ln2.beta",
    "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
)


class ModelConfigurationError(Exception):
    """Exception raised when inputs, weights or prompts do not fit the model."""
    pass


@dataclass(frozen=True)
class ViTWeights:
    """Frozen parameters of the classifier, keyed by name."""
    config: ViTConfig
    tensors: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def layer(self, index: int) -> Dict[str, Tensor]:
        prefix = f"layers.{index}."
        return {key: self.tensors[prefix + key] for key in LAYER_KEYS}

    def norm_names(self) -> List[str]:
        """Names of every LayerNorm scale and shift."""
        return [name for name in self.tensors if name.rsplit(".", 1)[-1] in ("gamma", "beta")]

    def replace(self, updates: Dict[str, Tensor]) -> "ViTWeights":
        """Return new weights with some tensors swapped out."""
        unknown = set(updates) - set(self.tensors)
        if unknown:
            raise ModelConfigurationError(f"unknown weight names: {sorted(unknown)}")
        merged = dict(self.tensors)
        merged.update(updates)
        return ViTWeights(config=self.config, tensors=merged)

    def with_leaves(self, names: Optional[Iterable[str]] = None) -> "ViTWeights":
        """Return weights where ``names`` (default: all) are fresh gradient leaves."""
        names = list(self.tensors) if names is None else list(names)
        return self.replace({name: self.tensors[name].as_leaf() for name in names})

    def detached(self) -> "ViTWeights":
        return ViTWeights(config=self.config, tensors={k: v.detach() for k, v in self.tensors.items()})

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.tensors.items()}

    def fingerprint(self) -> Dict[str, str]:
        """Per-tensor SHA-256 of the raw bytes, for bit-identity checks."""
        return {
            name: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
            for name, t in self.tensors.items()
        }

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass."""
    layer_tokens: List[Tensor] = field(default_factory=list)
    cls_final: Optional[Tensor] = None
    logits: Optional[Tensor] = None


def expected_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Name → shape of every weight tensor for ``config``."""
    d, mlp = config.d, config.mlp_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_proj.weight": (config.patch_dim, d),
        "patch_proj.bias": (d,),
        "pos_embed": (config.num_patches + 1, d),
        "cls_token": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "attn.q.weight": (d, d), p + "attn.q.bias": (d,),
            p + "attn.k.weight": (d, d), p + "attn.k.bias": (d,),
            p + "attn.v.weight": (d, d), p + "attn.v.bias": (d,),
            p + "attn.out.weight": (d, d), p + "attn.out.bias": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "mlp.fc1.weight": (d, mlp), p + "mlp.fc1.bias": (mlp,),
            p + "mlp.fc2.weight": (mlp, d), p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.gamma": (d,),
        "norm.beta": (d,),
        "head.weight": (d, config.num_classes),
        "head.bias": (config.num_classes,),
    })
    return shapes


def init_weights(config: ViTConfig, seed: int = 0) -> ViTWeights:
    """Random initialization: Xavier-uniform projections, N(0, 0.02²) embeddings.

    Raises:
        ModelConfigurationError: If the configuration is invalid
    """
    errors = config.validate()
    if errors:
        raise ModelConfigurationError("Invalid model config: " + "; ".join(errors))

    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    tensors: Dict[str, Tensor] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("gamma"):
            value = np.ones(shape)
        elif name.endswith(("beta", "bias")):
            value = np.zeros(shape)
        elif name in ("pos_embed", "cls_token"):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(value.astype(dtype))
    return ViTWeights(config=config, tensors=tensors)


def weights_from_named(config: ViTConfig, named: Dict[str, np.ndarray]) -> ViTWeights:
    """Rebuild weights from a name → array mapping, checking every shape.

    Raises:
        ModelConfigurationError: On missing, extra or mis-shaped tensors
    """
    shapes = expected_shapes(config)
    missing = [name for name in shapes if name not in named]
    if missing:
        raise ModelConfigurationError(f"checkpoint is missing tensors: {missing[:5]}")
    tensors = {}
    for name, shape in shapes.items():
        array = np.asarray(named[name])
        if array.shape != shape:
            raise ModelConfigurationError(f"tensor {name} has shape {array.shape}, expected {shape}")
        tensors[name] = Tensor(array)
    return ViTWeights(config=config, tensors=tensors)


def extract_patches(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """``[B, C, H, W]`` → ``[B, m, C·p·p]``, patches in row-major grid order."""
    b, c, h, w = images.shape
    p, g = config.patch_size, config.grid
    patches = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return patches.reshape(b, g * g, c * p * p)


def _as_batch(images: Union[np.ndarray, Tensor], config: ViTConfig) -> Tuple[np.ndarray, bool]:
    array = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = array.ndim == 3
    if single:
        array = array[None]
    expected = (config.channels, config.image_size, config.image_size)
    if array.ndim != 4 or array.shape[1:] != expected:
        raise ModelConfigurationError(f"expected images of shape [B, {expected[0]}, {expected[1]}, {expected[2]}], got {array.shape}")
    return array.astype(config.dtype, copy=False), single


def patch_embed(images: Union[np.ndarray, Tensor], weights: ViTWeights) -> Tensor:
    """Project non-overlapping patches and add their positional encodings.

    Args:
        images: ``[3, H, W]`` or ``[B, 3, H, W]``
        weights: Model weights

    Returns:
        ``[m, d]`` or ``[B, m, d]`` patch tokens (CLS not included)
    """
    batch, single = _as_batch(images, weights.config)
    patches = Tensor(extract_patches(batch, weights.config))
    tokens = patches @ weights["patch_proj.weight"] + weights["patch_proj.bias"]
    tokens = tokens + weights["pos_embed"][1:]
    return tokens[0] if single else tokens


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    return softmax_temp(scores, 1.0) @ v


def transformer_layer(tokens: Tensor, layer_weights: Dict[str, Tensor], heads: int,
                      gate_spec: Optional[GateSpec] = None) -> Tensor:
    """Pre-norm self-attention and MLP blocks, each with a residual connection.

    With a gate spec, keys/values are split into the gated prompt range and
    the remaining tokens. Each group gets its own softmax; the prompt
    group's contribution is scaled by the gate, so a zero gate leaves every
    non-prompt output exactly as without the prompt.

    Args:
        tokens: ``[t, d]`` or ``[B, t, d]``
        layer_weights: Weights of this layer (keys as in ``LAYER_KEYS``)
        heads: Number of attention heads
        gate_spec: Optional gated prompt range

    Returns:
        Tokens of the same shape
    """
    single = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    b, t, d = x.shape
    w = layer_weights

    h = layer_norm(x, w["ln1.gamma"], w["ln1.beta"])
    q = _split_heads(h @ w["attn.q.weight"] + w["attn.q.bias"], heads)
    k = _split_heads(h @ w["attn.k.weight"] + w["attn.k.bias"], heads)
    v = _split_heads(h @ w["attn.v.weight"] + w["attn.v.bias"], heads)
    scale = 1.0 / np.sqrt(d // heads)

    if gate_spec is None:
        context = _attend(q, k, v, scale)
    else:
        s0, s1 = gate_spec.start, gate_spec.stop
        k_main = concat([k[:, :, :s0], k[:, :, s1:]], axis=2)
        v_main = concat([v[:, :, :s0], v[:, :, s1:]], axis=2)
        context = _attend(q, k_main, v_main, scale)
        context = context + gate_spec.gate * _attend(q, k[:, :, s0:s1], v[:, :, s0:s1], scale)

    context = context.transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + (context @ w["attn.out.weight"] + w["attn.out.bias"])

    h = layer_norm(x, w["ln2.gamma"], w["ln2.beta"])
    h = gelu(h @ w["mlp.fc1.weight"] + w["mlp.fc1.bias"])
    x = x + (h @ w["mlp.fc2.weight"] + w["mlp.fc2.bias"])
    return x[0] if single else x


def _check_prompt(prompt: VisualPrompt, config: ViTConfig) -> None:
    for layer in prompt.placements:
        if not 0 <= layer < config.n_layers:
            raise ModelConfigurationError(f"prompt placement {layer} is outside [0, {config.n_layers})")
        width = prompt.tokens[layer].shape[-1]
        if width != config.d:
            raise ModelConfigurationError(f"prompt width {width} does not match model width {config.d}")
        if isinstance(prompt, AdditivePrompt) and prompt.tokens[layer].shape[0] != config.num_patches:
            raise ModelConfigurationError(
                f"additive prompt at layer {layer} has {prompt.tokens[layer].shape[0]} rows, expected {config.num_patches}"
            )


def forward(images: Union[np.ndarray, Tensor], weights: ViTWeights, prompt: Optional[VisualPrompt] = None,
            record_tokens: bool = False) -> Tuple[Tensor, ForwardTrace]:
    """Classify images, optionally with a visual prompt attached.

    Args:
        images: ``[3, H, W]`` or ``[B, 3, H, W]`` pixel array
        weights: Frozen model weights
        prompt: Optional visual prompt
        record_tokens: Keep every layer's token sequence in the trace

    Returns:
        Tuple of ``[B, c]`` logits and the forward trace (CLS_N included)

    Raises:
        ModelConfigurationError: If the image or prompt does not fit the model
    """
    config = weights.config
    batch, _ = _as_batch(images, config)
    if prompt is not None:
        _check_prompt(prompt, config)

    patches = patch_embed(batch, weights)
    b = batch.shape[0]
    cls = (weights["cls_token"] + weights["pos_embed"][0]).reshape(1, 1, config.d).broadcast_to((b, 1, config.d))
    tokens = concat([cls, patches], axis=1)

    trace = ForwardTrace()
    carried = 0
    last_gate: Optional[Tensor] = None
    for i in range(config.n_layers):
        layer_weights = weights.layer(i)
        gate_spec = None
        if prompt is not None and i in prompt.tokens:
            try:
                if isinstance(prompt, PrependitivePrompt):
                    if carried:
                        tokens = concat([tokens[:, :1], tokens[:, 1 + carried:]], axis=1)
                        carried = 0
                    tokens, gate_spec = attach_prependitive(tokens, prompt.tokens[i], prompt.gates[i])
                else:
                    tokens = attach_additive(tokens, prompt.tokens[i])
            except PromptConfigurationError as e:
                raise ModelConfigurationError(str(e))
        elif carried:
            # persisted prompt outputs keep their gate from the placement that created them
            gate_spec = GateSpec(start=1, stop=1 + carried, gate=last_gate)

        tokens = transformer_layer(tokens, layer_weights, config.heads, gate_spec)
        if record_tokens:
            trace.layer_tokens.append(tokens)

        if gate_spec is not None:
            if isinstance(prompt, PrependitivePrompt) and prompt.persist_outputs:
                carried = gate_spec.count
                last_gate = gate_spec.gate
            else:
                tokens = concat([tokens[:, :1], tokens[:, gate_spec.stop:]], axis=1)
                carried = 0

    if carried:
        tokens = concat([tokens[:, :1], tokens[:, 1 + carried:]], axis=1)
    normed = layer_norm(tokens, weights["norm.gamma"], weights["norm.beta"])
    cls_final = normed[:, 0]
    logits = cls_final @ weights["head.weight"] + weights["head.bias"]
    trace.cls_final = cls_final
    trace.logits = logits
    return logits, trace


def predict(images: Union[np.ndarray, Tensor], weights: ViTWeights, prompt: Optional[VisualPrompt] = None) -> np.ndarray:
    """Class predictions without building a gradient graph."""
    detached = prompt.detached() if prompt is not None else None
    logits, _ = forward(images, weights.detached(), detached)
    return np.argmax(logits.data, axis=-1)
