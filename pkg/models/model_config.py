"""Data models for the frozen backbone and the visual prompt layout."""

from dataclasses import dataclass, replace
from typing import List, Optional

PROMPT_KINDS = ("additive", "prependitive")
PRECISIONS = {"f64": "float64", "f32": "float32"}
MAX_PREPENDED_TOKENS = 256


@dataclass(frozen=True)
class ViTConfig:
    """Shape of a small Vision Transformer classifier."""
    image_size: int = 32
    patch_size: int = 8
    d: int = 64
    n_layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    channels: int = 3
    precision: str = "f64"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        """m, the number of patch tokens."""
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.d * self.mlp_ratio))

    @property
    def dtype(self) -> str:
        return PRECISIONS.get(self.precision, "float64")

    def validate(self) -> List[str]:
        """Validate the configuration and return list of validation errors."""
        errors = []

        for name in ("image_size", "patch_size", "d", "n_layers", "heads", "num_classes", "channels"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if errors:
            return errors

        if self.image_size % self.patch_size != 0:
            errors.append(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.d % self.heads != 0:
            errors.append(f"d {self.d} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            errors.append("mlp_ratio must be positive")
        if self.precision not in PRECISIONS:
            errors.append(f"precision must be one of {sorted(PRECISIONS)}")

        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True)
class PromptSpec:
    """Layout of the learnable visual prompt.

    ``placements`` are 0-based layer indices whose *input* receives the prompt.
    ``None`` selects the defaults: additive prompts on the first layer and the
    layer at half depth, prependitive prompts on every other layer.
    """
    kind: str = "prependitive"
    num_tokens: int = 8
    placements: Optional[List[int]] = None
    init_std: float = 0.02
    persist_prompt_outputs: bool = False

    def resolve_placements(self, n_layers: int) -> List[int]:
        if self.placements is not None:
            return sorted(set(int(p) for p in self.placements))
        if self.kind == "additive":
            return sorted({0, max(0, n_layers // 2 - 1)})
        return list(range(0, n_layers, 2))

    def tokens_per_placement(self, config: ViTConfig) -> int:
        return config.num_patches if self.kind == "additive" else self.num_tokens

    def total_tokens(self, config: ViTConfig) -> int:
        return len(self.resolve_placements(config.n_layers)) * self.tokens_per_placement(config)

    def with_total_tokens(self, total: int, config: ViTConfig) -> "PromptSpec":
        """Spread a token budget over placements.

        Additive budgets must be multiples of m and select that many layers
        (evenly spaced, first layer included). Prependitive budgets are divided
        over the default placements.

        Raises:
            ValueError: If the budget cannot be laid out on this model
        """
        if self.kind == "additive":
            m = config.num_patches
            if total % m != 0 or not 1 <= total // m <= config.n_layers:
                raise ValueError(f"additive token budget {total} must be k*{m} with 1 <= k <= {config.n_layers}")
            count = total // m
            step = max(1, config.n_layers // count)
            layers = [min(config.n_layers - 1, i * step) for i in range(count)]
            if len(set(layers)) != count:
                layers = list(range(count))
            return replace(self, placements=layers)

        layers = self.resolve_placements(config.n_layers)
        if total % len(layers) != 0:
            raise ValueError(f"prependitive token budget {total} is not divisible by {len(layers)} placements")
        return replace(self, num_tokens=total // len(layers), placements=layers)

    def validate(self, config: Optional[ViTConfig] = None) -> List[str]:
        """Validate the prompt layout, optionally against a model configuration."""
        errors = []

        if self.kind not in PROMPT_KINDS:
            errors.append(f"prompt kind must be one of {PROMPT_KINDS}, got '{self.kind}'")
        if self.kind == "prependitive" and not 1 <= self.num_tokens <= MAX_PREPENDED_TOKENS:
            errors.append(f"num_tokens must be in [1, {MAX_PREPENDED_TOKENS}]")
        if self.init_std < 0:
            errors.append("init_std must be >= 0")
        if self.placements is not None and len(self.placements) == 0:
            errors.append("placements must not be empty")

        if config is not None and self.placements is not None:
            for layer in self.placements:
                if not 0 <= layer < config.n_layers:
                    errors.append(f"placement {layer} is outside [0, {config.n_layers})")

        return errors

    def is_valid(self, config: Optional[ViTConfig] = None) -> bool:
        return len(self.validate(config)) == 0
