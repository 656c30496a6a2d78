"""Data models for test-time adaptation runs."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

REGIMES = ("bia", "sia", "pla")
LIFECYCLES = ("episodic", "continual")
TARGETS = ("prompt", "norm", "cls", "all")
STRONG_AUGMENTS = ("randaugment", "augmix")
SIA_AVERAGES = ("logits", "probs")

# SIA only makes sense per image (episodic); PLA needs history (continual).
VALID_PAIRS: Dict[str, Tuple[str, ...]] = {
    "bia": ("episodic", "continual"),
    "sia": ("episodic",),
    "pla": ("continual",),
}

DEFAULT_LR = {"additive": 4.0, "prependitive": 0.001}
DEFAULT_TAU = {"bia": 1.0, "sia": 1.0, "pla": 0.07}


def valid_combinations() -> List[str]:
    """Human-readable list of accepted regime/lifecycle pairs."""
    return [f"{regime}/{lifecycle}" for regime, lifecycles in VALID_PAIRS.items() for lifecycle in lifecycles]


@dataclass(frozen=True)
class AdaptationConfig:
    """Hyper-parameters of one adaptation session.

    ``lr`` and ``tau`` left as ``None`` resolve to the defaults for the prompt
    kind and regime (see ``resolved_lr`` / ``resolved_tau``).
    """
    regime: str = "bia"
    lifecycle: str = "episodic"
    target: str = "prompt"
    steps: int = 10
    lr: Optional[float] = None
    tau: Optional[float] = None
    eta: float = 0.1
    K: int = 64
    k: int = 11
    queue_capacity: float = 0.01
    warmup_tau: float = 1.0
    crop_padding: Optional[int] = None
    strong_augment: str = "randaugment"
    sia_average: str = "logits"
    seed: int = 0

    def resolved_lr(self, prompt_kind: str) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR.get(prompt_kind, 0.001)

    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return DEFAULT_TAU[self.regime]

    def resolved_padding(self, image_size: int) -> int:
        if self.crop_padding is not None:
            return self.crop_padding
        return max(1, image_size // 8)

    def queue_size_for(self, dataset_size: int) -> int:
        """Absolute queue capacity s for a stream of ``dataset_size`` images."""
        return max(1, int(round(self.queue_capacity * dataset_size)))

    def validate(self) -> List[str]:
        """Validate the configuration and return list of validation errors."""
        errors = []

        if self.regime not in REGIMES:
            errors.append(f"regime must be one of {REGIMES}, got '{self.regime}'")
        if self.lifecycle not in LIFECYCLES:
            errors.append(f"lifecycle must be one of {LIFECYCLES}, got '{self.lifecycle}'")
        if self.regime in VALID_PAIRS and self.lifecycle not in VALID_PAIRS[self.regime]:
            errors.append(
                f"{self.regime}/{self.lifecycle} is not a valid combination; "
                f"valid: {', '.join(valid_combinations())}"
            )
        if self.target not in TARGETS:
            errors.append(f"target must be one of {TARGETS}, got '{self.target}'")
        elif self.target != "prompt" and self.regime != "bia":
            errors.append("backbone targets (norm/cls/all) only run under regime bia")

        if self.steps < 0:
            errors.append("steps must be >= 0")
        if self.lr is not None and not self.lr > 0:
            errors.append("lr must be positive")
        if self.tau is not None and not self.tau > 0:
            errors.append("tau must be positive")
        if not self.warmup_tau > 0:
            errors.append("warmup_tau must be positive")
        if not 0 < self.eta <= 1:
            errors.append("eta must be in (0, 1]")
        if self.K < 1:
            errors.append("K must be >= 1")
        if self.k < 1:
            errors.append("k must be >= 1")
        if not 0 < self.queue_capacity <= 1:
            errors.append("queue_capacity must be a fraction in (0, 1]")
        if self.crop_padding is not None and self.crop_padding < 0:
            errors.append("crop_padding must be >= 0")
        if self.strong_augment not in STRONG_AUGMENTS:
            errors.append(f"strong_augment must be one of {STRONG_AUGMENTS}")
        if self.sia_average not in SIA_AVERAGES:
            errors.append(f"sia_average must be one of {SIA_AVERAGES}")

        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0
