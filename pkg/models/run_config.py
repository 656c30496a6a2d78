"""Data models for datasets, augmentations and complete runs."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from models.adaptation_config import AdaptationConfig
from models.model_config import PromptSpec, ViTConfig

CORRUPTION_FAMILIES = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "brightness",
    "contrast",
    "pixelate",
)
STYLES = ("outline", "inverted", "textured")
AUGMENT_KINDS = ("identity", "weak", "strong", "augmix")


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption family at one severity (0 is the identity, for debugging)."""
    family: str
    severity: int = 5
    seed: int = 0

    def validate(self) -> List[str]:
        errors = []
        if self.family not in CORRUPTION_FAMILIES:
            errors.append(f"unknown corruption family '{self.family}'")
        if not 0 <= self.severity <= 5:
            errors.append(f"severity must be in [0, 5], got {self.severity}")
        return errors


@dataclass(frozen=True)
class AugmentSpec:
    """Parameters of one augmentation kind."""
    kind: str = "weak"
    padding: int = 4
    n_ops: int = 2
    magnitude: float = 5.0
    width: int = 3
    depth: int = 2
    alpha: float = 1.0

    def validate(self) -> List[str]:
        errors = []
        if self.kind not in AUGMENT_KINDS:
            errors.append(f"augment kind must be one of {AUGMENT_KINDS}, got '{self.kind}'")
        if self.padding < 0:
            errors.append("padding must be >= 0")
        if self.n_ops < 0:
            errors.append("n_ops must be >= 0")
        if not 0 <= self.magnitude <= 10:
            errors.append("magnitude must be in [0, 10]")
        if self.width < 1:
            errors.append("width must be >= 1")
        if self.depth < 0:
            errors.append("depth must be >= 0")
        if not self.alpha > 0:
            errors.append("alpha must be positive")
        return errors


@dataclass(frozen=True)
class DomainSpec:
    """One segment of a test stream: clean, corrupted or style-shifted."""
    corruption: Optional[str] = None
    severity: int = 5
    style: Optional[str] = None

    @property
    def name(self) -> str:
        if self.corruption:
            return f"{self.corruption}-{self.severity}"
        if self.style:
            return f"style-{self.style}"
        return "clean"

    def validate(self) -> List[str]:
        errors = []
        if self.corruption is not None and self.style is not None:
            errors.append(f"domain '{self.name}' sets both a corruption and a style")
        if self.corruption is not None:
            errors.extend(CorruptionSpec(self.corruption, self.severity).validate())
        if self.style is not None and self.style not in STYLES:
            errors.append(f"unknown style '{self.style}', expected one of {STYLES}")
        return errors


@dataclass(frozen=True)
class DataSpec:
    """Procedural data for training and for the test stream."""
    train_size: int = 3000
    test_size: int = 500
    batch_size: int = 64
    shuffle_stream: bool = False
    seed: int = 0
    domains: List[DomainSpec] = field(default_factory=lambda: [DomainSpec()])

    def validate(self, num_classes: int = 10) -> List[str]:
        errors = []
        if self.train_size < num_classes:
            errors.append(f"train_size must be >= number of classes ({num_classes})")
        if self.test_size < num_classes:
            errors.append(f"test_size must be >= number of classes ({num_classes})")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if not self.domains:
            errors.append("at least one domain is required")
        for domain in self.domains:
            errors.extend(domain.validate())
        return errors


@dataclass(frozen=True)
class TrainSpec:
    """Source training schedule (SGD with momentum and cosine decay)."""
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    augment: bool = True

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if not self.lr > 0:
            errors.append("train lr must be positive")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            errors.append("train batch_size must be >= 1")
        return errors


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a command."""
    model: ViTConfig = field(default_factory=ViTConfig)
    prompt: PromptSpec = field(default_factory=PromptSpec)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    output_dir: str = "runs"
    seed: int = 0

    def validate(self) -> List[str]:
        """Validate the whole run and return list of validation errors."""
        errors = []
        errors.extend(f"model: {e}" for e in self.model.validate())
        errors.extend(f"prompt: {e}" for e in self.prompt.validate(self.model if self.model.is_valid() else None))
        errors.extend(f"adapt: {e}" for e in self.adapt.validate())
        errors.extend(f"data: {e}" for e in self.data.validate(self.model.num_classes))
        errors.extend(f"train: {e}" for e in self.train.validate())
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
