"""Supervised source training of the backbone."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.augment import augment_batch
from core.data_corruptions import Dataset
from core.objectives import cross_entropy
from core.seeding import derive_seed
from core.tensor import ComputeGraph, Tensor, backward
from core.vit import ViTWeights, forward, init_weights, predict
from models.model_config import ViTConfig
from models.run_config import AugmentSpec, TrainSpec

logger = logging.getLogger(__name__)


class SourceTrainingError(Exception):
    """Exception raised when source training diverges or is misconfigured."""
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainingLog:
    """Per-epoch history of a source training run."""
    seed: int
    epochs: List[EpochRecord] = field(default_factory=list)
    clean_accuracy: Optional[float] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1].loss if self.epochs else None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` to 0 over ``total_steps``."""
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def evaluate_accuracy(weights: ViTWeights, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    if len(dataset) == 0:
        return 0.0
    correct = 0
    for batch in dataset.batches(batch_size):
        correct += int(np.sum(predict(batch.images, weights) == batch.labels))
    return 100.0 * correct / len(dataset)


def train_source(dataset: Dataset, config: ViTConfig, train: Optional[TrainSpec] = None,
                 seed: int = 0) -> Tuple[ViTWeights, TrainingLog]:
    """Train every backbone tensor with cross-entropy, SGD with momentum and cosine decay.

    Args:
        dataset: Labeled source images
        config: Model shape
        train: Schedule; defaults to ``TrainSpec()``
        seed: Seed for initialization, shuffling and augmentation

    Returns:
        Tuple of trained weights and the training log. ``epochs == 0``
        returns the initialization unchanged.

    Raises:
        SourceTrainingError: If the schedule is invalid or the loss becomes non-finite
    """
    train = train or TrainSpec()
    errors = train.validate()
    if errors:
        raise SourceTrainingError("Invalid training schedule: " + "; ".join(errors))
    if len(dataset) == 0:
        raise SourceTrainingError("cannot train on an empty dataset")

    weights = init_weights(config, seed)
    log = TrainingLog(seed=seed)
    if train.epochs == 0:
        logger.info("Zero training epochs requested, returning the initialization")
        return weights, log

    names = weights.names()
    velocity = {name: np.zeros_like(weights[name].data) for name in names}
    steps_per_epoch = math.ceil(len(dataset) / train.batch_size)
    total_steps = train.epochs * steps_per_epoch
    crop = AugmentSpec(kind="weak", padding=max(1, config.image_size // 8))
    step = 0

    for epoch in range(train.epochs):
        order = np.random.default_rng(derive_seed(seed, epoch)).permutation(len(dataset))
        epoch_loss, epoch_correct = 0.0, 0
        for b, start in enumerate(range(0, len(dataset), train.batch_size)):
            idx = order[start:start + train.batch_size]
            images, labels = dataset.images[idx], dataset.labels[idx]
            if train.augment:
                images = augment_batch(images, crop, derive_seed(seed, epoch, b))

            leaves = weights.with_leaves()
            graph = ComputeGraph().register_all(leaves[name] for name in names)
            logits, _ = forward(images, leaves)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise SourceTrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = backward(loss, graph)

            lr = cosine_lr(train.lr, step, total_steps)
            updates: Dict[str, Tensor] = {}
            for name in names:
                grad = grads[leaves[name]].data
                if train.weight_decay:
                    grad = grad + train.weight_decay * weights[name].data
                velocity[name] = train.momentum * velocity[name] + grad
                updates[name] = Tensor(weights[name].data - lr * velocity[name])
            weights = weights.replace(updates)

            epoch_loss += loss.item() * len(idx)
            epoch_correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            step += 1

        record = EpochRecord(epoch, epoch_loss / len(dataset), 100.0 * epoch_correct / len(dataset),
                             cosine_lr(train.lr, step, total_steps))
        log.epochs.append(record)
        logger.info(f"Epoch {epoch + 1}/{train.epochs}: loss {record.loss:.4f}, train acc {record.accuracy:.1f}%")

    return weights.detached(), log
