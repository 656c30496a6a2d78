"""Test-time adaptation loops over visual prompts.

The backbone is never modified. A session owns the live prompt (or, for the
TENT baselines, adapted copies of selected backbone tensors), the step
counter and, for PLA, the memory queue. Three regimes run on top of the
same optimizer loop:

* bia: mean self-entropy over a batch
* sia: marginal entropy over confident augmented views of one image
* pla: cross-entropy against kNN pseudo-labels from the memory queue
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.augment import augment_batch, expand_views
from core.data_corruptions import Dataset, iter_stream
from core.memory_queue import MemoryQueue
from core.objectives import (
    bia_loss,
    knn_pseudo_labels,
    pla_batch_loss,
    self_entropy,
    sia_loss,
)
from core.prompting import PrependitivePrompt, VisualPrompt, init_prompts, prompt_from_named
from core.seeding import content_seed, derive_seed
from core.tensor import ComputeGraph, ShapeError, Tensor, backward
from core.vit import ViTWeights, forward
from models.adaptation_config import VALID_PAIRS, AdaptationConfig, valid_combinations
from models.model_config import PromptSpec
from models.run_config import AugmentSpec

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "stream_index", "regime", "lifecycle", "loss_first_step",
    "loss_last_step", "entropy_pre", "entropy_post", "accuracy",
)


class AdaptationError(Exception):
    """Exception raised when an adaptation run cannot proceed."""
    pass


class AdaptationConfigError(AdaptationError):
    """Raised for invalid regime/lifecycle pairs and other bad settings."""
    pass


class NumericalDivergenceError(AdaptationError):
    """Raised when a loss or gradient becomes non-finite."""
    pass


def sgd_step(leaves: Sequence[Tensor], grads: Sequence[Tensor], lr: float,
             bounds: Optional[Sequence[Optional[float]]] = None) -> List[Tensor]:
    """Plain SGD: ``leaf − lr·grad``, clamped to ``[−bound, bound]`` where a bound is set.

    Returns new tensors; the inputs are left untouched.

    Raises:
        ShapeError: If a gradient does not match its leaf
        NumericalDivergenceError: If any gradient is non-finite
    """
    if len(leaves) != len(grads):
        raise ShapeError(f"{len(leaves)} leaves but {len(grads)} gradients")
    bounds = list(bounds) if bounds is not None else [None] * len(leaves)
    for i, (leaf, grad) in enumerate(zip(leaves, grads)):
        if leaf.shape != grad.shape:
            raise ShapeError(f"gradient {i} has shape {grad.shape}, leaf has shape {leaf.shape}")
        if not grad.is_finite():
            raise NumericalDivergenceError(f"non-finite gradient for leaf {i} (shape {leaf.shape})")

    updated = []
    for leaf, grad, bound in zip(leaves, grads, bounds):
        value = leaf.data - lr * grad.data
        if bound is not None:
            value = np.clip(value, -bound, bound)
        updated.append(Tensor(value.astype(leaf.dtype, copy=False), name=leaf.name))
    return updated


@dataclass
class BatchMetrics:
    """Outcome of adapting on one batch of the stream."""
    stream_index: int
    domain: str
    regime: str
    lifecycle: str
    step_losses: List[float]
    post_loss: float
    entropy_pre: float
    entropy_post: float
    predictions: np.ndarray
    ids: Optional[np.ndarray] = None
    accuracy: Optional[float] = None
    warmup: bool = False

    @property
    def loss_first_step(self) -> float:
        return self.step_losses[0] if self.step_losses else self.post_loss

    @property
    def loss_last_step(self) -> float:
        return self.step_losses[-1] if self.step_losses else self.post_loss

    @property
    def loss_curve(self) -> List[float]:
        """Loss before each step, then after the last one."""
        return list(self.step_losses) + [self.post_loss]

    @property
    def first_step_fraction(self) -> Optional[float]:
        """Share of the total loss reduction achieved by the first step."""
        curve = self.loss_curve
        total = curve[0] - curve[-1]
        if len(curve) < 2 or total <= 0:
            return None
        return (curve[0] - curve[1]) / total

    @property
    def first_step_dominant(self) -> Optional[bool]:
        drops = -np.diff(self.loss_curve)
        if drops.size == 0:
            return None
        return bool(np.argmax(drops) == 0)

    def describe(self) -> str:
        """One-line summary for logs; unlabeled batches show no accuracy."""
        accuracy = "n/a" if self.accuracy is None else f"{self.accuracy:.1f}%"
        return f"Batch {self.stream_index} ({self.domain}): accuracy {accuracy}, loss {self.loss_first_step:.4f} -> {self.post_loss:.4f}"

    def to_row(self) -> Dict[str, object]:
        return {
            "stream_index": self.stream_index,
            "regime": self.regime,
            "lifecycle": self.lifecycle,
            "loss_first_step": self.loss_first_step,
            "loss_last_step": self.loss_last_step,
            "entropy_pre": self.entropy_pre,
            "entropy_post": self.entropy_post,
            "accuracy": self.accuracy if self.accuracy is not None else float("nan"),
        }


@dataclass
class StreamResult:
    """Per-batch metrics and per-image predictions of one pass over a stream."""
    method: str
    regime: str
    lifecycle: str
    rows: List[BatchMetrics] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)
    domains: List[str] = field(default_factory=list)

    @property
    def predictions(self) -> np.ndarray:
        return np.concatenate([r.predictions for r in self.rows]) if self.rows else np.zeros(0, dtype=np.int64)

    @property
    def ids(self) -> np.ndarray:
        return np.concatenate([r.ids for r in self.rows]) if self.rows else np.zeros(0, dtype=np.int64)

    def predictions_by_id(self) -> Dict[int, int]:
        return {int(i): int(p) for i, p in zip(self.ids, self.predictions)}

    def accuracy(self) -> float:
        if not self.rows:
            return 0.0
        labels = np.concatenate(self.labels)
        return float(100.0 * np.mean(self.predictions == labels))

    def error_rate(self) -> float:
        return 100.0 - self.accuracy()

    def domain_accuracy(self) -> Dict[str, float]:
        correct: Dict[str, int] = {}
        total: Dict[str, int] = {}
        for row, labels in zip(self.rows, self.labels):
            correct[row.domain] = correct.get(row.domain, 0) + int(np.sum(row.predictions == labels))
            total[row.domain] = total.get(row.domain, 0) + len(labels)
        return {name: 100.0 * correct[name] / total[name] for name in total}

    def first_step_dominance(self) -> Optional[float]:
        """Fraction of batches whose largest single-step loss drop came from step 1."""
        flags = [r.first_step_dominant for r in self.rows if r.first_step_dominant is not None]
        return float(np.mean(flags)) if flags else None

    def summary(self) -> Dict[str, object]:
        acc = self.accuracy()
        fractions = [r.first_step_fraction for r in self.rows if r.first_step_fraction is not None]
        return {
            "method": self.method,
            "regime": self.regime,
            "lifecycle": self.lifecycle,
            "accuracy": acc,
            "error_rate": 100.0 - acc,
            "domain_accuracy": self.domain_accuracy(),
            "domain_error_rate": {k: 100.0 - v for k, v in self.domain_accuracy().items()},
            "batches": len(self.rows),
            "mean_entropy_pre": float(np.mean([r.entropy_pre for r in self.rows])) if self.rows else None,
            "mean_entropy_post": float(np.mean([r.entropy_post for r in self.rows])) if self.rows else None,
            "mean_first_step_fraction": float(np.mean(fractions)) if fractions else None,
            "first_step_dominance": self.first_step_dominance(),
        }


def _mean_entropy(logits: Tensor) -> float:
    return float(np.mean(self_entropy(logits.detach(), 1.0).data))


class AdaptationSession:
    """Live adaptation state over frozen backbone weights.

    With ``config.target == "prompt"`` the prompt leaves are optimized; any
    other target optimizes copies of backbone tensors (TENT baselines) and
    runs without a prompt.
    """

    def __init__(self, weights: ViTWeights, prompt_spec: PromptSpec, config: AdaptationConfig,
                 stream_size: Optional[int] = None):
        """Initialize a session.

        Args:
            weights: Frozen source weights (never modified)
            prompt_spec: Prompt layout
            config: Adaptation hyper-parameters
            stream_size: Number of test images, sizes the PLA queue

        Raises:
            AdaptationConfigError: If the configuration is invalid
        """
        errors = config.validate()
        if errors:
            raise AdaptationConfigError("Invalid adaptation config: " + "; ".join(errors))
        self.weights = weights
        self.prompt_spec = prompt_spec
        self.config = config
        self.lr = config.resolved_lr(prompt_spec.kind)
        self.tau = config.resolved_tau()
        image_size = weights.config.image_size
        self.weak_augment = AugmentSpec(kind="weak", padding=config.resolved_padding(image_size))
        strong_kind = "augmix" if config.strong_augment == "augmix" else "strong"
        self.strong_augment = AugmentSpec(kind=strong_kind)

        self.queue: Optional[MemoryQueue] = None
        if config.regime == "pla":
            capacity = config.queue_size_for(stream_size if stream_size else config.K)
            self.queue = MemoryQueue(capacity)
            if capacity < config.k:
                logger.warning(f"Queue capacity {capacity} is below k={config.k}; PLA will stay in warm-up")
        if config.steps == 0:
            logger.warning("Adaptation steps set to 0: predictions will equal the source model")

        self.batches_seen = 0
        self.metrics: List[BatchMetrics] = []
        self.reset()

    # -- state ------------------------------------------------------------

    @property
    def adapts_backbone(self) -> bool:
        return self.config.target != "prompt"

    def backbone_targets(self) -> List[str]:
        if self.config.target == "norm":
            return self.weights.norm_names()
        if self.config.target == "cls":
            return ["cls_token"]
        if self.config.target == "all":
            return self.weights.names()
        return []

    def reset(self) -> None:
        """Restore the prompt and backbone copy to their initial state."""
        self.prompt: Optional[VisualPrompt] = None
        if not self.adapts_backbone:
            self.prompt = init_prompts(self.prompt_spec, self.weights.config, seed=self.config.seed).detached()
        self.backbone = self.weights
        self.step_count = 0

    def model(self) -> Tuple[ViTWeights, Optional[VisualPrompt]]:
        """Current (weights, prompt) pair without gradient tracking."""
        return self.backbone, self.prompt

    def _leaf_state(self) -> Tuple[List[Tensor], List[Optional[float]], ViTWeights, Optional[VisualPrompt]]:
        if self.adapts_backbone:
            names = self.backbone_targets()
            weights = self.backbone.with_leaves(names)
            return [weights[n] for n in names], [None] * len(names), weights, None
        leaves = [leaf.as_leaf() for leaf in self.prompt.leaves()]
        return leaves, self.prompt.leaf_bounds(), self.backbone, self.prompt.with_leaves(leaves)

    def _assign(self, updated: List[Tensor]) -> None:
        if self.adapts_backbone:
            self.backbone = self.backbone.replace(dict(zip(self.backbone_targets(), updated)))
        else:
            self.prompt = self.prompt.with_leaves(updated)

    def optimize(self, objective: Callable[[ViTWeights, Optional[VisualPrompt]], Tensor]) -> Tuple[List[float], float]:
        """Run ``config.steps`` SGD iterations on ``objective``.

        Returns:
            Tuple of the loss before every step and the loss after the last step

        Raises:
            NumericalDivergenceError: On a non-finite loss or gradient; the
                state keeps its value from before the failing step
        """
        losses: List[float] = []
        for step in range(self.config.steps):
            leaves, bounds, weights, prompt = self._leaf_state()
            graph = ComputeGraph().register_all(leaves)
            loss = objective(weights, prompt)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalDivergenceError(f"non-finite loss at step {step} (batch {self.batches_seen})")
            grads = backward(loss, graph)
            try:
                updated = sgd_step(leaves, [grads[leaf] for leaf in leaves], self.lr, bounds)
            except NumericalDivergenceError as e:
                logger.error(f"Divergence at step {step} of batch {self.batches_seen}: {e}")
                raise NumericalDivergenceError(f"step {step} of batch {self.batches_seen}: {e}")
            self._assign(updated)
            self.step_count += 1
            losses.append(value)
            logger.debug(f"batch {self.batches_seen} step {step}: loss {value:.6f}")
        post = objective(*self.model()).item()
        return losses, post

    def _finish(self, metrics: BatchMetrics) -> BatchMetrics:
        self.metrics.append(metrics)
        self.batches_seen += 1
        if self.config.lifecycle == "episodic":
            self.reset()
        return metrics

    # -- snapshots --------------------------------------------------------

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Prompt (or adapted backbone) tensors, optimizer state and queue dump."""
        named: Dict[str, np.ndarray] = {"optimizer.step_count": np.asarray([self.step_count], dtype=np.int64)}
        if self.prompt is not None:
            named.update(self.prompt.named_tensors())
        for name in self.backbone_targets():
            named[f"backbone.{name}"] = self.backbone[name].data
        if self.queue is not None:
            named.update(self.queue.named_arrays())
        return named

    def restore(self, named: Dict[str, np.ndarray]) -> None:
        self.step_count = int(named["optimizer.step_count"][0])
        if not self.adapts_backbone:
            prompt = prompt_from_named(named, self.prompt_spec.kind).detached()
            if isinstance(prompt, PrependitivePrompt):
                prompt.persist_outputs = self.prompt_spec.persist_prompt_outputs
            self.prompt = prompt
        updates = {name[len("backbone."):]: Tensor(array) for name, array in named.items() if name.startswith("backbone.")}
        self.backbone = self.weights.replace(updates) if updates else self.weights
        if "queue.meta" in named:
            self.queue = MemoryQueue.from_named(named)


def _accuracy(predictions: np.ndarray, labels: Optional[np.ndarray]) -> Optional[float]:
    if labels is None:
        return None
    return float(100.0 * np.mean(predictions == np.asarray(labels)))


def adapt_bia(session: AdaptationSession, images: np.ndarray, labels: Optional[np.ndarray] = None,
              stream_index: int = 0, domain: str = "") -> Tuple[np.ndarray, BatchMetrics]:
    """Batched-image adaptation: minimize mean self-entropy over the batch.

    Args:
        session: Adaptation session
        images: ``[K, 3, H, W]`` batch
        labels: Optional ground truth, only used for metrics
        stream_index: Position of the batch in the stream
        domain: Domain name of the batch

    Returns:
        Tuple of predictions ``[K]`` and batch metrics
    """
    if len(images) == 0:
        raise AdaptationError("adapt_bia needs at least one image")
    tau = session.tau
    logits_pre, _ = forward(images, *session.model())
    entropy_pre = _mean_entropy(logits_pre)

    losses, post = session.optimize(lambda w, p: bia_loss(forward(images, w, p)[0], tau))

    logits_post, _ = forward(images, *session.model())
    predictions = np.argmax(logits_post.data, axis=1)
    metrics = BatchMetrics(
        stream_index=stream_index, domain=domain, regime="bia", lifecycle=session.config.lifecycle,
        step_losses=losses, post_loss=post, entropy_pre=entropy_pre,
        entropy_post=_mean_entropy(logits_post), predictions=predictions,
        accuracy=_accuracy(predictions, labels),
    )
    return predictions, session._finish(metrics)


def tent_baseline(session: AdaptationSession, images: np.ndarray, labels: Optional[np.ndarray] = None,
                  stream_index: int = 0, domain: str = "") -> Tuple[np.ndarray, BatchMetrics]:
    """Entropy minimization over backbone tensors selected by ``config.target``.

    Raises:
        AdaptationConfigError: If the session adapts prompts rather than the backbone
    """
    if not session.adapts_backbone:
        raise AdaptationConfigError("tent_baseline needs target norm, cls or all")
    return adapt_bia(session, images, labels, stream_index, domain)


def tent_norm_baseline(session: AdaptationSession, images: np.ndarray, labels: Optional[np.ndarray] = None,
                       stream_index: int = 0, domain: str = "") -> Tuple[np.ndarray, BatchMetrics]:
    """TENT over every LayerNorm γ and β."""
    if session.config.target != "norm":
        raise AdaptationConfigError(f"tent_norm_baseline needs target 'norm', got '{session.config.target}'")
    return adapt_bia(session, images, labels, stream_index, domain)


def adapt_sia(session: AdaptationSession, image: np.ndarray, label: Optional[int] = None,
              stream_index: int = 0, domain: str = "") -> Tuple[int, BatchMetrics]:
    """Single-image adaptation over K weak views, predicting on the original image.

    View seeds come from the image content, so the result does not depend on
    where the image sits in the stream.
    """
    if image.ndim != 3:
        raise AdaptationError(f"adapt_sia needs one [3, H, W] image, got shape {image.shape}")
    if session.config.lifecycle != "episodic":
        raise AdaptationConfigError("sia runs only with the episodic lifecycle")
    cfg = session.config
    views = expand_views(image, session.weak_augment, cfg.K, content_seed(cfg.seed, image))

    logits_pre, _ = forward(image, *session.model())
    entropy_pre = _mean_entropy(logits_pre)
    losses, post = session.optimize(
        lambda w, p: sia_loss(forward(views, w, p)[0], session.tau, cfg.eta, cfg.sia_average)
    )
    logits_post, _ = forward(image, *session.model())
    prediction = int(np.argmax(logits_post.data[0]))
    metrics = BatchMetrics(
        stream_index=stream_index, domain=domain, regime="sia", lifecycle=cfg.lifecycle,
        step_losses=losses, post_loss=post, entropy_pre=entropy_pre,
        entropy_post=_mean_entropy(logits_post), predictions=np.asarray([prediction]),
        accuracy=_accuracy(np.asarray([prediction]), None if label is None else [label]),
    )
    return prediction, session._finish(metrics)


def adapt_pla(session: AdaptationSession, images: np.ndarray, labels: Optional[np.ndarray] = None,
              stream_index: int = 0, domain: str = "") -> Tuple[np.ndarray, BatchMetrics]:
    """Pseudo-label adaptation with weak/strong views and the memory queue.

    While the queue holds fewer than k entries the batch falls back to
    self-entropy on the original images at ``warmup_tau``. Afterwards the
    weak-view CLS embeddings and logits, recomputed with the adapted prompt,
    are pushed into the queue.
    """
    cfg = session.config
    if cfg.lifecycle != "continual":
        raise AdaptationConfigError("pla runs only with the continual lifecycle")
    if session.queue is None:
        raise AdaptationConfigError("pla session has no memory queue")
    if len(images) == 0:
        raise AdaptationError("adapt_pla needs at least one image")

    base = derive_seed(cfg.seed, session.batches_seen)
    weak = augment_batch(images, session.weak_augment, derive_seed(base, 0))
    strong = augment_batch(images, session.strong_augment, derive_seed(base, 1))

    logits_pre, _ = forward(images, *session.model())
    entropy_pre = _mean_entropy(logits_pre)

    warmup = len(session.queue) < cfg.k
    if warmup:
        logger.warning(f"Memory queue holds {len(session.queue)} < k={cfg.k} entries, using self-entropy warm-up")
        losses, post = session.optimize(lambda w, p: bia_loss(forward(images, w, p)[0], cfg.warmup_tau))
    else:
        _, trace = forward(weak, *session.model())
        z_hat = knn_pseudo_labels(trace.cls_final.data, session.queue, cfg.k)
        losses, post = session.optimize(lambda w, p: pla_batch_loss(forward(strong, w, p)[0], z_hat, session.tau))

    logits_post, _ = forward(images, *session.model())
    predictions = np.argmax(logits_post.data, axis=1)
    weak_logits, weak_trace = forward(weak, *session.model())
    session.queue.extend(weak_trace.cls_final.data, weak_logits.data)

    metrics = BatchMetrics(
        stream_index=stream_index, domain=domain, regime="pla", lifecycle=cfg.lifecycle,
        step_losses=losses, post_loss=post, entropy_pre=entropy_pre,
        entropy_post=_mean_entropy(logits_post), predictions=predictions,
        accuracy=_accuracy(predictions, labels), warmup=warmup,
    )
    return predictions, session._finish(metrics)


def _merge_single_image_rows(rows: List[BatchMetrics], stream_index: int, domain: str,
                             labels: np.ndarray) -> BatchMetrics:
    predictions = np.concatenate([r.predictions for r in rows])
    step_losses = list(np.mean([r.step_losses for r in rows], axis=0)) if rows[0].step_losses else []
    return BatchMetrics(
        stream_index=stream_index, domain=domain, regime=rows[0].regime, lifecycle=rows[0].lifecycle,
        step_losses=[float(v) for v in step_losses],
        post_loss=float(np.mean([r.post_loss for r in rows])),
        entropy_pre=float(np.mean([r.entropy_pre for r in rows])),
        entropy_post=float(np.mean([r.entropy_post for r in rows])),
        predictions=predictions, accuracy=_accuracy(predictions, labels),
    )


def method_name(session: AdaptationSession) -> str:
    if session.adapts_backbone:
        return f"tent-{session.config.target}"
    return f"vpa-{session.prompt_spec.kind}"


def run_stream(session: AdaptationSession, stream: Dataset, batch_size: Optional[int] = None) -> StreamResult:
    """Adapt over a stream in order and collect per-batch metrics.

    Args:
        session: Adaptation session (fresh, or carrying continual state)
        stream: Test stream, optionally with domain segments
        batch_size: Images per batch; defaults to ``config.K``

    Returns:
        StreamResult with one row per batch

    Raises:
        AdaptationConfigError: If the regime/lifecycle pair is not supported
    """
    cfg = session.config
    if cfg.lifecycle not in VALID_PAIRS.get(cfg.regime, ()):
        raise AdaptationConfigError(
            f"{cfg.regime}/{cfg.lifecycle} is not supported; valid combinations: {', '.join(valid_combinations())}"
        )
    batch_size = batch_size or cfg.K
    result = StreamResult(method=method_name(session), regime=cfg.regime, lifecycle=cfg.lifecycle)

    for batch in iter_stream(stream, batch_size):
        if cfg.regime == "sia":
            rows = [adapt_sia(session, image, None, batch.index, batch.domain)[1] for image in batch.images]
            metrics = _merge_single_image_rows(rows, batch.index, batch.domain, batch.labels)
            # per-image rows are replaced by the merged batch row
            del session.metrics[-len(rows):]
            session.metrics.append(metrics)
        elif cfg.regime == "pla":
            _, metrics = adapt_pla(session, batch.images, batch.labels, batch.index, batch.domain)
        else:
            _, metrics = adapt_bia(session, batch.images, batch.labels, batch.index, batch.domain)
        metrics.ids = batch.ids
        result.rows.append(metrics)
        result.labels.append(batch.labels)
        result.domains.append(batch.domain)
        logger.debug(metrics.describe())

    dominance = result.first_step_dominance()
    if dominance is not None:
        logger.info(f"First step gave the largest loss drop in {100 * dominance:.0f}% of batches")
    logger.info(f"{result.method} {cfg.regime}/{cfg.lifecycle}: accuracy {result.accuracy():.2f}% over {len(result.rows)} batches")
    return result


def evaluate_source(weights: ViTWeights, stream: Dataset, batch_size: int = 64) -> StreamResult:
    """Source-only pass over the same stream, without any adaptation."""
    result = StreamResult(method="source", regime="source", lifecycle="none")
    for batch in iter_stream(stream, batch_size):
        logits, _ = forward(batch.images, weights)
        predictions = np.argmax(logits.data, axis=1)
        entropy = _mean_entropy(logits)
        loss = bia_loss(logits.detach(), 1.0).item()
        result.rows.append(BatchMetrics(
            stream_index=batch.index, domain=batch.domain, regime="source", lifecycle="none",
            step_losses=[], post_loss=loss, entropy_pre=entropy, entropy_post=entropy,
            predictions=predictions, ids=batch.ids, accuracy=_accuracy(predictions, batch.labels),
        ))
        result.labels.append(batch.labels)
        result.domains.append(batch.domain)
    logger.info(f"Source accuracy {result.accuracy():.2f}% over {len(stream)} images")
    return result
