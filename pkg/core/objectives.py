"""Adaptation objectives: entropy losses, confidence selection and kNN pseudo-labels."""

import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np

from core.memory_queue import MemoryQueue
from core.tensor import ParameterError, Tensor, as_tensor, log_floor, log_softmax, softmax_temp

logger = logging.getLogger(__name__)


class ObjectiveError(Exception):
    """Exception raised when a loss is called outside its contract."""
    pass


class InsufficientHistoryError(ObjectiveError):
    """Raised when the memory queue holds fewer than k entries."""
    pass


@dataclass(frozen=True)
class SelectionMask:
    """Rows kept by confidence selection, lowest entropy first."""
    kept: List[int]
    eta: float
    threshold: float


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def selection_count(total: int, eta: float) -> int:
    """max(1, round(η·K)), with halves rounded up."""
    return max(1, int(np.floor(eta * total + 0.5)))


def self_entropy(z: Union[Tensor, np.ndarray], tau: float = 1.0) -> Tensor:
    """Shannon entropy of softmax(z / τ) along the last axis.

    Args:
        z: Logits, one row or a batch of rows
        tau: Softmax temperature

    Returns:
        Entropy per row (a scalar for a single row)

    Raises:
        ParameterError: If ``tau`` is not positive
    """
    _check_tau(tau)
    p = softmax_temp(as_tensor(z), tau)
    return -(p * log_floor(p)).sum(axis=-1)


def bia_loss(logits: Union[Tensor, np.ndarray], tau: float = 1.0) -> Tensor:
    """Mean self-entropy over a batch of K predictions.

    Raises:
        ObjectiveError: If the batch is empty
    """
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ObjectiveError(f"bia_loss needs a non-empty [K, c] batch, got shape {logits.shape}")
    return self_entropy(logits, tau).mean()


def confidence_select(logits: Union[Tensor, np.ndarray], tau: float, eta: float) -> SelectionMask:
    """Keep the max(1, round(η·K)) lowest-entropy rows; ties go to the lower index.

    Raises:
        ParameterError: If ``eta`` is outside (0, 1] or ``tau`` is not positive
    """
    if not 0 < eta <= 1:
        raise ParameterError(f"eta must be in (0, 1], got {eta}")
    z = as_tensor(logits).detach()
    entropies = self_entropy(z, tau).data.reshape(-1)
    count = selection_count(entropies.size, eta)
    order = np.argsort(entropies, kind="stable")[:count]
    kept = [int(i) for i in order]
    return SelectionMask(kept=kept, eta=eta, threshold=float(entropies[kept[-1]]))


def marginal_entropy_of_probs(logits: Tensor, tau: float) -> Tensor:
    """Entropy of the mean of softmax(z/τ) over rows."""
    p_bar = softmax_temp(logits, tau).mean(axis=0)
    return -(p_bar * log_floor(p_bar)).sum()


def sia_loss(logits_aug: Union[Tensor, np.ndarray], tau: float = 1.0, eta: float = 0.1,
             average: str = "logits") -> Tensor:
    """Marginal entropy of the averaged prediction over confident augmented views.

    Selection uses the current entropies but is not differentiated through.

    Args:
        logits_aug: ``[K, c]`` logits of K views of one image
        tau: Softmax temperature
        eta: Fraction of views kept
        average: ``"logits"`` averages logits; ``"probs"`` averages probabilities

    Returns:
        Scalar loss
    """
    logits_aug = as_tensor(logits_aug)
    if logits_aug.ndim != 2 or logits_aug.shape[0] == 0:
        raise ObjectiveError(f"sia_loss needs a non-empty [K, c] batch, got shape {logits_aug.shape}")
    mask = confidence_select(logits_aug, tau, eta)
    selected = logits_aug[np.asarray(mask.kept)]
    if average == "probs":
        return marginal_entropy_of_probs(selected, tau)
    if average != "logits":
        raise ObjectiveError(f"unknown averaging mode '{average}'")
    return self_entropy(selected.mean(axis=0), tau)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def nearest_neighbors(queries: np.ndarray, bank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most cosine-similar bank rows per query (ties: lower index)."""
    sims = _normalize_rows(np.atleast_2d(queries)) @ _normalize_rows(bank).T
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def knn_pseudo_labels(queries: np.ndarray, queue: MemoryQueue, k: int) -> np.ndarray:
    """Soft pseudo-labels ``[B, c]``: mean stored weak-view logits of the k nearest entries.

    Raises:
        InsufficientHistoryError: If the queue holds fewer than k entries
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if len(queue) < k:
        raise InsufficientHistoryError(f"memory queue holds {len(queue)} entries, need k={k}")
    queries = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
    idx = nearest_neighbors(queries, queue.features(), k)
    return queue.logits()[idx].mean(axis=1)


def knn_pseudo_label(query_cls: np.ndarray, queue: MemoryQueue, k: int) -> Tensor:
    """Soft pseudo-label ``[c]`` for one CLS embedding."""
    return Tensor(knn_pseudo_labels(np.asarray(query_cls).reshape(1, -1), queue, k)[0])


def pla_loss(z_strong: Union[Tensor, np.ndarray], z_hat: Union[Tensor, np.ndarray], tau: float = 0.07) -> Tensor:
    """Cross-entropy of the strong-view prediction against the τ-sharpened pseudo-label.

    The pseudo-label side is a constant; gradients flow through ``z_strong`` only.

    Returns:
        Loss per row (a scalar for a single row)
    """
    _check_tau(tau)
    target = softmax_temp(as_tensor(z_hat).detach(), tau).data
    student = softmax_temp(as_tensor(z_strong), 1.0)
    return -(Tensor(target) * log_floor(student)).sum(axis=-1)


def pla_batch_loss(z_strong: Tensor, z_hat: np.ndarray, tau: float = 0.07) -> Tensor:
    return pla_loss(z_strong, z_hat, tau).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    log_probs = log_softmax(logits)
    picked = log_probs[np.arange(labels.size), labels]
    return -picked.mean()
