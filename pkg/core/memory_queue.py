"""FIFO memory of (CLS embedding, weak-view logits) pairs for kNN pseudo-labels."""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterator, List

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QueueEntry:
    """One stored sample; arrays are read-only copies."""
    cls: np.ndarray
    z_weak: np.ndarray
    insertion: int


def _frozen_copy(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.flags.writeable = False
    return copy


class MemoryQueue:
    """Bounded FIFO store; once full, each insertion evicts the oldest entry."""

    def __init__(self, capacity: int):
        """Initialize an empty queue.

        Args:
            capacity: Maximum number of entries s
        """
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: Deque[QueueEntry] = deque(maxlen=capacity)
        self.insertions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[QueueEntry]:
        return iter(self._entries)

    def push(self, cls: np.ndarray, z_weak: np.ndarray) -> None:
        self.insertions += 1
        self._entries.append(QueueEntry(_frozen_copy(cls), _frozen_copy(z_weak), self.insertions))

    def extend(self, cls_batch: np.ndarray, z_batch: np.ndarray) -> None:
        """Insert rows of a batch in order."""
        if len(cls_batch) != len(z_batch):
            raise ValueError(f"batch sizes differ: {len(cls_batch)} embeddings, {len(z_batch)} logits")
        for cls, z in zip(cls_batch, z_batch):
            self.push(cls, z)

    def features(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, 0))
        return np.stack([e.cls for e in self._entries])

    def logits(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, 0))
        return np.stack([e.z_weak for e in self._entries])

    def insertion_ids(self) -> List[int]:
        return [e.insertion for e in self._entries]

    def clear(self) -> None:
        self._entries.clear()
        self.insertions = 0

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Tensors for a session snapshot."""
        return {
            "queue.cls": self.features(),
            "queue.logits": self.logits(),
            "queue.ids": np.asarray(self.insertion_ids(), dtype=np.int64),
            "queue.meta": np.asarray([self.capacity, self.insertions], dtype=np.int64),
        }

    @classmethod
    def from_named(cls, named: Dict[str, np.ndarray]) -> "MemoryQueue":
        capacity, insertions = (int(v) for v in named["queue.meta"])
        queue = cls(capacity)
        ids = named.get("queue.ids", np.zeros(0, dtype=np.int64))
        for cls_row, z_row, ident in zip(named["queue.cls"], named["queue.logits"], ids):
            queue._entries.append(QueueEntry(_frozen_copy(cls_row), _frozen_copy(z_row), int(ident)))
        queue.insertions = insertions
        return queue
