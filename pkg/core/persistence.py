"""Typed save/load helpers over the tensor container.

JSON metadata (model config, dataset generator description) is stored in
the container's own metadata entry, so each file is self-describing.
"""

import logging
from dataclasses import asdict
from typing import Any, Dict, Optional

import numpy as np

from core.container import ContainerFormatError, PathLike, load_container, read_metadata, save_container
from core.data_corruptions import Dataset
from core.prompting import PrependitivePrompt, VisualPrompt, prompt_from_named
from core.vit import ViTWeights, weights_from_named
from models.model_config import PROMPT_KINDS, ViTConfig

logger = logging.getLogger(__name__)


def save_weights(path: PathLike, weights: ViTWeights, extra: Optional[Dict[str, Any]] = None) -> None:
    """Write a checkpoint with its model config in the metadata entry."""
    save_container(path, weights.named_arrays(),
                   metadata={"kind": "weights", "model": asdict(weights.config), **(extra or {})})
    logger.info(f"Saved checkpoint with {weights.num_parameters()} parameters to {path}")


def load_weights(path: PathLike, config: Optional[ViTConfig] = None) -> ViTWeights:
    """Load a checkpoint; the model config comes from its metadata unless given.

    Raises:
        ContainerFormatError: If no config is given and the container carries none
    """
    if config is None:
        metadata = read_metadata(path)
        if "model" not in metadata:
            raise ContainerFormatError(f"{path}: no model config in the container metadata")
        config = ViTConfig(**metadata["model"])
    return weights_from_named(config, load_container(path))


def save_prompt(path: PathLike, prompt: VisualPrompt) -> None:
    named = dict(prompt.named_tensors())
    named["prompt.kind"] = np.asarray([PROMPT_KINDS.index(prompt.kind)], dtype=np.int64)
    if isinstance(prompt, PrependitivePrompt):
        named["prompt.persist"] = np.asarray([int(prompt.persist_outputs)], dtype=np.int64)
    save_container(path, named)


def _prompt_kind(named: Dict[str, np.ndarray], path: PathLike) -> str:
    if "prompt.kind" not in named:
        raise ContainerFormatError(f"{path}: no prompt.kind marker")
    index = int(named["prompt.kind"][0])
    if not 0 <= index < len(PROMPT_KINDS):
        raise ContainerFormatError(f"{path}: unknown prompt kind {index}")
    return PROMPT_KINDS[index]


def load_prompt(path: PathLike) -> VisualPrompt:
    named = load_container(path)
    prompt = prompt_from_named(named, _prompt_kind(named, path))
    if isinstance(prompt, PrependitivePrompt) and "prompt.persist" in named:
        prompt.persist_outputs = bool(named["prompt.persist"][0])
    return prompt


def save_dataset(path: PathLike, dataset: Dataset) -> None:
    """Images, labels and ids as tensors; generator metadata in the metadata entry."""
    save_container(path, {
        "images": dataset.images,
        "labels": dataset.labels.astype(np.int64),
        "ids": dataset.ids.astype(np.int64),
    }, metadata={"kind": "dataset", **dataset.metadata})


def load_dataset(path: PathLike) -> Dataset:
    named = load_container(path)
    metadata = read_metadata(path)
    metadata.pop("kind", None)
    return Dataset(images=named["images"], labels=named["labels"], metadata=metadata, ids=named.get("ids"))


def save_session(path: PathLike, snapshot: Dict[str, np.ndarray], prompt_kind: str) -> None:
    named = dict(snapshot)
    named["prompt.kind"] = np.asarray([PROMPT_KINDS.index(prompt_kind)], dtype=np.int64)
    save_container(path, named)


def load_session(path: PathLike) -> Dict[str, np.ndarray]:
    return load_container(path)
