"""Seeded image augmentations on ``[C, H, W]`` arrays in [0, 1].

* weak: reflect-padded random crop
* strong: a reduced RandAugment over photometric and geometric ops
* augmix: Dirichlet-weighted chains mixed back into the image with a Beta skip

Magnitudes run from 0 to 10 and map linearly onto each op's range
(see ``_OP_RANGES``). Every function is a pure function of its arguments.
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy import ndimage

from core.seeding import derive_seed
from models.run_config import AugmentSpec

logger = logging.getLogger(__name__)


class AugmentationError(Exception):
    """Exception raised for invalid augmentation parameters."""
    pass


# op -> parameter value at magnitude 10
_OP_RANGES: Dict[str, float] = {
    "brightness": 0.9,      # multiplicative factor 1 ± 0.9
    "contrast": 0.9,        # contrast factor 1 ± 0.9 around the image mean
    "solarize": 1.0,        # threshold 1 − 1.0
    "posterize": 4.0,       # bits removed from 8
    "translate_x": 0.3,     # fraction of the width
    "translate_y": 0.3,     # fraction of the height
    "rotate": 30.0,         # degrees
    "sharpness": 1.0,       # unsharp-mask amount
}
RANDAUGMENT_OPS = tuple(_OP_RANGES)
# ops that overlap the corruption families are left out of AugMix chains
AUGMIX_OPS = ("solarize", "posterize", "translate_x", "translate_y", "rotate")


def crop_offset(padding: int, seed: int) -> Tuple[int, int]:
    """(dy, dx) offset of a crop, uniform over the (2·padding + 1)² grid."""
    rng = np.random.default_rng(seed)
    dy, dx = rng.integers(0, 2 * padding + 1, size=2)
    return int(dy), int(dx)


def random_crop(image: np.ndarray, padding: int, seed: int) -> np.ndarray:
    """Reflect-pad by ``padding`` and crop back to the original size.

    Raises:
        AugmentationError: If padding is negative or not smaller than the image
    """
    if padding < 0:
        raise AugmentationError(f"padding must be >= 0, got {padding}")
    if padding == 0:
        return image.copy()
    _, h, w = image.shape
    if padding >= min(h, w):
        raise AugmentationError(f"padding {padding} must be smaller than the image side {min(h, w)}")
    padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)), mode="reflect")
    dy, dx = crop_offset(padding, seed)
    return padded[:, dy:dy + h, dx:dx + w].copy()


def _shift(image: np.ndarray, pixels: int, axis: int) -> np.ndarray:
    if pixels == 0:
        return image
    size = image.shape[axis]
    pixels = int(np.clip(pixels, -(size - 1), size - 1))
    pad = [(0, 0)] * image.ndim
    pad[axis] = (max(pixels, 0), max(-pixels, 0))
    padded = np.pad(image, pad, mode="edge")
    start = max(-pixels, 0)
    return np.take(padded, np.arange(start, start + size), axis=axis)


def _apply_op(image: np.ndarray, op: str, magnitude: float, sign: float) -> np.ndarray:
    level = magnitude / 10.0 * _OP_RANGES[op]
    if op == "brightness":
        return image * (1.0 + sign * level)
    if op == "contrast":
        mean = image.mean()
        return mean + (image - mean) * (1.0 + sign * level)
    if op == "solarize":
        threshold = 1.0 - level
        return np.where(image > threshold, 1.0 - image, image)
    if op == "posterize":
        bits = 8 - int(round(level))
        quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0).astype(np.int64)
        mask = ~((1 << (8 - bits)) - 1) & 0xFF
        return (quantized & mask) / 255.0
    if op == "translate_x":
        return _shift(image, int(round(sign * level * image.shape[2])), axis=2)
    if op == "translate_y":
        return _shift(image, int(round(sign * level * image.shape[1])), axis=1)
    if op == "rotate":
        angle = sign * level
        if angle == 0:
            return image
        return ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
    if op == "sharpness":
        blurred = ndimage.gaussian_filter(image, sigma=(0, 1.0, 1.0), mode="reflect")
        return image + level * (image - blurred)
    raise AugmentationError(f"unknown augmentation op '{op}'")


def _apply_chain(image: np.ndarray, ops: List[str], magnitude: float, rng: np.random.Generator,
                 count: int) -> np.ndarray:
    out = image
    for _ in range(count):
        op = ops[int(rng.integers(len(ops)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = np.clip(_apply_op(out, op, magnitude, sign), 0.0, 1.0)
    return out


def rand_augment_lite(image: np.ndarray, n_ops: int, magnitude: float, seed: int) -> np.ndarray:
    """Apply ``n_ops`` uniformly drawn ops at ``magnitude`` (0-10)."""
    if n_ops < 0:
        raise AugmentationError(f"n_ops must be >= 0, got {n_ops}")
    if not 0 <= magnitude <= 10:
        raise AugmentationError(f"magnitude must be in [0, 10], got {magnitude}")
    rng = np.random.default_rng(seed)
    return _apply_chain(image.copy(), list(RANDAUGMENT_OPS), magnitude, rng, n_ops)


def augmix_lite(image: np.ndarray, width: int = 3, depth: int = 2, alpha: float = 1.0,
                magnitude: float = 3.0, seed: int = 0) -> np.ndarray:
    """Mix ``width`` op chains with Dirichlet(α) weights, then blend with the clean image.

    Returns:
        m·image + (1 − m)·Σ w_i·chain_i with m ~ Beta(α, α)
    """
    if width < 1:
        raise AugmentationError(f"width must be >= 1, got {width}")
    if depth < 0:
        raise AugmentationError(f"depth must be >= 0, got {depth}")
    if not alpha > 0:
        raise AugmentationError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet([alpha] * width)
    skip = rng.beta(alpha, alpha)
    mixed = np.zeros_like(image)
    for w in weights:
        mixed = mixed + w * _apply_chain(image, list(AUGMIX_OPS), magnitude, rng, depth)
    return skip * image + (1.0 - skip) * mixed


AugmentFn = Callable[[np.ndarray, int], np.ndarray]


def make_augment(spec: AugmentSpec) -> AugmentFn:
    """Bind an AugmentSpec into a ``(image, seed) -> image`` function."""
    errors = spec.validate()
    if errors:
        raise AugmentationError("Invalid augment spec: " + "; ".join(errors))
    if spec.kind == "identity":
        return lambda image, seed: image.copy()
    if spec.kind == "weak":
        return lambda image, seed: random_crop(image, spec.padding, seed)
    if spec.kind == "strong":
        return lambda image, seed: rand_augment_lite(image, spec.n_ops, spec.magnitude, seed)
    return lambda image, seed: augmix_lite(image, spec.width, spec.depth, spec.alpha, spec.magnitude, seed)


def augment_batch(images: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Augment every image of ``[B, C, H, W]`` with its own derived seed."""
    fn = make_augment(spec)
    return np.stack([fn(image, derive_seed(seed, i)) for i, image in enumerate(images)])


def expand_views(image: np.ndarray, spec: AugmentSpec, count: int, seed: int) -> np.ndarray:
    """``count`` augmented views of one image, ``[count, C, H, W]``."""
    fn = make_augment(spec)
    return np.stack([fn(image, derive_seed(seed, v)) for v in range(count)])
