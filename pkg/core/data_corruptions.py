"""Procedural shapes data, parametric corruptions and style shifts."""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
import yaml
from scipy import ndimage

from core.seeding import derive_seed
from models.run_config import CORRUPTION_FAMILIES, STYLES, CorruptionSpec, DomainSpec

logger = logging.getLogger(__name__)

SHAPE_CLASSES = (
    "circle", "square", "triangle", "star", "cross",
    "ring", "crescent", "stripes", "checker", "dot-grid",
)
SUPERSAMPLE = 4
DEFAULT_TABLES_PATH = Path(__file__).parent.parent / "config" / "corruptions.yaml"


class DataGenerationError(Exception):
    """Exception raised when a dataset cannot be generated or transformed."""
    pass


class CorruptionConfigError(DataGenerationError):
    """Exception raised for unknown corruption families or bad severity tables."""
    pass


@dataclass(frozen=True)
class RenderParams:
    """Per-image drawing parameters, one row per image."""
    centers: np.ndarray     # [n, 2] (row, col) in pixels
    radii: np.ndarray       # [n] in pixels
    angles: np.ndarray      # [n] radians
    foreground: np.ndarray  # [n, 3]
    background: np.ndarray  # [n, 3]

    def take(self, indices: np.ndarray) -> "RenderParams":
        return RenderParams(
            centers=self.centers[indices],
            radii=self.radii[indices],
            angles=self.angles[indices],
            foreground=self.foreground[indices],
            background=self.background[indices],
        )

    @staticmethod
    def concat(parts: Sequence["RenderParams"]) -> "RenderParams":
        return RenderParams(
            centers=np.concatenate([p.centers for p in parts]),
            radii=np.concatenate([p.radii for p in parts]),
            angles=np.concatenate([p.angles for p in parts]),
            foreground=np.concatenate([p.foreground for p in parts]),
            background=np.concatenate([p.background for p in parts]),
        )


@dataclass
class Dataset:
    """Labeled images ``[n, 3, H, W]`` in [0, 1].

    ``ids`` are stable image identifiers (position in the unshuffled stream),
    ``metadata`` is the JSON-serializable generator description.
    """
    images: np.ndarray
    labels: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)
    render_params: Optional[RenderParams] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataGenerationError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            metadata=dict(self.metadata),
            render_params=self.render_params.take(indices) if self.render_params is not None else None,
            ids=self.ids[indices],
        )

    def batches(self, batch_size: int) -> Iterator["Dataset"]:
        for start in range(0, len(self), batch_size):
            yield self.subset(np.arange(start, min(start + batch_size, len(self))))

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass
class StreamBatch:
    """One batch of a domain stream."""
    index: int
    domain: str
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray


# Shape masks over local coordinates (unit radius, rotated frame).

def _square_region(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (np.abs(x) < 0.8) & (np.abs(y) < 0.8)


def _mask_circle(x, y):
    return np.hypot(x, y) < 0.9


def _mask_square(x, y):
    return (np.abs(x) < 0.7) & (np.abs(y) < 0.7)


def _mask_triangle(x, y):
    root3 = np.sqrt(3.0)
    return (y > -0.5) & (y + root3 * x < 1.0) & (y - root3 * x < 1.0)


def _mask_star(x, y):
    r, theta = np.hypot(x, y), np.arctan2(y, x)
    return r < 0.55 + 0.4 * np.cos(5.0 * theta)


def _mask_cross(x, y):
    return ((np.abs(x) < 0.3) & (np.abs(y) < 0.9)) | ((np.abs(y) < 0.3) & (np.abs(x) < 0.9))


def _mask_ring(x, y):
    r = np.hypot(x, y)
    return (r > 0.55) & (r < 0.95)


def _mask_crescent(x, y):
    return (np.hypot(x, y) < 0.9) & (np.hypot(x - 0.45, y) > 0.7)


def _mask_stripes(x, y):
    return _square_region(x, y) & (np.sin(x * np.pi * 2.5) > 0)


def _mask_checker(x, y):
    cells = np.floor((x + 1.0) * 2.5) + np.floor((y + 1.0) * 2.5)
    return _square_region(x, y) & (cells % 2 == 0)


def _mask_dot_grid(x, y):
    spacing = 0.55
    dx = x - spacing * np.round(x / spacing)
    dy = y - spacing * np.round(y / spacing)
    return (np.abs(x) < 0.9) & (np.abs(y) < 0.9) & (np.hypot(dx, dy) < 0.17)


_MASKS: List[Callable[[np.ndarray, np.ndarray], np.ndarray]] = [
    _mask_circle, _mask_square, _mask_triangle, _mask_star, _mask_cross,
    _mask_ring, _mask_crescent, _mask_stripes, _mask_checker, _mask_dot_grid,
]


def coverage(shape_id: int, center: np.ndarray, radius: float, angle: float, image_size: int) -> np.ndarray:
    """Anti-aliased ``[H, W]`` coverage of one shape, by supersampling."""
    fine = image_size * SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) / SUPERSAMPLE
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = (rows - center[0]) / radius, (cols - center[1]) / radius
    cos, sin = np.cos(angle), np.sin(angle)
    x = cos * dx + sin * dy
    y = -sin * dx + cos * dy
    mask = _MASKS[shape_id](x, -y).astype(np.float64)
    return mask.reshape(image_size, SUPERSAMPLE, image_size, SUPERSAMPLE).mean(axis=(1, 3))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float = 1.5) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(0, sigma, sigma), mode="wrap")
    return noise / max(noise.std(), 1e-12)


def _render(labels: np.ndarray, params: RenderParams, image_size: int, style: Optional[str] = None,
            seed: int = 0) -> np.ndarray:
    images = np.empty((len(labels), 3, image_size, image_size))
    for i, label in enumerate(labels):
        alpha = coverage(int(label), params.centers[i], float(params.radii[i]), float(params.angles[i]), image_size)
        fg = params.foreground[i][:, None, None]
        bg = params.background[i][:, None, None]
        if style == "outline":
            edges = np.clip(alpha - ndimage.grey_erosion(alpha, size=(3, 3), mode="nearest"), 0.0, 1.0)
            images[i] = np.broadcast_to(1.0 - edges, (3, image_size, image_size))
            continue
        if style == "textured":
            rng = np.random.default_rng(derive_seed(seed, i))
            fg = np.clip(fg + 0.15 * _smooth_noise(rng, (3, image_size, image_size)), 0.0, 1.0)
            bg = np.clip(bg + 0.15 * _smooth_noise(rng, (3, image_size, image_size)), 0.0, 1.0)
        images[i] = bg * (1.0 - alpha) + fg * alpha
    return images


def _sample_params(rng: np.random.Generator, n: int, image_size: int) -> RenderParams:
    radii = rng.uniform(0.28, 0.42, size=n) * image_size
    margin = radii * 0.9
    centers = np.stack([rng.uniform(margin, image_size - margin) for _ in range(2)], axis=1)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    low = rng.uniform(0.25, 0.40, size=(n, 3))
    high = rng.uniform(0.60, 0.75, size=(n, 3))
    dark_background = rng.random(n) < 0.5
    background = np.where(dark_background[:, None], low, high)
    foreground = np.where(dark_background[:, None], high, low)
    return RenderParams(centers, radii, angles, foreground, background)


def generate_shapes(n: int, image_size: int = 32, seed: int = 0, num_classes: int = 10) -> Dataset:
    """Render a balanced labeled shapes dataset.

    Args:
        n: Number of images (at least ``num_classes``)
        image_size: Side length in pixels
        seed: Generator seed
        num_classes: Number of shape classes used, up to 10

    Returns:
        Dataset with every class present ``n // c`` or ``n // c + 1`` times

    Raises:
        DataGenerationError: If ``n`` or ``num_classes`` is out of range
    """
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise DataGenerationError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}], got {num_classes}")
    if n < num_classes:
        raise DataGenerationError(f"need n >= number of classes ({num_classes}), got n={n}")
    if image_size < 4:
        raise DataGenerationError(f"image_size must be >= 4, got {image_size}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    params = _sample_params(rng, n, image_size)
    images = _render(labels, params, image_size)
    metadata = {
        "generator": "shapes",
        "n": n,
        "image_size": image_size,
        "seed": seed,
        "num_classes": num_classes,
        "classes": list(SHAPE_CLASSES[:num_classes]),
    }
    logger.debug(f"Generated {n} shape images of size {image_size} (seed {seed})")
    return Dataset(images=images, labels=labels, metadata=metadata, render_params=params)


def render_params_for(dataset: Dataset) -> RenderParams:
    """Render parameters of a dataset, regenerated from its metadata when missing."""
    if dataset.render_params is not None:
        return dataset.render_params
    meta = dataset.metadata
    if meta.get("generator") != "shapes":
        raise DataGenerationError("dataset carries no render parameters and no shapes generator metadata")
    source = generate_shapes(meta["n"], meta["image_size"], meta["seed"], meta["num_classes"])
    return source.render_params.take(dataset.ids % meta["n"])


# Corruptions

def _check_tables(tables: Dict[str, Any]) -> Dict[str, Any]:
    for family in CORRUPTION_FAMILIES:
        if family not in tables:
            raise CorruptionConfigError(f"severity table missing family '{family}'")
        entry = tables[family]
        values = entry.get("severities")
        if not isinstance(values, list) or len(values) != 5:
            raise CorruptionConfigError(f"family '{family}' needs exactly 5 severity entries")
        strength = [v[0] if isinstance(v, list) else v for v in values]
        increasing = entry.get("stronger", "increasing") == "increasing"
        if (strength[4] <= strength[0]) if increasing else (strength[4] >= strength[0]):
            raise CorruptionConfigError(f"family '{family}': severity 5 is not stronger than severity 1")
    return tables


@lru_cache(maxsize=4)
def load_severity_tables(path: Optional[str] = None) -> Dict[str, Any]:
    """Severity parameter tables, validated for severity-5 > severity-1 strength.

    Raises:
        CorruptionConfigError: If the file is missing, unreadable or fails validation
    """
    table_path = Path(path) if path else DEFAULT_TABLES_PATH
    try:
        with open(table_path, "r", encoding="utf-8") as f:
            tables = yaml.safe_load(f)
    except FileNotFoundError:
        raise CorruptionConfigError(f"Corruption table file not found: {table_path}")
    except yaml.YAMLError as e:
        raise CorruptionConfigError(f"Invalid corruption table YAML: {e}")
    return _check_tables(tables or {})


def severity_parameter(family: str, severity: int, path: Optional[str] = None):
    tables = load_severity_tables(path)
    if family not in tables:
        raise CorruptionConfigError(f"unknown corruption family '{family}'")
    return tables[family]["severities"][severity - 1]


def disk_kernel(radius: float, alias_sigma: float) -> np.ndarray:
    """Normalized disk kernel smoothed by a small Gaussian."""
    half = max(1, int(np.ceil(radius)) + 1)
    ax = np.arange(-half, half + 1)
    xx, yy = np.meshgrid(ax, ax)
    kernel = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    if alias_sigma > 0:
        kernel = ndimage.gaussian_filter(kernel, sigma=alias_sigma)
    return kernel / kernel.sum()


def _pixelate(image: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = image.shape
    nh, nw = -(-h // factor), -(-w // factor)
    padded = np.pad(image, ((0, 0), (0, nh * factor - h), (0, nw * factor - w)), mode="edge")
    blocks = padded.reshape(c, nh, factor, nw, factor).mean(axis=(2, 4))
    upsampled = np.repeat(np.repeat(blocks, factor, axis=1), factor, axis=2)
    return upsampled[:, :h, :w]


def corrupt(image: np.ndarray, spec: CorruptionSpec, tables_path: Optional[str] = None) -> np.ndarray:
    """Apply one corruption family at one severity to a ``[3, H, W]`` image.

    Severity 0 is the identity. Outputs are clipped to [0, 1].

    Raises:
        CorruptionConfigError: For unknown families or severities outside [0, 5]
    """
    errors = spec.validate()
    if errors:
        raise CorruptionConfigError("; ".join(errors))
    if spec.severity == 0:
        return image.copy()

    value = severity_parameter(spec.family, spec.severity, tables_path)
    rng = np.random.default_rng(spec.seed)
    family = spec.family
    if family == "gaussian_noise":
        out = image + rng.normal(0.0, value, size=image.shape)
    elif family == "shot_noise":
        out = rng.poisson(np.clip(image, 0.0, 1.0) * value) / value
    elif family == "impulse_noise":
        out = image.copy()
        hit = rng.random(image.shape) < value
        salt = rng.random(image.shape) < 0.5
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
    elif family == "defocus_blur":
        kernel = disk_kernel(value[0], value[1])
        out = np.stack([ndimage.convolve(channel, kernel, mode="reflect") for channel in image])
    elif family == "brightness":
        out = image + value
    elif family == "contrast":
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = (image - mean) * value + mean
    else:
        out = _pixelate(image, int(value))
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(dataset: Dataset, spec: CorruptionSpec, tables_path: Optional[str] = None) -> Dataset:
    """Corrupt every image with its own seed derived from ``spec.seed`` and its id."""
    images = np.stack([
        corrupt(image, replace(spec, seed=derive_seed(spec.seed, int(ident))), tables_path)
        for image, ident in zip(dataset.images, dataset.ids)
    ])
    metadata = dict(dataset.metadata, corruption=spec.family, severity=spec.severity)
    return Dataset(images, dataset.labels.copy(), metadata, dataset.render_params, dataset.ids.copy())


def style_shift(dataset: Dataset, style: str, seed: int = 0) -> Dataset:
    """Label-preserving re-render in another style.

    * outline: dark edges on white
    * inverted: color inversion
    * textured: smooth noise textures in foreground and background

    Raises:
        DataGenerationError: For unknown styles
    """
    if style not in STYLES:
        raise DataGenerationError(f"unknown style '{style}', expected one of {STYLES}")
    if style == "inverted":
        images = 1.0 - dataset.images
    else:
        params = render_params_for(dataset)
        images = _render(dataset.labels, params, dataset.image_size, style=style, seed=seed)
    metadata = dict(dataset.metadata, style=style)
    return Dataset(images, dataset.labels.copy(), metadata, dataset.render_params, dataset.ids.copy())


def apply_domain(dataset: Dataset, domain: DomainSpec, seed: int = 0) -> Dataset:
    if domain.corruption is not None:
        return corrupt_dataset(dataset, CorruptionSpec(domain.corruption, domain.severity, seed))
    if domain.style is not None:
        return style_shift(dataset, domain.style, seed)
    return dataset


def build_domain_stream(base: Dataset, domains: Sequence[DomainSpec], seed: int = 0,
                        shuffle: bool = False) -> Dataset:
    """Concatenate the base set rendered in each domain, in order.

    Segment boundaries are recorded in ``metadata["segments"]``. With
    ``shuffle`` the images are permuted within each segment; ids keep
    pointing at the unshuffled positions.
    """
    if not domains:
        raise DataGenerationError("at least one domain is required")
    parts: List[Dataset] = []
    segments = []
    offset = 0
    for d, domain in enumerate(domains):
        part = apply_domain(base, domain, derive_seed(seed, d))
        part = Dataset(part.images, part.labels, part.metadata, part.render_params, part.ids + offset)
        if shuffle:
            order = np.random.default_rng(derive_seed(seed, d, 1)).permutation(len(part))
            part = part.subset(order)
        segments.append({"name": domain.name, "start": offset, "stop": offset + len(part)})
        parts.append(part)
        offset += len(part)

    metadata = dict(base.metadata, segments=segments, shuffled=shuffle)
    params = base.render_params
    return Dataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        metadata=metadata,
        render_params=RenderParams.concat([params] * len(parts)) if params is not None else None,
        ids=np.concatenate([p.ids for p in parts]),
    )


def iter_stream(stream: Dataset, batch_size: int) -> Iterator[StreamBatch]:
    """Batches in stream order; a batch never spans a domain switch."""
    segments = stream.metadata.get("segments") or [{"name": "clean", "start": 0, "stop": len(stream)}]
    index = 0
    for segment in segments:
        for start in range(segment["start"], segment["stop"], batch_size):
            stop = min(start + batch_size, segment["stop"])
            yield StreamBatch(index, segment["name"], stream.images[start:stop], stream.labels[start:stop],
                              stream.ids[start:stop])
            index += 1


def check_severity_monotonicity(family: str, accuracy_by_severity: Dict[int, float]) -> List[int]:
    """Severities where accuracy rose above the previous level; each is logged."""
    violations = []
    ordered = sorted(accuracy_by_severity)
    for prev, cur in zip(ordered, ordered[1:]):
        if accuracy_by_severity[cur] > accuracy_by_severity[prev]:
            logger.warning(
                f"{family}: accuracy increased from severity {prev} ({accuracy_by_severity[prev]:.2f}) "
                f"to {cur} ({accuracy_by_severity[cur]:.2f})"
            )
            violations.append(cur)
    return violations
