"""Metrics files: per-batch CSV, JSON summaries and loss curves."""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from core.adapt_engine import CSV_COLUMNS, BatchMetrics
from core.container import ContainerIOError, PathLike

logger = logging.getLogger(__name__)


def _clean(value: Any) -> Any:
    """JSON-safe value: NaN/Inf become null, numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        try:
            value = value.item()
        except (ValueError, AttributeError):
            return _clean(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_clean(payload), f, indent=2, sort_keys=True)
    except OSError as e:
        raise ContainerIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote {path}")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ContainerIOError(f"cannot read {path}: {e}")


def write_rows(path: PathLike, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format(v) for k, v in row.items()})
    except OSError as e:
        raise ContainerIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote {path}")
    return path


def _format(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


def read_rows(path: PathLike) -> List[Dict[str, str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ContainerIOError(f"cannot read {path}: {e}")


def write_metrics_csv(path: PathLike, rows: Sequence[BatchMetrics]) -> Path:
    """One row per batch with the standard metric columns."""
    return write_rows(path, (r.to_row() for r in rows), CSV_COLUMNS)


def write_step_curve(path: PathLike, curves: Dict[str, Sequence[BatchMetrics]]) -> Path:
    """Long-format loss curve: one row per (label, batch, step)."""
    rows = []
    for label, batches in curves.items():
        for batch in batches:
            for step, loss in enumerate(batch.loss_curve):
                rows.append({"label": label, "stream_index": batch.stream_index, "step": step, "loss": loss})
    return write_rows(path, rows, ("label", "stream_index", "step", "loss"))
