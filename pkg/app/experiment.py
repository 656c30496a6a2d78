"""Experiment orchestration behind the command line."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from app.config import worker_count
from app.run_config_loader import RunConfigError, RunConfigLoader
from core.adapt_engine import (
    AdaptationError,
    AdaptationSession,
    StreamResult,
    evaluate_source,
    run_stream,
)
from core.data_corruptions import Dataset, build_domain_stream, check_severity_monotonicity, generate_shapes
from core.metrics_io import write_json, write_metrics_csv, write_rows, write_step_curve
from core.persistence import load_weights, save_session, save_weights
from core.prompting import param_count
from core.report import Report, build_report, write_report
from core.seeding import derive_seed
from core.trainer import evaluate_accuracy, train_source
from core.vit import ViTWeights
from models.run_config import RunConfig

logger = logging.getLogger(__name__)

ABLATION_AXES = ("steps", "tau", "prompt_size", "k", "augment", "lr")
DEFAULT_GRIDS: Dict[str, List[Any]] = {
    "steps": [1, 2, 4, 8, 10],
    "tau": [0.05, 0.07, 0.1, 0.5, 1.0],
    "prompt_size": [150, 300, 450],
    "k": [3, 7, 11, 15, 21],
    "augment": ["randaugment", "augmix"],
    "lr": [0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 4.0],
}
# axes read only by the pla regime
PSEUDO_LABEL_AXES = ("k", "augment")
# axis -> adapt field a sweep result can be written back to
RECORDABLE_AXES = {"steps": "steps", "tau": "tau", "lr": "lr"}
METHODS = ("vpa", "tent-norm", "tent-cls", "tent-all")
ABLATION_COLUMNS = (
    "axis", "value", "accuracy", "error_rate", "source_acc", "delta",
    "mean_entropy_pre", "mean_entropy_post", "mean_first_step_fraction", "first_step_dominance",
)


def select_best(rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Grid cell with the highest adapted accuracy; ties keep the earlier cell."""
    if not rows:
        raise RunConfigError("no ablation rows to select from")
    best = max(rows, key=lambda row: row["accuracy"])
    return {
        "axis": best["axis"],
        "value": best["value"],
        "accuracy": best["accuracy"],
        "delta": best["delta"],
        "grid": [row["value"] for row in rows],
    }


class ExperimentRunner:
    """Runs source training, adaptation, ablations and reports for one RunConfig."""

    def __init__(self, config: RunConfig, loader: Optional[RunConfigLoader] = None,
                 workers: Optional[int] = None):
        """Initialize the runner.

        Args:
            config: Validated run configuration
            loader: Loader used to persist the effective config
            workers: Ablation pool size; defaults to ``app.config.worker_count()``
        """
        self.config = config
        self.loader = loader or RunConfigLoader()
        self.workers = workers or worker_count()

    # -- data -------------------------------------------------------------

    def train_set(self) -> Dataset:
        data, model = self.config.data, self.config.model
        return generate_shapes(data.train_size, model.image_size, data.seed, model.num_classes)

    def test_set(self) -> Dataset:
        data, model = self.config.data, self.config.model
        return generate_shapes(data.test_size, model.image_size, derive_seed(data.seed, 1), model.num_classes)

    def build_stream(self) -> Dataset:
        data = self.config.data
        return build_domain_stream(self.test_set(), data.domains, seed=derive_seed(data.seed, 2),
                                   shuffle=data.shuffle_stream)

    def load_checkpoint(self, checkpoint: str) -> ViTWeights:
        weights = load_weights(checkpoint)
        if weights.config != self.config.model:
            logger.warning("Checkpoint model config differs from the run config; using the checkpoint's")
            self.config = replace(self.config, model=weights.config)
        return weights

    # -- commands ---------------------------------------------------------

    def train_source(self, out: str) -> Dict[str, Any]:
        """Train on the source set, save the checkpoint and its training log."""
        out_path = Path(out)
        weights, log = train_source(self.train_set(), self.config.model, self.config.train, seed=self.config.seed)
        log.clean_accuracy = evaluate_accuracy(weights, self.test_set())
        save_weights(out_path, weights, extra={"seed": self.config.seed})
        log_path = write_json(out_path.with_name(out_path.stem + ".training.json"), log.to_dict())
        self.loader.save(self.config, str(out_path.with_name(out_path.stem + ".run_config.json")))
        logger.info(f"Clean test accuracy {log.clean_accuracy:.2f}%")
        return {"checkpoint": str(out_path), "training_log": str(log_path), "clean_accuracy": log.clean_accuracy}

    def _session(self, weights: ViTWeights, config: RunConfig, stream_size: int) -> AdaptationSession:
        return AdaptationSession(weights, config.prompt, config.adapt, stream_size=stream_size)

    def _run(self, weights: ViTWeights, config: RunConfig, stream: Dataset) -> Tuple[StreamResult, AdaptationSession]:
        session = self._session(weights, config, len(stream))
        before = weights.fingerprint()
        result = run_stream(session, stream, batch_size=config.data.batch_size)
        if weights.fingerprint() != before:
            raise AdaptationError("backbone weights changed during adaptation")
        return result, session

    def method_config(self, method: str) -> RunConfig:
        if method not in METHODS:
            raise RunConfigError(f"unknown method '{method}', expected one of {METHODS}")
        if method == "vpa":
            return self.config
        target = method.split("-", 1)[1]
        if self.config.adapt.regime != "bia":
            raise RunConfigError(f"{method} runs only with regime bia, got '{self.config.adapt.regime}'")
        return replace(self.config, adapt=replace(self.config.adapt, target=target))

    def adapt(self, checkpoint: str, out_dir: str, method: str = "vpa") -> Dict[str, Any]:
        """Source baseline and adapted run over the same stream.

        Writes ``metrics.csv``, ``source_metrics.csv``, ``step_curve.csv``,
        ``summary.json``, ``session.vpac`` and ``run_config.json``.
        """
        out = Path(out_dir)
        weights = self.load_checkpoint(checkpoint)
        config = self.method_config(method)
        stream = self.build_stream()

        source = evaluate_source(weights, stream, batch_size=config.data.batch_size)
        self._log_severity_trend(source)
        result, session = self._run(weights, config, stream)

        write_metrics_csv(out / "metrics.csv", result.rows)
        write_metrics_csv(out / "source_metrics.csv", source.rows)
        write_step_curve(out / "step_curve.csv", {result.method: result.rows})
        save_session(out / "session.vpac", session.snapshot(), config.prompt.kind)
        self.loader.save(config, str(out / "run_config.json"))

        summary = {
            "source_acc": source.accuracy(),
            "adapted_acc": result.accuracy(),
            "delta": result.accuracy() - source.accuracy(),
            "prompt_kind": config.prompt.kind if method == "vpa" else "",
            "prompt_params": param_count(config.prompt, config.model) if method == "vpa" else 0,
            "backbone_params": weights.num_parameters(),
            "source": source.summary(),
            "adapted": result.summary(),
        }
        write_json(out / "summary.json", summary)
        logger.info(f"Source {summary['source_acc']:.2f}% -> adapted {summary['adapted_acc']:.2f}% "
                    f"(delta {summary['delta']:+.2f})")
        return summary

    def cell_config(self, axis: str, value: Any) -> RunConfig:
        """Run config of one ablation grid cell.

        The k and augment axes switch a non-pla config to pla/continual.

        Raises:
            RunConfigError: For unknown axes or values that do not fit the model
        """
        cfg = self.config
        adapt = cfg.adapt
        if axis in PSEUDO_LABEL_AXES and adapt.regime != "pla":
            if adapt.target != "prompt":
                raise RunConfigError(f"axis '{axis}' needs pla, which only adapts the prompt (target is '{adapt.target}')")
            logger.warning(f"Axis '{axis}' only affects pseudo-label adaptation; "
                           f"running its cells as pla/continual instead of {adapt.regime}/{adapt.lifecycle}")
            adapt = replace(adapt, regime="pla", lifecycle="continual")
        if axis == "steps":
            return replace(cfg, adapt=replace(adapt, steps=int(value)))
        if axis == "tau":
            return replace(cfg, adapt=replace(adapt, tau=float(value)))
        if axis == "lr":
            return replace(cfg, adapt=replace(adapt, lr=float(value)))
        if axis == "k":
            return replace(cfg, adapt=replace(adapt, k=int(value)))
        if axis == "augment":
            return replace(cfg, adapt=replace(adapt, strong_augment=str(value)))
        if axis == "prompt_size":
            try:
                return replace(cfg, prompt=cfg.prompt.with_total_tokens(int(value), cfg.model))
            except ValueError as e:
                raise RunConfigError(str(e))
        raise RunConfigError(f"unknown ablation axis '{axis}', expected one of {ABLATION_AXES}")

    def ablate(self, checkpoint: str, axis: str, out_dir: str, grid: Optional[Sequence[Any]] = None) -> List[Dict[str, Any]]:
        """Run every grid cell as an independent session and write ``ablation.csv``."""
        grid = list(grid) if grid else DEFAULT_GRIDS.get(axis, [])
        if not grid:
            raise RunConfigError(f"empty grid for axis '{axis}'")
        out = Path(out_dir)
        weights = self.load_checkpoint(checkpoint)
        cells = [(value, self.cell_config(axis, value)) for value in grid]
        for _, cell in cells:
            errors = cell.validate()
            if errors:
                raise RunConfigError(f"invalid {axis} cell: " + "; ".join(errors))
        stream = self.build_stream()
        source = evaluate_source(weights, stream, batch_size=self.config.data.batch_size)

        workers = max(1, min(self.workers, len(cells)))
        logger.info(f"Ablating {axis} over {grid} with {workers} worker(s)")
        if workers == 1:
            results = [self._run(weights, cell, stream)[0] for _, cell in cells]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda item: self._run(weights, item[1], stream)[0], cells))

        rows = []
        for (value, _), result in zip(cells, results):
            summary = result.summary()
            rows.append({
                "axis": axis,
                "value": value,
                "accuracy": summary["accuracy"],
                "error_rate": summary["error_rate"],
                "source_acc": source.accuracy(),
                "delta": summary["accuracy"] - source.accuracy(),
                "mean_entropy_pre": summary["mean_entropy_pre"],
                "mean_entropy_post": summary["mean_entropy_post"],
                "mean_first_step_fraction": summary["mean_first_step_fraction"],
                "first_step_dominance": summary["first_step_dominance"],
            })
        write_rows(out / "ablation.csv", rows, ABLATION_COLUMNS)
        selection = select_best(rows)
        selection["table"] = str(out / "ablation.csv")
        write_json(out / "selection.json", selection)
        logger.info(f"Best {axis}={selection['value']} with {selection['accuracy']:.2f}% accuracy")
        if axis == "steps":
            write_step_curve(out / "step_curve.csv", {f"steps={v}": r.rows for (v, _), r in zip(cells, results)})
        self.loader.save(self.config, str(out / "run_config.json"))
        return rows

    def record_selection(self, selection: Dict[str, Any], config_file: Optional[str], out_file: str) -> Path:
        """Write a copy of ``config_file`` carrying the value a sweep selected.

        The copy starts with a comment naming the sweep it came from.

        Raises:
            RunConfigError: If the axis maps to no single adapt field or the copy fails validation
        """
        axis = selection["axis"]
        if axis not in RECORDABLE_AXES:
            raise RunConfigError(f"axis '{axis}' cannot be recorded; recordable axes: {sorted(RECORDABLE_AXES)}")
        name = RECORDABLE_AXES[axis]
        data = self.loader.read(config_file)
        data.setdefault("adapt", {})[name] = selection["value"]
        errors = self.loader.validator.get_validation_errors(data)
        if errors:
            raise RunConfigError(f"recorded {axis} fails validation: " + "; ".join(errors))

        header = (
            f"# adapt.{name} = {selection['value']} selected by `cli.py ablate --axis {axis}`\n"
            f"# grid {selection['grid']}: {selection['accuracy']:.2f}% accuracy "
            f"(delta {selection['delta']:+.2f}), table {selection.get('table', 'n/a')}\n"
        )
        path = Path(out_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(header + yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        logger.info(f"Recorded adapt.{name}={selection['value']} in {path}")
        return path

    @staticmethod
    def report(run_dirs: Sequence[str], out_dir: str) -> Report:
        report = build_report(run_dirs)
        write_report(report, out_dir)
        return report

    def _log_severity_trend(self, source: StreamResult) -> None:
        by_family: Dict[str, Dict[int, float]] = {}
        accuracy = source.domain_accuracy()
        for domain in self.config.data.domains:
            if domain.corruption:
                by_family.setdefault(domain.corruption, {})[domain.severity] = accuracy.get(domain.name, 0.0)
        for family, levels in by_family.items():
            if len(levels) > 1:
                check_severity_monotonicity(family, levels)
