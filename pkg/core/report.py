"""Consolidated comparison of adaptation runs against their source baselines."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateError

from core.container import ContainerIOError, PathLike
from core.metrics_io import read_json, write_rows

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
TEMPLATES_DIR = Path(__file__).parent.parent / "templates"
REPORT_TEMPLATE = "report.txt.j2"
REPORT_COLUMNS = (
    "group", "run", "method", "prompt_kind", "source_acc", "adapted_acc",
    "delta", "source_error", "adapted_error", "regression",
)


class ReportError(Exception):
    """Exception raised when a report cannot be built or rendered."""
    pass


@dataclass
class ReportRow:
    group: str
    run: str
    method: str
    prompt_kind: str
    source_acc: float
    adapted_acc: float
    delta: float
    source_error: float
    adapted_error: float
    regression: bool


@dataclass
class Report:
    groups: Dict[str, List[ReportRow]] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    @property
    def rows(self) -> List[ReportRow]:
        return [row for group in self.groups.values() for row in group]


def row_from_summary(run: str, summary: Dict) -> ReportRow:
    """Comparison row for one run summary; delta is recomputed from the accuracies."""
    try:
        source_acc = float(summary["source_acc"])
        adapted_acc = float(summary["adapted_acc"])
        adapted = summary["adapted"]
        regime, lifecycle = adapted["regime"], adapted["lifecycle"]
    except (KeyError, TypeError, ValueError) as e:
        raise ReportError(f"summary of {run} is missing field {e}")
    delta = adapted_acc - source_acc
    return ReportRow(
        group=f"{regime}/{lifecycle}",
        run=run,
        method=adapted.get("method", "unknown"),
        prompt_kind=summary.get("prompt_kind", ""),
        source_acc=source_acc,
        adapted_acc=adapted_acc,
        delta=delta,
        source_error=100.0 - source_acc,
        adapted_error=100.0 - adapted_acc,
        regression=delta < 0,
    )


def build_report(run_dirs: Sequence[PathLike]) -> Report:
    """Join run summaries, grouped by regime/lifecycle.

    Runs without a readable summary are listed in ``skipped`` with a warning.

    Raises:
        ReportError: If no run directory is given
    """
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    report = Report()
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        summary_path = run_dir / SUMMARY_FILE
        if not summary_path.is_file():
            logger.warning(f"Skipping {run_dir}: no {SUMMARY_FILE}")
            report.skipped.append(str(run_dir))
            continue
        try:
            row = row_from_summary(run_dir.name, read_json(summary_path))
        except (ReportError, ContainerIOError, ValueError) as e:
            logger.warning(f"Skipping {run_dir}: {e}")
            report.skipped.append(str(run_dir))
            continue
        report.groups.setdefault(row.group, []).append(row)
    return report


def render_report(report: Report, template_dir: Optional[PathLike] = None) -> str:
    """Plain-text table rendered from the Jinja2 template."""
    env = Environment(
        loader=FileSystemLoader(str(template_dir or TEMPLATES_DIR)),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    try:
        template = env.get_template(REPORT_TEMPLATE)
        return template.render(groups=report.groups, skipped=report.skipped)
    except TemplateError as e:
        raise ReportError(f"cannot render report: {e}")


def write_report(report: Report, out_dir: PathLike, template_dir: Optional[PathLike] = None) -> Dict[str, Path]:
    """Write ``report.csv`` and ``report.txt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_rows(out_dir / "report.csv", (asdict(r) for r in report.rows), REPORT_COLUMNS)
    text = render_report(report, template_dir)
    txt_path = out_dir / "report.txt"
    try:
        txt_path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ContainerIOError(f"cannot write {txt_path}: {e}")
    return {"csv": csv_path, "text": txt_path}
