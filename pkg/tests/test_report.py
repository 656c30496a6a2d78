"""Tests for the consolidated run report."""

import json

import pytest

from core.report import ReportError, build_report, render_report, row_from_summary, write_report


def summary(source_acc, adapted_acc, regime="bia", lifecycle="episodic", method="vpa-prependitive"):
    return {
        "source_acc": source_acc,
        "adapted_acc": adapted_acc,
        "delta": 99.0,
        "prompt_kind": "prependitive",
        "adapted": {"method": method, "regime": regime, "lifecycle": lifecycle},
    }


def write_run(root, name, payload):
    run = root / name
    run.mkdir()
    (run / "summary.json").write_text(json.dumps(payload))
    return run


class TestReport:
    """Grouping, deltas and rendering."""

    def test_delta_is_recomputed(self):
        """Test the delta comes from the accuracies, not the stored field."""
        row = row_from_summary("run", summary(60.0, 65.5))
        assert row.delta == pytest.approx(5.5)
        assert row.source_error == pytest.approx(40.0)
        assert not row.regression

    def test_missing_field(self):
        """Test a summary without accuracies raises ReportError."""
        with pytest.raises(ReportError):
            row_from_summary("run", {"adapted": {}})

    def test_grouping_and_skips(self, tmp_path):
        """Test runs are grouped by regime/lifecycle and unreadable runs are skipped."""
        a = write_run(tmp_path, "a", summary(50.0, 55.0))
        b = write_run(tmp_path, "b", summary(50.0, 45.0, regime="pla", lifecycle="continual"))
        missing = tmp_path / "missing"
        missing.mkdir()
        report = build_report([a, b, missing])
        assert set(report.groups) == {"bia/episodic", "pla/continual"}
        assert report.skipped == [str(missing)]
        assert report.groups["pla/continual"][0].regression

    def test_no_runs(self):
        """Test an empty run list is rejected."""
        with pytest.raises(ReportError):
            build_report([])

    def test_render_flags_regressions(self, tmp_path):
        """Test the text table lists both rows and flags regressions."""
        run = write_run(tmp_path, "worse", summary(70.0, 60.0))
        text = render_report(build_report([run]))
        assert "[bia/episodic]" in text
        assert "source" in text
        assert "REGRESSION" in text
        assert "-10.00" in text

    def test_write_report(self, tmp_path):
        """Test both report files are written."""
        run = write_run(tmp_path, "good", summary(40.0, 50.0))
        paths = write_report(build_report([run]), tmp_path / "out")
        assert paths["csv"].read_text().startswith("group,run,method")
        assert "good" in paths["text"].read_text()
