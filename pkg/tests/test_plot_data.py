"""Tests for services/plot_data.py — budget curves, scatter and summary table."""

import json

import pytest

from services.plot_data import (
    TableRow,
    budget_rows,
    emit_plot_data,
    parse_table,
    read_budget_curves,
    read_scatter,
    render_table,
)


def _payload(eta0=0.9, wb=2.5, bb=6.0, curves=None):
    if curves is None:
        curves = {
            "bp": [{"budget": 100, "d_half": wb}, {"budget": 25, "d_half": wb * 1.3}],
            "blackbox": [{"budget": 500, "d_half": bb * 2}, {"budget": 5000, "d_half": bb}],
        }
    return {
        "eta0": eta0,
        "whitebox": {"curve": {"d_half": wb}},
        "blackbox": {"curve": {"d_half": bb}},
        "budget_curves": curves,
    }


class TestSummaryTable:
    def test_known_row_round_trips(self):
        rows = [TableRow("ResNet50 AdvTrain", 60.8, 2.56, 9.88)]
        text = render_table(rows)
        assert text.splitlines()[1] == "ResNet50 AdvTrain | 60.8 | 2.56 | 9.88"
        assert parse_table(text) == rows

    def test_missing_values_render_as_dash(self):
        rows = [TableRow("m", 50.0, None, 3.25)]
        assert "| - |" in render_table(rows)
        assert parse_table(render_table(rows)) == rows

    def test_from_payload_uses_percent(self):
        assert TableRow.from_payload("m", _payload(eta0=0.9234)).accuracy == 92.3

    def test_parse_rejects_other_text(self):
        with pytest.raises(ValueError, match="header"):
            parse_table("model,eta0\n")


class TestBudgetRows:
    def test_rows_are_sorted_by_budget(self):
        warnings = []
        rows = budget_rows("m", _payload(), warnings)
        assert [(a, b) for _, a, b, _ in rows] == [
            ("blackbox", 500), ("blackbox", 5000), ("bp", 25), ("bp", 100),
        ]
        assert warnings == []

    def test_missing_series_is_warned(self):
        warnings = []
        rows = budget_rows("m", _payload(curves={"bp": [{"budget": 10, "d_half": 1.0}]}), warnings)
        assert [r[1] for r in rows] == ["bp"]
        assert warnings == ["m: no blackbox budget curve, series skipped"]

    def test_partial_fit_failure_is_warned(self):
        curves = {
            "bp": [{"budget": 10, "d_half": None}, {"budget": 20, "d_half": 1.0}],
            "blackbox": [{"budget": 5, "d_half": 3.0}],
        }
        warnings = []
        budget_rows("m", _payload(curves=curves), warnings)
        assert warnings == ["m: bp fit failed at 1 budget(s)"]

    def test_black_box_increase_is_warned(self):
        curves = {
            "bp": [{"budget": 10, "d_half": 1.0}],
            "blackbox": [{"budget": 5, "d_half": 3.0}, {"budget": 10, "d_half": 3.5}],
        }
        warnings = []
        budget_rows("m", _payload(curves=curves), warnings)
        assert any("increases" in w for w in warnings)


class TestEmitPlotData:
    def test_no_reports_writes_headers_only(self, tmp_data_dir):
        manifest = emit_plot_data([], "plots")
        out = tmp_data_dir / "plots"
        assert manifest.files == ["budget_curves.csv", "scatter.csv", "table.txt"]
        assert (out / "budget_curves.csv").read_text() == "model,attack,budget,d_half\n"
        assert (out / "scatter.csv").read_text() == "model,eta0,d_half_wb,d_half_bb\n"
        assert parse_table((out / "table.txt").read_text()) == []
        assert json.loads((out / "manifest.json").read_text()) == {
            "files": ["budget_curves.csv", "scatter.csv", "table.txt"],
            "warnings": [],
        }

    def test_two_models(self, tmp_data_dir):
        reports = [("plain", _payload(0.95, 1.5, 4.0)), ("adv", _payload(0.8, 3.0, 9.0))]
        emit_plot_data(reports, "plots")
        scatter = read_scatter("plots/scatter.csv")
        assert [(r.model, r.d_half_wb, r.d_half_bb) for r in scatter] == [("plain", 1.5, 4.0), ("adv", 3.0, 9.0)]
        curves = read_budget_curves("plots/budget_curves.csv")
        assert len(curves) == 8
        assert curves == sorted(curves)
        table = parse_table((tmp_data_dir / "plots" / "table.txt").read_text())
        assert [r.model for r in table] == ["plain", "adv"]

    def test_failed_fit_skips_scatter_row(self):
        payload = _payload()
        payload["blackbox"]["curve"]["d_half"] = None
        manifest = emit_plot_data([("broken", payload), ("ok", _payload())], "plots")
        assert [r.model for r in read_scatter("plots/scatter.csv")] == ["ok"]
        assert "broken: missing a half-distortion, scatter row skipped" in manifest.warnings
