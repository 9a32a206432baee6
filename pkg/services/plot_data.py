"""
plot_data.py — CSV series for plotting, from one or more reports.

  budget_curves.csv   model,attack,budget,d_half      D½ against the attack budget
  scatter.csv         model,eta0,d_half_wb,d_half_bb  black-box against white-box D½
  table.txt           the same numbers as a model | accuracy | D½ table
  manifest.json       files written and series skipped

Series with no data (no budget curve in the report, or a failed fit) are
skipped and listed under "warnings" in the manifest.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from services import local_store

logger = logging.getLogger(__name__)

BUDGET_COLUMNS = ("model", "attack", "budget", "d_half")
SCATTER_COLUMNS = ("model", "eta0", "d_half_wb", "d_half_bb")
TABLE_HEADER = ("model", "accuracy", "white-box D½", "black-box D½")

# Attacks whose budget curves are expected in every report.
_EXPECTED_SERIES = ("bp", "blackbox")


@dataclass(frozen=True)
class ScatterRow:
    model: str
    eta0: float
    d_half_wb: float
    d_half_bb: float

    @classmethod
    def from_payload(cls, model: str, payload: dict) -> ScatterRow | None:
        wb = payload["whitebox"]["curve"]["d_half"]
        bb = payload["blackbox"]["curve"]["d_half"]
        if wb is None or bb is None:
            return None
        return cls(model, payload["eta0"], wb, bb)


@dataclass(frozen=True)
class TableRow:
    """One model in the summary table; accuracy in percent."""
    model: str
    accuracy: float
    d_half_wb: float | None
    d_half_bb: float | None

    @classmethod
    def from_payload(cls, model: str, payload: dict) -> TableRow:
        return cls(
            model,
            round(100.0 * payload["eta0"], 1),
            payload["whitebox"]["curve"]["d_half"],
            payload["blackbox"]["curve"]["d_half"],
        )


@dataclass
class PlotManifest:
    files: list[str]
    warnings: list[str]

    def to_dict(self) -> dict:
        return {"files": self.files, "warnings": self.warnings}


# ---------------------------------------------------------------------------
# Summary table
# ---------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def _unfmt(text: str) -> float | None:
    return None if text == "-" else float(text)


def render_table(rows: Sequence[TableRow]) -> str:
    lines = [" | ".join(TABLE_HEADER)]
    for r in rows:
        lines.append(" | ".join((r.model, f"{r.accuracy:.1f}", _fmt(r.d_half_wb), _fmt(r.d_half_bb))))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[TableRow]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or tuple(c.strip() for c in lines[0].split("|")) != TABLE_HEADER:
        raise ValueError("not a summary table: header missing")
    rows = []
    for line in lines[1:]:
        cells = [c.strip() for c in line.rsplit("|", 3)]
        if len(cells) != 4:
            raise ValueError(f"malformed table row {line!r}")
        model, acc, wb, bb = cells
        rows.append(TableRow(model, float(acc), _unfmt(wb), _unfmt(bb)))
    return rows


# ---------------------------------------------------------------------------
# Emit
# ---------------------------------------------------------------------------

def budget_rows(model: str, payload: dict, warnings: list[str]) -> list[tuple[str, str, int, float]]:
    curves = payload.get("budget_curves", {})
    rows = []
    for attack in sorted(set(_EXPECTED_SERIES) | set(curves)):
        series = curves.get(attack) or []
        points = [(p["budget"], p["d_half"]) for p in series if p["d_half"] is not None]
        if not points:
            warnings.append(f"{model}: no {attack} budget curve, series skipped")
            continue
        if len(points) < len(series):
            warnings.append(f"{model}: {attack} fit failed at {len(series) - len(points)} budget(s)")
        points.sort()
        if attack == "blackbox" and any(b[1] > a[1] for a, b in zip(points, points[1:])):
            warnings.append(f"{model}: blackbox D½ increases with the budget somewhere")
        rows.extend((model, attack, budget, d_half) for budget, d_half in points)
    return rows


def emit_plot_data(reports: Sequence[tuple[str, dict]], out_dir: Path | str) -> PlotManifest:
    """
    reports: (model label, report payload) pairs.  An empty list still
    writes every file, with headers only.
    """
    warnings: list[str] = []
    budget: list[tuple[str, str, int, float]] = []
    scatter: list[ScatterRow] = []
    table: list[TableRow] = []
    for model, payload in reports:
        budget.extend(budget_rows(model, payload, warnings))
        row = ScatterRow.from_payload(model, payload)
        if row is None:
            warnings.append(f"{model}: missing a half-distortion, scatter row skipped")
        else:
            scatter.append(row)
        table.append(TableRow.from_payload(model, payload))

    out = local_store.resolve(out_dir)
    files = [
        local_store.write_table(out / "budget_curves.csv", BUDGET_COLUMNS, sorted(budget)),
        local_store.write_table(
            out / "scatter.csv",
            SCATTER_COLUMNS,
            ((r.model, repr(r.eta0), repr(r.d_half_wb), repr(r.d_half_bb)) for r in scatter),
        ),
        local_store.save_text(out / "table.txt", render_table(table)),
    ]
    for w in warnings:
        logger.warning(w)
    manifest = PlotManifest(files=[f.name for f in files], warnings=warnings)
    local_store.save_json(out / "manifest.json", manifest.to_dict())
    return manifest


def read_scatter(path: Path | str) -> list[ScatterRow]:
    return [
        ScatterRow(r["model"], float(r["eta0"]), float(r["d_half_wb"]), float(r["d_half_bb"]))
        for r in local_store.read_table(path, SCATTER_COLUMNS)
    ]


def read_budget_curves(path: Path | str) -> list[tuple[str, str, int, float]]:
    return [
        (r["model"], r["attack"], int(r["budget"]), float(r["d_half"]))
        for r in local_store.read_table(path, BUDGET_COLUMNS)
    ]
