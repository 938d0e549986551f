"""Evaluation report export to Markdown, CSV and DOCX.

All formats share one column layout: the fixed category order below for
categories present in any report, then remaining categories
alphabetically, then Overall. Accuracies are percentages with two decimals.
"""

import csv
import io
from pathlib import Path
from typing import Literal

from docx import Document
from docx.shared import Pt

from app.logger import logger
from app.pipeline.records import EvalReport

CATEGORY_ORDER = (
    "Composition",
    "Equipments",
    "Contrast",
    "Techniques",
    "Color and Tone",
    "Lighting",
    "Exposure",
    "Post-Processing",
    "Aperture and Focus",
    "Storytelling",
    "Sharpness and Clarity",
)
OVERALL = "Overall"
MISSING = "-"
CSV_COLUMNS = ["model", "benchmark", "kind", "category", "correct", "total", "accuracy_pct", "unparsed", "skipped"]

ReportFormat = Literal["md", "csv"]


def report_columns(reports: list[EvalReport]) -> list[str]:
    """Category columns shared by ``reports``, Overall last."""
    present = {topic for report in reports for topic in report.per_topic_total}
    fixed = [name for name in CATEGORY_ORDER if name in present]
    extra = sorted(present - set(CATEGORY_ORDER))
    return fixed + extra + [OVERALL]


def percent(value: float) -> str:
    """Accuracy in [0, 1] as a percentage with two decimals."""
    return f"{value * 100:.2f}"


def _row(report: EvalReport, columns: list[str]) -> list[str]:
    accuracies = report.per_topic_accuracy
    cells = []
    for column in columns:
        if column == OVERALL:
            cells.append(percent(report.overall_accuracy))
        elif column in accuracies:
            cells.append(percent(accuracies[column]))
        else:
            cells.append(MISSING)
    return cells


def render_markdown(reports: list[EvalReport]) -> str:
    """One table row per model."""
    columns = report_columns(reports)
    lines = [
        "| Model | " + " | ".join(columns) + " |",
        "|" + "---|" * (len(columns) + 1),
    ]
    for report in reports:
        lines.append(f"| {report.model_name} | " + " | ".join(_row(report, columns)) + " |")
    return "\n".join(lines) + "\n"


def render_csv(reports: list[EvalReport]) -> str:
    """Long-format CSV: one overall row and one row per topic for each report."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        writer.writerow(
            [
                report.model_name,
                report.benchmark_id,
                "overall",
                OVERALL,
                report.overall_correct,
                report.overall_total,
                percent(report.overall_accuracy),
                report.unparsed_count,
                report.skipped_count,
            ]
        )
        for topic in report_columns([report])[:-1]:
            writer.writerow(
                [
                    report.model_name,
                    report.benchmark_id,
                    "topic",
                    topic,
                    report.per_topic_correct[topic],
                    report.per_topic_total[topic],
                    percent(report.per_topic_accuracy[topic]),
                    "",
                    "",
                ]
            )
    return buffer.getvalue()


def parse_report_csv(text: str) -> list[EvalReport]:
    """Rebuild EvalReports from ``render_csv`` output.

    Raises:
        ValueError: If a topic row precedes its report's overall row
    """
    reports: dict[tuple[str, str], dict] = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (row["model"], row["benchmark"])
        if row["kind"] == "overall":
            reports[key] = {
                "model_name": row["model"],
                "benchmark_id": row["benchmark"],
                "overall_correct": int(row["correct"]),
                "overall_total": int(row["total"]),
                "unparsed_count": int(row["unparsed"]),
                "skipped_count": int(row["skipped"]),
                "per_topic_correct": {},
                "per_topic_total": {},
            }
        elif row["kind"] == "topic":
            if key not in reports:
                raise ValueError(f"Topic row for {key} before its overall row")
            reports[key]["per_topic_correct"][row["category"]] = int(row["correct"])
            reports[key]["per_topic_total"][row["category"]] = int(row["total"])
        else:
            raise ValueError(f"Unknown report row kind {row['kind']!r}")
    return [EvalReport.model_validate(data) for data in reports.values()]


def render_reports(reports: list[EvalReport], fmt: ReportFormat = "md") -> str:
    """Render several reports as one comparison table.

    Raises:
        ValueError: For an unknown format or an empty report list
    """
    if not reports:
        raise ValueError("No reports to render")
    if fmt == "md":
        return render_markdown(reports)
    if fmt == "csv":
        return render_csv(reports)
    raise ValueError(f"Unknown report format {fmt!r}; docx goes through export_reports_docx")


def render_report(report: EvalReport, fmt: ReportFormat = "md") -> str:
    """Render a single report."""
    return render_reports([report], fmt)


def export_reports_docx(output_path: str | Path, reports: list[EvalReport], title: str = "Evaluation Report") -> Path:
    """Export the comparison table plus per-model counts to a DOCX file.

    Args:
        output_path: Path to output DOCX file
        reports: Reports to include
        title: Document title

    Returns:
        Path of the written file
    """
    if not reports:
        raise ValueError("No reports to export")
    doc = Document()

    style = doc.styles['Normal']
    style.font.name = 'Arial'
    style.font.size = Pt(10)

    doc.add_heading(title, level=0)
    benchmarks = sorted({r.benchmark_id for r in reports})
    doc.add_paragraph(f"Benchmark: {', '.join(benchmarks)}")

    columns = report_columns(reports)
    table = doc.add_table(rows=1, cols=len(columns) + 1)
    table.style = 'Light Grid Accent 1'
    header = table.rows[0].cells
    header[0].text = 'Model'
    for cell, column in zip(header[1:], columns):
        cell.text = column
    for report in reports:
        cells = table.add_row().cells
        cells[0].text = report.model_name
        for cell, value in zip(cells[1:], _row(report, columns)):
            cell.text = value

    doc.add_heading('Counts', level=1)
    for report in reports:
        doc.add_paragraph(
            f"{report.model_name}: {report.overall_correct}/{report.overall_total} correct, "
            f"{report.unparsed_count} unparsed, {report.skipped_count} skipped"
        )

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    doc.save(output_path)
    logger.info(f"Wrote DOCX report {output_path}")
    return output_path
