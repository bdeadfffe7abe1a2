"""CSV emission for reports, optimization traces and benchmark rows.

Every table carries a header row; floats are written with ``repr`` so they
read back exactly, and an infinite PSNR is written as ``inf``.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
import csv
import io
import os
from pathlib import Path

from pydantic import BaseModel

from ovnlm.cube_io import CubeIOError
from ovnlm.metrics import QualityReport
from ovnlm.optimize import OptimizationTrace
from ovnlm.sure import RiskReport


def format_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue()


def write_csv(path: str | os.PathLike[str], header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    target = Path(path)
    try:
        target.write_text(render_csv(header, rows), encoding="utf-8")
    except OSError as exc:
        raise CubeIOError(f"Cannot write CSV file {target}: {exc}") from exc


def model_table(models: Sequence[BaseModel]) -> tuple[list[str], list[list[object]]]:
    """Header and rows for a list of flat pydantic records of one type."""
    if not models:
        return [], []
    header = list(type(models[0]).model_fields)
    rows = [[getattr(model, name) for name in header] for model in models]
    return header, rows


def risk_report_table(report: RiskReport) -> tuple[list[str], list[list[object]]]:
    return (
        ["data", "trace", "divergence", "risk"],
        [[report.data_term, report.trace_term, report.divergence_term, report.risk]],
    )


def quality_report_table(report: QualityReport) -> tuple[list[str], list[list[object]]]:
    header = ["psnr_db", "ssim_mean"] + [f"ssim_band_{i}" for i in range(len(report.ssim_bands))]
    return header, [[report.psnr, report.ssim_mean, *report.ssim_bands]]


def trace_table(trace: OptimizationTrace) -> tuple[list[str], list[list[object]]]:
    if not trace.entries:
        return ["iter", "h", "risk"], []
    bands = int(round(len(trace.entries[0].phi) ** 0.5))
    phi_columns = [f"phi_{i}_{j}" for i in range(bands) for j in range(bands)]
    rows = [[entry.iteration, entry.h, *entry.phi, entry.risk] for entry in trace.entries]
    return ["iter", "h", *phi_columns, "risk"], rows
