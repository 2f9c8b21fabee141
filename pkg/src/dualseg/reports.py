"""Comma-separated report tables (LF endings, 6 significant digits)."""
from __future__ import annotations

from typing import Sequence

from .evaluation import METRICS, CohortSummary, CrossEvalMatrix, PatientLevelResult, mean_sd
from .training import TrainReport


def fmt(x: float) -> str:
    return f"{x:.6g}"


def quantize(x: float) -> float:
    """The value a reader of the emitted table sees."""
    return float(fmt(x))


def quantized_summary(result: PatientLevelResult) -> dict[str, CohortSummary]:
    """Mean +- SD recomputed from the per-patient values as printed, so the
    summary row always re-aggregates exactly from the rows above it."""
    return {m: mean_sd([quantize(p.get(m)) for p in result.patients], m) for m in METRICS}


def patient_table(result: PatientLevelResult) -> str:
    lines = ["patient_id," + ",".join(METRICS) + ",predicted_voxels,gt_voxels"]
    for p in result.patients:
        vals = ",".join(fmt(p.get(m)) for m in METRICS)
        lines.append(f"{p.patient_id},{vals},{p.predicted_voxels},{p.gt_voxels}")
    summary = quantized_summary(result)
    lines.append("mean±sd," + ",".join(summary[m].formatted() for m in METRICS) + ",,")
    return "\n".join(lines) + "\n"


def summary_table(rows: Sequence[tuple[str, str, PatientLevelResult]]) -> str:
    """One line per (model, gt) pair: metric means and SDs."""
    head = ["model", "gt", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
    lines = [",".join(head)]
    for model, gt, result in rows:
        summary = quantized_summary(result)
        cells = [model, gt, str(len(result.patients))]
        for m in METRICS:
            cells += [fmt(summary[m].mean), fmt(summary[m].sd)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cross_eval_table(matrix: CrossEvalMatrix) -> str:
    lines = ["model,GT_A,GT_B"]
    for m in ("A", "B"):
        cells = [quantized_summary(matrix.cells[(m, g)])["dsc"].formatted() for g in ("A", "B")]
        lines.append(f"Model{m}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def kappa_csv(rows: Sequence[tuple[str, float]]) -> str:
    lines = ["patient_id,kappa_label_a_vs_label_b"]
    lines += [f"{pid},{fmt(k)}" for pid, k in rows]
    return "\n".join(lines) + "\n"


def train_report_csv(report: TrainReport) -> str:
    return report.to_csv()
