"""Confusion matrices, per-class and aggregate metrics, income-binned
misclassification analysis, and deterministic report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import N_CLASSES, PersonRecord, RaceClass, TractRecord
from .errors import EmptyInput, InvariantError, LengthMismatch, UnsortedBinEdges


@dataclass
class ConfusionMatrix:
    """5x5 counts: rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise InvariantError(f"confusion matrix must be 5x5, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise InvariantError("confusion matrix counts must be non-negative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    fpr: float


@dataclass
class MetricsReport:
    accuracy: float
    per_class: dict[str, ClassMetrics]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    macro_fpr: float
    weighted_fpr: float
    n: int


@dataclass(frozen=True)
class IncomeBiasCell:
    bin_low: float  # -inf for the open bottom bin
    bin_high: float  # +inf for the open top bin
    race: RaceClass
    rate: float
    n: int


@dataclass
class IncomeBiasTable:
    bin_edges: tuple[float, ...]
    cells: list[IncomeBiasCell]
    unknown_cells: list[IncomeBiasCell] = field(default_factory=list)  # records without a tract


def confusion(preds: Sequence[RaceClass], labels: Sequence[RaceClass]) -> ConfusionMatrix:
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if len(preds) == 0:
        raise EmptyInput("confusion matrix needs at least one pair")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for p, t in zip(preds, labels):
        counts[int(t), int(p)] += 1
    return ConfusionMatrix(counts)


def class_metrics(cm: ConfusionMatrix, race: RaceClass) -> ClassMetrics:
    """Precision/recall/F1/FPR for one class; zero denominators yield 0."""
    c = int(race)
    m = cm.counts
    tp = m[c, c]
    fp = m[:, c].sum() - tp
    fn = m[c, :].sum() - tp
    tn = cm.n - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    fpr = fp / (fp + tn) if fp + tn > 0 else 0.0
    return ClassMetrics(float(precision), float(recall), float(f1), float(fpr))


def aggregate_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus prevalence-weighted and macro aggregates.

    Weighting by true-class prevalence makes weighted recall identical to
    accuracy. FPR is aggregated both ways (macro and prevalence-weighted)
    since either convention appears in practice.
    """
    if cm.n < 1:
        raise EmptyInput("empty confusion matrix")
    per_class = {race.canonical(): class_metrics(cm, race) for race in RaceClass}
    prevalence = cm.counts.sum(axis=1) / cm.n
    mets = [per_class[r.canonical()] for r in RaceClass]
    accuracy = float(np.trace(cm.counts)) / cm.n
    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        weighted_precision=float(sum(p * m.precision for p, m in zip(prevalence, mets))),
        weighted_recall=float(sum(p * m.recall for p, m in zip(prevalence, mets))),
        weighted_f1=float(sum(p * m.f1 for p, m in zip(prevalence, mets))),
        macro_fpr=float(np.mean([m.fpr for m in mets])),
        weighted_fpr=float(sum(p * m.fpr for p, m in zip(prevalence, mets))),
        n=cm.n,
    )


def default_income_bin_edges(tract_table: Mapping[str, TractRecord], n_bins: int = 10) -> list[float]:
    """Equal-population edges (deciles by default) over tract median incomes."""
    incomes = np.sort(np.array([t.median_income for t in tract_table.values()]))
    if incomes.size == 0:
        return []
    qs = np.quantile(incomes, np.linspace(0, 1, n_bins + 1)[1:-1])
    edges = sorted(set(float(q) for q in qs))
    return edges


def income_bias_table(
    records: Sequence[tuple[PersonRecord, RaceClass]],
    tract_table: Mapping[str, TractRecord],
    bin_edges: Sequence[float],
) -> IncomeBiasTable:
    """Misclassification rate per (tract income bin, true class).

    Bins are (-inf, e1), [e1, e2), ..., [ek, +inf); records with a missing or
    unknown tract land in a separate unknown bin.
    """
    edges = [float(e) for e in bin_edges]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise UnsortedBinEdges(f"bin edges must be strictly increasing: {edges}")
    for r, _ in records:
        if r.label is None:
            raise InvariantError(f"row {r.row_id}: income bias analysis requires labels")
    n_bins = len(edges) + 1
    totals = np.zeros((n_bins, N_CLASSES), dtype=np.int64)
    wrong = np.zeros((n_bins, N_CLASSES), dtype=np.int64)
    unk_totals = np.zeros(N_CLASSES, dtype=np.int64)
    unk_wrong = np.zeros(N_CLASSES, dtype=np.int64)
    any_unknown = False
    for rec, pred in records:
        tract = tract_table.get(rec.tract_geoid) if rec.tract_geoid else None
        miss = int(pred != rec.label)
        if tract is None:
            any_unknown = True
            unk_totals[int(rec.label)] += 1
            unk_wrong[int(rec.label)] += miss
            continue
        b = int(np.searchsorted(edges, tract.median_income, side="right"))
        totals[b, int(rec.label)] += 1
        wrong[b, int(rec.label)] += miss
    bounds = [-np.inf, *edges, np.inf]
    cells = []
    for b in range(n_bins):
        for race in RaceClass:
            nt = int(totals[b, int(race)])
            rate = wrong[b, int(race)] / nt if nt > 0 else 0.0
            cells.append(IncomeBiasCell(bounds[b], bounds[b + 1], race, float(rate), nt))
    unknown_cells = []
    if any_unknown:
        for race in RaceClass:
            nt = int(unk_totals[int(race)])
            rate = unk_wrong[int(race)] / nt if nt > 0 else 0.0
            unknown_cells.append(IncomeBiasCell(np.nan, np.nan, race, float(rate), nt))
    return IncomeBiasTable(bin_edges=tuple(edges), cells=cells, unknown_cells=unknown_cells)


@dataclass
class ModelEvalReport:
    """Everything evaluated for one named prediction set."""

    confusion_matrix: ConfusionMatrix
    metrics: MetricsReport
    income_bias: IncomeBiasTable | None = None


def _metrics_as_dict(rep: MetricsReport) -> dict:
    return {
        "accuracy": rep.accuracy,
        "weighted_precision": rep.weighted_precision,
        "weighted_recall": rep.weighted_recall,
        "weighted_f1": rep.weighted_f1,
        "macro_fpr": rep.macro_fpr,
        "weighted_fpr": rep.weighted_fpr,
        "n": rep.n,
        "per_class": {
            name: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "fpr": m.fpr}
            for name, m in rep.per_class.items()
        },
    }


def emit_report(
    reports: Mapping[str, ModelEvalReport],
    out_dir: str | Path,
    dataset_fingerprint: Mapping[str, object] | None = None,
    config_hashes: Mapping[str, str] | None = None,
    artifact_version: str = "0.1.0",
) -> list[Path]:
    """Write one JSON document plus per-model flat CSVs. Deterministic bytes
    for identical inputs (models ordered by name, no timestamps)."""
    if not reports:
        raise EmptyInput("emit_report needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    doc = {
        "artifact_version": artifact_version,
        "zero_denominator_convention": "precision/recall/f1/fpr are 0 when undefined",
        "dataset_fingerprint": dict(dataset_fingerprint or {}),
        "config_hashes": dict(config_hashes or {}),
        "models": {name: _metrics_as_dict(rep.metrics) for name, rep in sorted(reports.items())},
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(report_path)
    for name in sorted(reports):
        rep = reports[name]
        cm_path = out / f"{name}_confusion.csv"
        with open(cm_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["true_class", *[r.canonical() for r in RaceClass]])
            for race in RaceClass:
                writer.writerow([race.canonical(), *rep.confusion_matrix.counts[int(race)].tolist()])
        written.append(cm_path)
        cls_path = out / f"{name}_class_metrics.csv"
        with open(cls_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["race", "precision", "recall", "f1", "fpr"])
            for race in RaceClass:
                m = rep.metrics.per_class[race.canonical()]
                writer.writerow([race.canonical(), repr(m.precision), repr(m.recall), repr(m.f1), repr(m.fpr)])
        written.append(cls_path)
        bias_path = out / f"{name}_income_bias.csv"
        with open(bias_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["bin_low", "bin_high", "race", "rate", "n"])
            if rep.income_bias is not None:
                for cell in rep.income_bias.cells:
                    writer.writerow([repr(cell.bin_low), repr(cell.bin_high), cell.race.canonical(), repr(cell.rate), cell.n])
                for cell in rep.income_bias.unknown_cells:
                    writer.writerow(["", "", cell.race.canonical(), repr(cell.rate), cell.n])
        written.append(bias_path)
    return written
