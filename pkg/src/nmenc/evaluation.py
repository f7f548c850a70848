"""Pearson-correlation scoring and report aggregation.

Correlations are computed column-wise per parcel with a two-pass
(mean-then-moment) formula. Zero-variance parcels are flagged undefined
and excluded from means; they are never silently zero-filled.
"""

from __future__ import annotations

import csv
import io as _io
import os
from dataclasses import dataclass, field

import numpy as np

from .io import BoldSeries, DataError, atomic_write_bytes, write_bold_file

AGG_LABEL = "__ALL__"


class UndefinedCorrelationError(ValueError):
    """One of the series has zero variance, so Pearson is undefined."""


def pearson(pred, actual) -> float:
    """Pearson correlation between two length-N series (N >= 2)."""
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise DataError("pred and actual must be equal-length 1-D series")
    if p.shape[0] < 2:
        raise DataError("need at least 2 samples")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise DataError("series contain non-finite entries")
    pc = p - p.mean()
    ac = a - a.mean()
    denom = np.linalg.norm(pc) * np.linalg.norm(ac)
    if denom == 0:
        raise UndefinedCorrelationError(
            "at least one series has zero variance"
        )
    rho = float(pc @ ac / denom)
    if abs(rho) > 1 + 1e-12:
        raise AssertionError(f"correlation {rho} outside [-1, 1] tolerance")
    return min(1.0, max(-1.0, rho))


@dataclass(frozen=True)
class ParcelScores:
    """Per-parcel correlations for one (subject, source, model) triple.

    Undefined entries hold NaN in `rho` and False in `defined`.
    """

    rho: np.ndarray
    defined: np.ndarray
    n_samples_used: int
    subject_id: str
    source_id: str
    model_tag: str

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        defined = np.asarray(self.defined, dtype=bool)
        if rho.shape != defined.shape or rho.ndim != 1:
            raise DataError("rho and defined must be equal-length vectors")
        ok = rho[defined]
        if ok.size and np.max(np.abs(ok)) > 1 + 1e-12:
            raise DataError("defined correlations must lie in [-1, 1]")
        rho.flags.writeable = False
        defined.flags.writeable = False
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "defined", defined)

    @property
    def n_parcels(self) -> int:
        return self.rho.shape[0]

    @property
    def n_defined(self) -> int:
        return int(self.defined.sum())

    @property
    def parcel_mean(self) -> float:
        if self.n_defined == 0:
            raise DataError("no defined parcels to average")
        return float(self.rho[self.defined].mean())


def score_parcels(pred, actual, subject_id: str = "sub",
                  source_id: str = "src", model_tag: str = "model") -> ParcelScores:
    """Column-wise Pearson between predicted and actual parcel responses."""
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 2:
        raise DataError("pred and actual must be equal-shape N x P matrices")
    n = p.shape[0]
    if n < 2:
        raise DataError("need at least 2 samples")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise DataError("matrices contain non-finite entries")

    pc = p - p.mean(axis=0)
    ac = a - a.mean(axis=0)
    denom = np.linalg.norm(pc, axis=0) * np.linalg.norm(ac, axis=0)
    defined = denom > 0
    rho = np.full(p.shape[1], np.nan)
    num = np.einsum("ij,ij->j", pc, ac)
    rho[defined] = num[defined] / denom[defined]
    if np.any(np.abs(rho[defined]) > 1 + 1e-12):
        raise AssertionError("correlation outside [-1, 1] tolerance")
    rho[defined] = np.clip(rho[defined], -1.0, 1.0)
    return ParcelScores(
        rho=rho, defined=defined, n_samples_used=n,
        subject_id=subject_id, source_id=source_id, model_tag=model_tag,
    )


@dataclass(frozen=True)
class EvalReport:
    """All per-(subject, source, model) scores plus their unweighted means.

    Aggregate levels, all unweighted:
      by_subject[(subject, model)]  mean over that subject's sources
      by_source[(source, model)]    mean over subjects (a Table-style row)
      grand[model]                  mean of the per-source rows
    """

    entries: tuple
    by_subject: dict = field(default_factory=dict)
    by_source: dict = field(default_factory=dict)
    grand: dict = field(default_factory=dict)


def aggregate(reports) -> EvalReport:
    """Build an EvalReport from a non-empty collection of ParcelScores."""
    entries = tuple(reports)
    if not entries:
        raise DataError("cannot aggregate an empty collection")
    p_set = {e.n_parcels for e in entries}
    if len(p_set) != 1:
        raise DataError(f"inconsistent parcel counts: {sorted(p_set)}")

    def mean_of(keyed):
        groups = {}
        for key, value in keyed:
            groups.setdefault(key, []).append(value)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    by_subject = mean_of(
        ((e.subject_id, e.model_tag), e.parcel_mean) for e in entries
    )
    by_source = mean_of(
        ((e.source_id, e.model_tag), e.parcel_mean) for e in entries
    )
    grand = mean_of(
        (model, value) for (_, model), value in by_source.items()
    )
    return EvalReport(entries=entries, by_subject=by_subject,
                      by_source=by_source, grand=grand)


def _fmt(x: float) -> str:
    return format(x, ".17g")


def export_report(report: EvalReport, out_dir) -> str:
    """Write the report CSV plus one parcel-vector NMEB file per entry.

    Undefined parcels are written as 0.0 in the NMEB vector; their indices
    are listed in a `.undefined.txt` sidecar so downstream renderers can
    mask them. Returns the CSV path.
    """
    if not report.entries:
        raise DataError("refusing to export an empty report")
    os.makedirs(out_dir, exist_ok=True)

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", "source_id", "model_tag",
                     "n_parcels_defined", "n_samples", "mean_rho"])
    for e in report.entries:
        writer.writerow([e.subject_id, e.source_id, e.model_tag,
                         e.n_defined, e.n_samples_used, _fmt(e.parcel_mean)])
    for (subject, model), value in report.by_subject.items():
        writer.writerow([subject, AGG_LABEL, model, "", "", _fmt(value)])
    for (source, model), value in report.by_source.items():
        writer.writerow([AGG_LABEL, source, model, "", "", _fmt(value)])
    for model, value in report.grand.items():
        writer.writerow([AGG_LABEL, AGG_LABEL, model, "", "", _fmt(value)])
    csv_path = os.path.join(out_dir, "report.csv")
    atomic_write_bytes(csv_path, buf.getvalue().encode("utf-8"))

    for e in report.entries:
        vec = np.where(e.defined, e.rho, 0.0)[None, :]
        stem = f"parcels_{e.subject_id}_{e.source_id}_{e.model_tag}"
        series = BoldSeries(tr_seconds=1.0, values=vec,
                            source_id=e.source_id, subject_id=e.subject_id)
        write_bold_file(series, os.path.join(out_dir, stem + ".nmeb"))
        if e.n_defined < e.n_parcels:
            undefined = np.flatnonzero(~e.defined)
            atomic_write_bytes(
                os.path.join(out_dir, stem + ".undefined.txt"),
                ("\n".join(str(i) for i in undefined) + "\n").encode("utf-8"),
            )
    return csv_path
