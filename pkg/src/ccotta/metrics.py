"""Evaluation metrics and feature-space diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def error_rate(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if len(y) == 0:
        raise ValueError("no samples")
    return float(np.mean(p != y))


def confusion(predictions, labels, num_classes: int) -> np.ndarray:
    """Counts with true labels on rows and predictions on columns."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return m


def inter_class_distance(prototypes, present=None) -> tuple[float, int]:
    """Sum of squared distances over ordered pairs of present prototypes.

    Returns ``(d_ic, pair_count)``.  Absent classes may be marked by
    ``present=False`` or by NaN rows.
    """
    p = np.asarray(prototypes, dtype=np.float64)
    if present is None:
        present = ~np.any(np.isnan(p), axis=1)
    p = p[np.asarray(present, dtype=bool)]
    k = len(p)
    if k < 2:
        return 0.0, 0
    diff = p[:, None, :] - p[None, :, :]
    return float(np.sum(diff * diff)), k * (k - 1)


def inter_domain_distance(source_prototype, target_prototype) -> float:
    d = np.asarray(source_prototype, dtype=np.float64) - np.asarray(target_prototype, dtype=np.float64)
    return float(d @ d)


def export_embedding(features, labels=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Project features onto their top two principal axes.

    Returns ``(coords N x 2, labels)``.  Axis signs are fixed so the loading
    with the largest magnitude is positive.
    """
    f = np.asarray(features, dtype=np.float64)
    centered = f - f.mean(axis=0)
    cov = centered.T @ centered / max(len(f) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    if top.shape[1] < 2:
        top = np.hstack([top, np.zeros((f.shape[1], 2 - top.shape[1]))])
    signs = np.sign(top[np.argmax(np.abs(top), axis=0), [0, 1]])
    top = top * np.where(signs == 0, 1.0, signs)
    return centered @ top, (None if labels is None else np.asarray(labels))


def embedding_csv(coords, labels, stage) -> str:
    """CSV rows ``x, y, label, stage``; ``stage`` is one value or one per row."""
    stages = np.broadcast_to(np.asarray(stage), (len(coords),))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label", "stage"])
    for (x, y), lab, s in zip(coords, labels, stages):
        w.writerow([repr(float(x)), repr(float(y)), int(lab), s.item()])
    return buf.getvalue()


@dataclass
class MetricsRecord:
    stage_index: int
    corruption: str
    severity: int
    error: float
    d_ic: float
    d_ic_pairs: int
    d_id: float
    kept_fraction: float
    confusion: list = field(default_factory=list)

    CSV_FIELDS = ("stage_index", "corruption", "severity", "error", "d_ic", "d_ic_pairs",
                  "d_id", "kept_fraction")


def stage_record(stage_index: int, corruption: str, severity: int, predictions, labels,
                 features, source_domain, num_classes: int, kept_fraction: float) -> MetricsRecord:
    """Aggregate one stage: error, confusion, and prototype distances.

    Class prototypes for ``d_ic`` group the given features by true label.
    """
    y = np.asarray(labels)
    z = np.asarray(features)
    protos = np.full((num_classes, z.shape[1]), np.nan)
    for c in range(num_classes):
        if np.any(y == c):
            protos[c] = z[y == c].mean(axis=0)
    d_ic, pairs = inter_class_distance(protos)
    return MetricsRecord(
        stage_index, corruption, int(severity), error_rate(predictions, y), d_ic, pairs,
        inter_domain_distance(source_domain, z.mean(axis=0)), float(kept_fraction),
        confusion(predictions, y, num_classes).tolist())


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def records_csv(records, extra: dict | None = None) -> str:
    """One row per stage; floats written with ``repr`` so output is bit-stable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow([*extra, *MetricsRecord.CSV_FIELDS])
    for r in records:
        w.writerow([*map(_fmt, extra.values()), *(_fmt(getattr(r, f)) for f in MetricsRecord.CSV_FIELDS)])
    return buf.getvalue()


def records_json(records) -> str:
    return json.dumps([asdict(r) for r in records], indent=1)


def mean_error(records) -> float:
    return float(np.mean([r.error for r in records])) if records else float("nan")
