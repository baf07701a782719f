"""Set-based evaluation metrics averaged over visits."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

COLUMNS = ("jaccard", "f1", "prauc", "precision", "recall", "ddi_rate", "avg_med_count")
COLUMN_TITLES = ("Jaccard", "F1", "PRAUC", "Precision", "Recall", "DDI", "Avg. # of Med.")


def _mean(values) -> float:
    # correctly rounded sum, so results do not depend on summation order
    return math.fsum(values) / len(values)


def _check_aligned(Y, Y_hat):
    if len(Y) != len(Y_hat):
        raise ValueError(f"{len(Y)} truth sets but {len(Y_hat)} predictions")


def jaccard_metric(Y: Sequence[Iterable], Y_hat: Sequence[Iterable]) -> float:
    """Mean per-visit |Y & Y_hat| / |Y | Y_hat|; a visit with both sets empty scores 1."""
    _check_aligned(Y, Y_hat)
    if not Y:
        return 0.0
    scores = []
    for y, p in zip(Y, Y_hat):
        y, p = set(y), set(p)
        union = len(y | p)
        scores.append(len(y & p) / union if union else 1.0)
    return _mean(scores)


def macro_prf(Y, Y_hat) -> tuple[float, float, float]:
    """Visit-averaged precision, recall and F1 (empty denominators give 0)."""
    _check_aligned(Y, Y_hat)
    if not Y:
        return 0.0, 0.0, 0.0
    P, R, F = [], [], []
    for y, p in zip(Y, Y_hat):
        y, p = set(y), set(p)
        inter = len(y & p)
        prec = inter / len(p) if p else 0.0
        rec = inter / len(y) if y else 0.0
        P.append(prec)
        R.append(rec)
        F.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return _mean(P), _mean(R), _mean(F)


def average_precision(scores, labels) -> float:
    """Step-sum sum_k P(k) * (R(k) - R(k-1)) over distinct score thresholds, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * delta))


def pr_auc(scores, targets) -> tuple[float, int]:
    """Mean per-visit average precision; returns (value, visits skipped for having no positives)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets))
    if scores.shape != targets.shape:
        raise ValueError("score and target matrices differ in shape")
    values, skipped = [], 0
    for s, y in zip(scores, targets):
        if not np.any(y):
            skipped += 1
            continue
        values.append(average_precision(s, y))
    return (_mean(values) if values else 0.0), skipped


def ddi_rate(Y_hat: Sequence[Iterable[int]], ddi_matrix) -> float:
    """Share of predicted unordered drug pairs (within a visit) that interact."""
    A = np.asarray(ddi_matrix)
    hits = total = 0
    for p in Y_hat:
        idx = sorted(p)
        if idx and (idx[0] < 0 or idx[-1] >= A.shape[0]):
            raise KeyError(f"medication index outside the DDI matrix: {idx}")
        for i, j in combinations(idx, 2):
            total += 1
            hits += int(A[i, j] != 0)
    return hits / total if total else 0.0


def avg_med_count(Y_hat: Sequence[Iterable]) -> float:
    return _mean([len(set(p)) for p in Y_hat]) if len(Y_hat) else 0.0


@dataclass(frozen=True)
class MetricsReport:
    jaccard: float
    f1: float
    prauc: float
    precision: float
    recall: float
    ddi_rate: float
    avg_med_count: float
    visit_count: int
    prauc_skipped: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def compute_report(Y, Y_hat, scores, targets, ddi_matrix) -> MetricsReport:
    p, r, f = macro_prf(Y, Y_hat)
    auc, skipped = pr_auc(scores, targets)
    return MetricsReport(
        jaccard=jaccard_metric(Y, Y_hat), f1=f, prauc=auc, precision=p, recall=r,
        ddi_rate=ddi_rate(Y_hat, ddi_matrix), avg_med_count=avg_med_count(Y_hat),
        visit_count=len(Y), prauc_skipped=skipped,
    )


def format_table(rows: dict[str, dict], digits: int = 4) -> str:
    """Markdown table, one row per label, with the standard metric columns."""
    header = "| Model | " + " | ".join(COLUMN_TITLES) + " |"
    sep = "|" + "---|" * (len(COLUMNS) + 1)
    lines = [header, sep]
    for label, rep in rows.items():
        cells = [f"{rep[c]:.{digits}f}" if c != "avg_med_count" else f"{rep[c]:.2f}" for c in COLUMNS]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def format_csv(rows: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *COLUMNS])
    for label, rep in rows.items():
        w.writerow([label, *(repr(float(rep[c])) for c in COLUMNS)])
    return buf.getvalue()
