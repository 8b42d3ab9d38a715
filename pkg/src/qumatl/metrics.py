"""Accuracy, macro-F1, Cohen's kappa, consistency matrices, DIC, consensus voting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .data import MISSING, Dataset, majority_labels


class MetricError(ValueError):
    pass


def _paired(preds, refs):
    preds = np.asarray(preds, dtype=np.int64)
    refs = np.asarray(refs, dtype=np.int64)
    if preds.shape != refs.shape:
        raise MetricError(f"length mismatch: {preds.shape} vs {refs.shape}")
    keep = (preds != MISSING) & (refs != MISSING)
    if not keep.any():
        raise MetricError("no comparable (non-missing) pairs")
    return preds[keep], refs[keep]


def accuracy(preds, refs) -> float:
    p, r = _paired(preds, refs)
    return float(np.mean(p == r))


def macro_f1(preds, refs, num_classes: int) -> float:
    """Unweighted per-class F1 mean.

    A class that never occurs in ``refs`` and is never predicted is skipped.
    """
    p, r = _paired(preds, refs)
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((p == c) & (r == c)))
        n_pred = int(np.sum(p == c))
        n_ref = int(np.sum(r == c))
        if n_pred == 0 and n_ref == 0:
            continue
        if tp == 0:
            scores.append(0.0)
            continue
        precision, recall = tp / n_pred, tp / n_ref
        scores.append(2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def cohen_kappa(ya, yb, num_classes: int) -> float:
    """Cohen's kappa over pairs where both labels are present.

    Computed in exact integer arithmetic and rounded once. When chance
    agreement is 1 (both raters constant) the result is 1 for identical
    sequences and 0 otherwise.
    """
    a, b = _paired(ya, yb)
    n = a.size
    agree = int(np.sum(a == b))
    ca = np.bincount(a, minlength=num_classes)
    cb = np.bincount(b, minlength=num_classes)
    if ca.size > num_classes or cb.size > num_classes:
        raise MetricError(f"label outside [0, {num_classes})")
    chance = sum(int(x) * int(y) for x, y in zip(ca, cb))
    den = n * n - chance
    if den == 0:
        return 1.0 if agree == n else 0.0
    return float(Fraction(agree * n - chance, den))


@dataclass
class ConsistencyMatrix:
    values: np.ndarray
    kind: str  # "groundTruth" (M) or "predicted" (M')

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = self.values.shape[0]
        writer.writerow([""] + [f"A_{k + 1}" for k in range(n)])
        for k in range(n):
            writer.writerow([f"A_{k + 1}"] + ["" if np.isnan(v) else repr(float(v)) for v in self.values[k]])
        return buf.getvalue()


def consistency_matrix(label_sets, num_classes: int, kind: str = "groundTruth") -> ConsistencyMatrix:
    """Pairwise kappa between the rows of ``label_sets`` (n x N).

    A pair with no sample labelled by both gets NaN.
    """
    label_sets = np.asarray(label_sets, dtype=np.int64)
    n = label_sets.shape[0]
    m = np.eye(n)
    present = label_sets != MISSING
    for k in range(n):
        for l in range(k + 1, n):
            if not np.any(present[k] & present[l]):
                m[k, l] = m[l, k] = np.nan
                continue
            m[k, l] = m[l, k] = cohen_kappa(label_sets[k], label_sets[l], num_classes)
    return ConsistencyMatrix(m, kind)


def dic(m: Union[ConsistencyMatrix, np.ndarray], m_prime: Union[ConsistencyMatrix, np.ndarray]) -> float:
    """Frobenius distance between ground-truth and predicted consistency matrices.

    Entries undefined (NaN) in either matrix are left out of the sum.
    """
    a = m.values if isinstance(m, ConsistencyMatrix) else np.asarray(m)
    b = m_prime.values if isinstance(m_prime, ConsistencyMatrix) else np.asarray(m_prime)
    if a.shape != b.shape:
        raise MetricError(f"consistency matrix shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.sum(diff[np.isfinite(diff)] ** 2)))


def majority_vote_predictions(per_annotator_preds, num_classes: Optional[int] = None) -> np.ndarray:
    """Consensus per sample from an (n, numSamples) prediction grid; ties to the smallest class."""
    preds = np.asarray(per_annotator_preds, dtype=np.int64)
    if preds.ndim != 2 or preds.shape[0] < 1:
        raise MetricError("expected an (n, numSamples) grid with n >= 1")
    if num_classes is None:
        num_classes = int(preds.max()) + 1
    return majority_labels(preds.T, num_classes)


# --------------------------------------------------------------- reporting


@dataclass
class EvalReport:
    per_annotator_accuracy: np.ndarray
    per_annotator_f1: np.ndarray
    avg_accuracy: float
    avg_f1: float
    copr_accuracy: float
    copr_f1: float
    dic: float
    M: ConsistencyMatrix
    Mprime: ConsistencyMatrix
    absent: list[int] = field(default_factory=list)

    def table_rows(self) -> list[list]:
        """Metric rows over columns A_1..A_n, Avg, CoPr."""
        n = len(self.per_annotator_accuracy)
        header = ["metric"] + [f"A_{k + 1}" for k in range(n)] + ["Avg", "CoPr"]
        acc = ["accuracy"] + [_num(v) for v in self.per_annotator_accuracy] + [_num(self.avg_accuracy), _num(self.copr_accuracy)]
        f1 = ["f1"] + [_num(v) for v in self.per_annotator_f1] + [_num(self.avg_f1), _num(self.copr_f1)]
        return [header, acc, f1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "perAnnotatorAccuracy": [_num(v) for v in self.per_annotator_accuracy],
            "perAnnotatorF1": [_num(v) for v in self.per_annotator_f1],
            "avgAccuracy": self.avg_accuracy,
            "avgF1": self.avg_f1,
            "coprAccuracy": self.copr_accuracy,
            "coprF1": self.copr_f1,
            "dic": self.dic,
            "M": [[_num(v) for v in row] for row in self.M.values],
            "Mprime": [[_num(v) for v in row] for row in self.Mprime.values],
            "absent": list(self.absent),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _num(v) -> Optional[float]:
    v = float(v)
    return None if math.isnan(v) else v


def evaluate_predictions(preds: np.ndarray, dataset: Dataset, restrict_pairs: bool = True) -> EvalReport:
    """Score an (N, n) grid of predicted labels against ``dataset``.

    With ``restrict_pairs`` the predicted consistency matrix only uses
    samples where both annotators of a pair have ground-truth labels, so M
    and M' share a support.
    """
    preds = np.asarray(preds, dtype=np.int64)
    refs = dataset.labels
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    if preds.shape != refs.shape:
        raise MetricError(f"predictions {preds.shape} do not match labels {refs.shape}")
    n, c = dataset.num_annotators, dataset.num_classes
    acc = np.full(n, np.nan)
    f1 = np.full(n, np.nan)
    absent = []
    for k in range(n):
        if not np.any(refs[:, k] != MISSING):
            absent.append(k)
            continue
        acc[k] = accuracy(preds[:, k], refs[:, k])
        f1[k] = macro_f1(preds[:, k], refs[:, k], c)
    consensus = majority_vote_predictions(preds.T, c)
    target = majority_labels(refs, c)
    m = consistency_matrix(refs.T, c, "groundTruth")
    pred_sets = np.where(refs != MISSING, preds, MISSING) if restrict_pairs else preds
    m_prime = consistency_matrix(pred_sets.T, c, "predicted")
    return EvalReport(
        per_annotator_accuracy=acc,
        per_annotator_f1=f1,
        avg_accuracy=float(np.nanmean(acc)),
        avg_f1=float(np.nanmean(f1)),
        copr_accuracy=accuracy(consensus, target),
        copr_f1=macro_f1(consensus, target, c),
        dic=dic(m, m_prime),
        M=m,
        Mprime=m_prime,
        absent=absent,
    )


def evaluate(model_or_preds, dataset: Dataset, restrict_pairs: bool = True) -> EvalReport:
    """Evaluate a model (per-annotator variant) or a prediction dump on ``dataset``."""
    if isinstance(model_or_preds, np.ndarray):
        preds = model_or_preds
    else:
        from .train import predict_labels

        preds = predict_labels(model_or_preds, dataset)
    return evaluate_predictions(preds, dataset, restrict_pairs)
