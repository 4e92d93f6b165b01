"""Average precision, classification mAP and cosine-similarity retrieval mAP."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import ShapeError

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    num_items: int
    mode: str  # "classification" or "retrieval"
    skipped: list[int] = field(default_factory=list)


def rank_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep original index order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def average_precision(scores, relevant) -> float:
    """AP = sum_k P(k) * (R(k) - R(k-1)) over the full ranked list."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if scores.shape != relevant.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and relevance {relevant.shape} must be equal-length vectors")
    n_rel = int(relevant.sum())
    if n_rel == 0:
        raise ValueError("average precision is undefined without relevant items")
    ap = 0.0
    hits = 0
    prev_recall = 0.0
    for k, i in enumerate(rank_order(scores), start=1):
        if not relevant[i]:
            continue  # recall does not move, term is zero
        hits += 1
        recall = hits / n_rel
        ap += (hits / k) * (recall - prev_recall)
        prev_recall = recall
    return ap


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def classification_map(scores, labels, num_classes: int | None = None) -> EvalReport:
    """Per-class AP ranking all samples by ``scores[:, c]``; classes absent from labels are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("classification_map needs a non-empty samples x classes score table")
    if labels.shape != (scores.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    k = scores.shape[1] if num_classes is None else num_classes
    per_class, skipped = {}, []
    for c in range(k):
        rel = labels == c
        if not rel.any():
            log.warning("class %d has no samples; skipped", c)
            skipped.append(c)
            continue
        per_class[c] = average_precision(scores[:, c], rel)
    if not per_class:
        raise ValueError("no class has any relevant sample")
    return EvalReport(per_class, _mean(list(per_class.values())), scores.shape[0], "classification", skipped)


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine of vectors with shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def cosine_matrix(queries, search) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    s = np.asarray(search, dtype=np.float64)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise ShapeError(f"query features {q.shape} and search features {s.shape} are incompatible")
    nq = np.linalg.norm(q, axis=1)
    ns = np.linalg.norm(s, axis=1)
    if (nq == 0).any() or (ns == 0).any():
        log.warning("zero-norm feature vectors present; their cosine similarity is taken as 0")
    denom = nq[:, None] * ns[None, :]
    return np.divide(q @ s.T, denom, out=np.zeros(denom.shape), where=denom > 0)


def retrieval_map(query_features, query_labels, search_features, search_labels) -> EvalReport:
    """Rank the search set by cosine similarity for each query; AP per query, averaged per class."""
    query_labels = np.asarray(query_labels)
    search_labels = np.asarray(search_labels)
    sims = cosine_matrix(query_features, search_features)
    if query_labels.shape != (sims.shape[0],) or search_labels.shape != (sims.shape[1],):
        raise ShapeError("label vectors do not match feature rows")
    by_class: dict[int, list[float]] = {}
    skipped = []
    for qi, label in enumerate(query_labels.tolist()):
        rel = search_labels == label
        if not rel.any():
            log.warning("query %d: class %d absent from the search set; skipped", qi, label)
            skipped.append(qi)
            continue
        by_class.setdefault(label, []).append(average_precision(sims[qi], rel))
    if not by_class:
        raise ValueError("no query has a relevant item in the search set")
    per_class = {c: _mean(aps) for c, aps in sorted(by_class.items())}
    return EvalReport(per_class, _mean(list(per_class.values())), sims.shape[0], "retrieval", skipped)


def report_csv(report: EvalReport, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "ap"])
    for c, ap in report.per_class_ap.items():
        w.writerow([class_names[c], repr(ap)])
    w.writerow(["mAP", repr(report.map)])
    return buf.getvalue()


def report_table(report: EvalReport, class_names: Sequence[str], method: str) -> str:
    """Fixed-width table: one column per evaluated class, values in percent."""
    cols = [class_names[c] for c in report.per_class_ap] + ["mAP"]
    vals = [f"{100 * ap:.1f}" for ap in report.per_class_ap.values()] + [f"{100 * report.map:.1f}"]
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    mw = max(len("Method"), len(method))
    lines = [
        f"# {report.mode} AP (%), {report.num_items} {'queries' if report.mode == 'retrieval' else 'samples'}",
        " | ".join(["Method".ljust(mw)] + [c.rjust(w) for c, w in zip(cols, widths)]),
        " | ".join([method.ljust(mw)] + [v.rjust(w) for v, w in zip(vals, widths)]),
    ]
    return "\n".join(lines) + "\n"


def attention_dump(ids: Sequence[str], words: Sequence[Sequence[str]], weights) -> str:
    """TSV rows (id, word, weight) for every retained word."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["id", "word", "weight"])
    weights = np.asarray(weights)
    for i, (sid, ws) in enumerate(zip(ids, words)):
        for j, word in enumerate(ws):
            w.writerow([sid, word, repr(float(weights[i, j]))])
    return buf.getvalue()
