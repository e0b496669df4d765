"""Record-level scoring shared by the SSA and KNN detectors.

A detection point covers a span of input samples (its footprint).  A record
is a true positive when some flagged footprint overlaps a labelled fault
interval, and a false positive when some flagged footprint falls entirely
outside every interval widened by ``guard`` seconds on each side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signalgen import FAULT_TYPES, FaultType


@dataclass(frozen=True)
class RecordScore:
    has_fault: bool
    tp: bool
    fp: bool


def score_record(flag_start, flag_end, labels, guard: float) -> RecordScore:
    flag_start = np.asarray(flag_start, dtype=float)
    flag_end = np.asarray(flag_end, dtype=float)
    hit = np.zeros(len(flag_start), bool)
    near = np.zeros(len(flag_start), bool)
    for a, b, _ in labels:
        hit |= (flag_start <= b) & (flag_end >= a)
        near |= (flag_start <= b + guard) & (flag_end >= a - guard)
    return RecordScore(has_fault=bool(labels), tp=bool(hit.any()), fp=bool((~near).any()))


def rates(outcomes) -> dict[str, dict]:
    """Aggregate (fault_type, RecordScore) pairs into per-class TPR/FPR.

    TPR is ``None`` for the normal class.
    """
    table: dict[str, dict] = {}
    for ft in FAULT_TYPES + (FaultType.NONE,):
        scores = [s for f, s in outcomes if f is ft]
        if not scores:
            continue
        n = len(scores)
        tpr = sum(s.tp for s in scores) / n if ft is not FaultType.NONE else None
        table[ft.short] = {"n": n, "tpr": tpr, "fpr": sum(s.fp for s in scores) / n}
    faults = [s for f, s in outcomes if f is not FaultType.NONE]
    if outcomes:
        table["all"] = {
            "n": len(outcomes),
            "tpr": sum(s.tp for s in faults) / len(faults) if faults else None,
            "fpr": sum(s.fp for _, s in outcomes) / len(outcomes),
        }
    return table


def youden_best(points):
    """Pick the (threshold, tpr, fpr) point maximising TPR - FPR, ties to lower FPR."""
    best = None
    for thr, tpr, fpr in points:
        key = (tpr - fpr, -fpr, tpr)
        if best is None or key > best[0]:
            best = (key, (thr, tpr, fpr))
    return None if best is None else best[1]
