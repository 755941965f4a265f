"""Boundary detection metrics: tolerance matching, precision/recall/F1,
over-segmentation and R-value.

Times are in seconds.  A predicted boundary matches a gold one when they
are at most ``tolerance`` apart (plus a 1e-9 s allowance for float noise in
frame-to-time conversions); each boundary is used at most once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError

TIME_EPS = 1e-9


def match_boundaries(pred, gold, tolerance=0.02):
    """Number of one-to-one hits between sorted ``pred`` and ``gold`` times.

    Gold boundaries are visited in time order and each takes the earliest
    still-unmatched prediction within tolerance.  Because every gold
    boundary accepts an interval of prediction times, this greedy walk
    yields a maximum matching.
    """
    if tolerance < 0:
        raise ContractError("tolerance must be >= 0")
    pred = sorted(pred)
    hits, j = 0, 0
    for g in sorted(gold):
        while j < len(pred) and pred[j] < g - tolerance - TIME_EPS:
            j += 1
        if j < len(pred) and pred[j] <= g + tolerance + TIME_EPS:
            hits += 1
            j += 1
    return hits


def precision_recall_f1(hits, pred_count, gold_count):
    """Fractions P, R, F1.

    Conventions: no predictions and no gold -> (1, 1, 1); otherwise an empty
    side gives 0 for the ratio it divides.
    """
    if hits > min(pred_count, gold_count):
        raise ContractError(f"hits {hits} exceed min(pred={pred_count}, gold={gold_count})")
    if pred_count == 0 and gold_count == 0:
        return 1.0, 1.0, 1.0
    p = hits / pred_count if pred_count else 0.0
    r = hits / gold_count if gold_count else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def over_segmentation(p, r):
    """OS = R/P - 1; ``nan`` when P is 0."""
    return r / p - 1.0 if p > 0 else math.nan


def r_value(p, r):
    """R-value from precision and recall fractions (0 when P is 0)."""
    if p <= 0:
        return 0.0
    os_ = r / p - 1.0
    r1 = math.sqrt((1.0 - r) ** 2 + os_ ** 2)
    r2 = (-os_ + r - 1.0) / math.sqrt(2.0)
    return 1.0 - (abs(r1) + abs(r2)) / 2.0


@dataclass
class EvalReport:
    """Corpus scores.  Rates are stored as fractions; ``percentages`` and
    the formatters scale them by 100."""

    precision: float
    recall: float
    f1: float
    os: float
    r_value: float
    hits: int
    pred_count: int
    gold_count: int

    @property
    def os_undefined(self):
        return math.isnan(self.os)

    @classmethod
    def from_counts(cls, hits, pred_count, gold_count):
        p, r, f1 = precision_recall_f1(hits, pred_count, gold_count)
        if pred_count == 0 and gold_count == 0:
            os_, rv = 0.0, 1.0
        else:
            os_, rv = over_segmentation(p, r), r_value(p, r)
        return cls(p, r, f1, os_, rv, hits, pred_count, gold_count)

    def percentages(self):
        return {"P": 100 * self.precision, "R": 100 * self.recall, "F1": 100 * self.f1,
                "OS": 100 * self.os, "R-value": 100 * self.r_value}

    def to_lines(self):
        """Machine-readable ``metric\\tvalue`` lines."""
        lines = [f"{k}\t{v:.2f}" for k, v in self.percentages().items()]
        lines += [f"hits\t{self.hits}", f"pred_count\t{self.pred_count}",
                  f"gold_count\t{self.gold_count}"]
        return lines

    def table(self):
        pc = self.percentages()
        head = "".join(f"{k:>9}" for k in pc)
        row = "".join(f"{v:9.2f}" for v in pc.values())
        counts = f"hits={self.hits} pred={self.pred_count} gold={self.gold_count}"
        return f"{head}\n{row}\n{counts}"


def parse_report_lines(lines):
    """Inverse of :meth:`EvalReport.to_lines` (values as printed)."""
    out = {}
    for line in lines:
        key, _, value = line.partition("\t")
        out[key] = int(value) if key.endswith(("_count", "hits")) else float(value)
    return out


def evaluate_corpus(pred_map, gold_map, tolerance=0.02):
    """Micro-averaged report: counts are pooled over utterances first."""
    missing_pred = sorted(set(gold_map) - set(pred_map))
    missing_gold = sorted(set(pred_map) - set(gold_map))
    if missing_pred or missing_gold:
        raise ContractError("utterance keys differ; missing predictions for "
                            f"{missing_pred[:5]}, missing gold for {missing_gold[:5]}")
    hits = n_pred = n_gold = 0
    for key in gold_map:
        hits += match_boundaries(pred_map[key], gold_map[key], tolerance)
        n_pred += len(pred_map[key])
        n_gold += len(gold_map[key])
    return EvalReport.from_counts(hits, n_pred, n_gold)


def evaluate_per_utterance(pred_map, gold_map, tolerance=0.02):
    """Per-utterance reports (the macro view)."""
    evaluate_corpus(pred_map, gold_map, tolerance)  # key check
    return {k: EvalReport.from_counts(match_boundaries(pred_map[k], gold_map[k], tolerance),
                                      len(pred_map[k]), len(gold_map[k]))
            for k in gold_map}
