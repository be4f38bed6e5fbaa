"""Event-based precision / recall / F-measure with IoU-gated maximum matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataio import POS, UNK, AnnotationEvent, DetectionEvent


@dataclass
class MatchReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_file: dict = field(default_factory=dict)
    # set when the report is an average of subsets rather than pooled counts
    override: tuple[float, float] | None = None

    @property
    def precision(self) -> float:
        if self.override is not None:
            return self.override[0]
        return 100.0 * self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        if self.override is not None:
            return self.override[1]
        return 100.0 * self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_measure(self) -> float:
        return f_measure(self.precision, self.recall)

    def __add__(self, other: "MatchReport") -> "MatchReport":
        pf = dict(self.per_file)
        pf.update(other.per_file)
        return MatchReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, pf)


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _span(e):
    return float(e.onset_s), float(e.offset_s)


def iou(a, b) -> float:
    (a0, a1), (b0, b1) = _span(a), _span(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def _check_disjoint(events, what: str):
    spans = sorted(_span(e) for e in events)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if b0 < a1 - 1e-9:
            raise ValueError(f"{what} events overlap: [{a0}, {a1}] and [{b0}, {b1}]")


def matchable(predicted, reference, min_iou: float = 0.3) -> np.ndarray:
    M = np.zeros((len(predicted), len(reference)), dtype=bool)
    for i, p in enumerate(predicted):
        for j, r in enumerate(reference):
            M[i, j] = iou(p, r) >= min_iou
    return M


def max_matching(M: np.ndarray) -> int:
    """Size of a maximum-cardinality matching in the bipartite graph ``M``."""
    if M.size == 0 or not M.any():
        return 0
    rows, cols = linear_sum_assignment(M.astype(np.float64), maximize=True)
    return int(M[rows, cols].sum())


def match_events(predicted: Sequence, reference: Sequence, min_iou: float = 0.3,
                 unknown: Sequence = (), file_id: str | None = None) -> MatchReport:
    """Count tp/fp/fn for one file.

    Predictions left unmatched after matching against ``reference`` are not
    counted as false positives if they match an ``unknown`` (UNK) event.
    """
    _check_disjoint(predicted, "predicted")
    _check_disjoint(reference, "reference")
    M = matchable(predicted, reference, min_iou)
    tp = max_matching(M)
    fp = len(predicted) - tp
    if unknown and fp:
        if M.size and M.any():
            rows, cols = linear_sum_assignment(M.astype(np.float64), maximize=True)
            used = {int(r) for r, c in zip(rows, cols) if M[r, c]}
        else:
            used = set()
        left = [p for i, p in enumerate(predicted) if i not in used]
        fp -= max_matching(matchable(left, unknown, min_iou))
    rep = MatchReport(tp, fp, len(reference) - tp)
    if file_id is not None:
        rep.per_file[file_id] = (rep.tp, rep.fp, rep.fn)
    return rep


def evaluation_reference(events: Sequence[AnnotationEvent], k_shot: int = 5):
    """(cutoff, POS after cutoff, UNK after cutoff) for one annotation file."""
    pos = [e for e in events if e.polarity == POS]
    cutoff = pos[min(k_shot, len(pos)) - 1].offset_s if pos else 0.0
    ref = [e for e in pos[k_shot:] if e.onset_s >= cutoff - 1e-9]
    unk = [e for e in events if e.polarity == UNK and e.onset_s >= cutoff]
    return cutoff, ref, unk


def score_file(predicted: Sequence[DetectionEvent], annotations: Sequence[AnnotationEvent], k_shot: int = 5,
               min_iou: float = 0.3, file_id: str = "") -> MatchReport:
    cutoff, ref, unk = evaluation_reference(annotations, k_shot)
    pred = sorted((p for p in predicted if p.offset_s > cutoff), key=lambda e: e.onset_s)
    return match_events(pred, ref, min_iou, unk, file_id or None)


def combine(reports: Mapping[str, MatchReport], mode: str = "harmonic") -> MatchReport:
    """Overall report across subsets.

    ``mode='pooled'`` sums tp/fp/fn. ``mode='harmonic'`` takes the harmonic
    mean of the per-subset precision and recall, which is how the challenge
    summary table aggregates subsets.
    """
    reports = dict(reports)
    if not reports:
        raise ValueError("need at least one subset report")
    pooled = sum(reports.values(), MatchReport())
    if mode == "pooled" or len(reports) == 1:
        return pooled
    if mode != "harmonic":
        raise ValueError(f"unknown combine mode {mode!r}")
    ps = [r.precision for r in reports.values()]
    rs = [r.recall for r in reports.values()]
    hp = 0.0 if min(ps) == 0 else len(ps) / sum(1.0 / p for p in ps)
    hr = 0.0 if min(rs) == 0 else len(rs) / sum(1.0 / r for r in rs)
    pooled.override = (hp, hr)
    return pooled


def report(reports: Mapping[str, MatchReport], mode: str = "harmonic", title: str = "System") -> tuple[MatchReport, str]:
    """Overall report plus a text table with Pre/Rec/F per subset and Overall."""
    overall = combine(reports, mode)
    names = list(reports) + ["Overall"]
    cols = list(reports.values()) + [overall]
    head1 = f"{'':<10}" + "".join(f"| {n:^26}" for n in names)
    head2 = f"{title:<10}" + "".join(f"| {'Pre (%)':>8} {'Rec (%)':>8} {'F (%)':>7} " for _ in names)
    row = f"{'':<10}" + "".join(f"| {r.precision:8.2f} {r.recall:8.2f} {r.f_measure:7.2f} " for r in cols)
    return overall, "\n".join([head1, head2, row])


def summary_lines(overall: MatchReport, reports: Mapping[str, MatchReport]) -> list[str]:
    """Flat ``key = value`` lines for machine consumption."""
    lines = []
    for name, r in list(reports.items()) + [("overall", overall)]:
        for k in ("tp", "fp", "fn"):
            lines.append(f"{name}.{k} = {getattr(r, k)}")
        lines.append(f"{name}.precision = {r.precision:.4f}")
        lines.append(f"{name}.recall = {r.recall:.4f}")
        lines.append(f"{name}.f_measure = {r.f_measure:.4f}")
    return lines
