"""Post-hoc selection among candidate samples from their attention alignments.

Candidates whose alignment never reaches the end of the text, or whose
high-weight path breaks apart, are discarded. Survivors are scored by the
product of four factors (distance to the median survivor length, trace
max-median gap, trace max-min gap, reciprocal trace minimum) and the lowest
score wins. The attention trace is the per-frame maximum weight.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PERCENTILE = 95.0
END_TOLERANCE = 2
BACKWARD_TOLERANCE = 1
MIN_FORWARD_TOLERANCE = 2
TRACE_FLOOR = 1e-6

OK, FAILED_END, FAILED_BROKEN = "ok", "failed_end", "failed_broken"


@dataclass
class TraceStats:
    length: int
    trace: np.ndarray
    trace_max: float
    trace_median: float
    trace_min: float
    reached_end: bool
    contiguous: bool


def _as_matrix(record) -> np.ndarray:
    w = getattr(record, "weights", record)
    if hasattr(w, "detach"):
        w = w.detach().cpu().numpy()
    return np.asarray(w, dtype=np.float64)


def analyze(record, U: int | None = None, forward_tolerance: float | None = None) -> TraceStats:
    """Trace statistics and failure flags for one (steps, U) alignment.

    Trailing all-zero rows count toward ``length`` but not toward the trace.
    The mask keeps entries at or above the matrix's 95th percentile (and
    strictly positive); ``contiguous`` checks the path of per-frame mask
    peaks never steps back more than one position or forward more than
    max(2, U/20) positions between consecutive active frames.
    """
    w = _as_matrix(record)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError("empty attention record")
    U = w.shape[1] if U is None else U
    fwd = max(MIN_FORWARD_TOLERANCE, U / 20) if forward_tolerance is None else forward_tolerance

    nonzero_rows = np.flatnonzero(w.max(axis=1) > 0)
    active_len = nonzero_rows[-1] + 1 if len(nonzero_rows) else w.shape[0]
    trace = w[:active_len].max(axis=1)

    threshold = np.percentile(w, PERCENTILE)
    mask = (w >= threshold) & (w > 0)
    reached_end = bool(mask[:, max(0, U - END_TOLERANCE):].any())

    contiguous = True
    prev = None
    for t in np.flatnonzero(mask.any(axis=1)):
        pos = int(np.argmax(np.where(mask[t], w[t], -np.inf)))
        if prev is not None:
            step = pos - prev
            if step < -BACKWARD_TOLERANCE or step > fwd:
                contiguous = False
                break
        prev = pos

    return TraceStats(length=int(w.shape[0]), trace=trace, trace_max=float(trace.max()),
                      trace_median=float(np.median(trace)), trace_min=float(trace.min()),
                      reached_end=reached_end, contiguous=contiguous)


def score(stats: TraceStats, median_length: float) -> tuple[float, tuple[float, float, float, float]]:
    """Product score (lower is better) and its four factors."""
    f1 = abs(stats.length - median_length) + 1.0
    f2 = stats.trace_max - stats.trace_median
    f3 = stats.trace_max - stats.trace_min
    f4 = 1.0 / (stats.trace_min + TRACE_FLOOR)
    return f1 * f2 * f3 * f4, (f1, f2, f3, f4)


@dataclass
class CandidateReport:
    index: int
    seed: int
    status: str
    score: float | None = None
    factors: list[float] | None = None
    length: int = 0


@dataclass
class RankReport:
    candidates: list[CandidateReport]
    order: list[int] = field(default_factory=list)  # candidate indices, best first
    chosen: int | None = None
    median_length: float | None = None

    @property
    def status(self) -> str:
        return "ok" if self.chosen is not None else "all_failed"

    def to_json(self) -> dict:
        return {"status": self.status, "chosen": self.chosen, "order": self.order,
                "median_length": self.median_length,
                "candidates": [asdict(c) for c in self.candidates]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def rank(candidates: Sequence, U: int | None = None) -> RankReport:
    """Filter failed alignments, score the rest, choose the lowest score.

    ``candidates`` are SampleResult-like objects with ``attention`` and
    ``seed``. Ties go to the lower seed.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    reports, stats = [], {}
    for i, c in enumerate(candidates):
        s = analyze(c.attention, U)
        status = OK if s.reached_end and s.contiguous else (FAILED_END if not s.reached_end else FAILED_BROKEN)
        reports.append(CandidateReport(i, int(c.seed), status, length=s.length))
        if status == OK:
            stats[i] = s
    if not stats:
        return RankReport(reports)
    median = float(np.median([s.length for s in stats.values()]))
    for i, s in stats.items():
        sc, factors = score(s, median)
        reports[i].score, reports[i].factors = sc, list(factors)
    order = sorted(stats, key=lambda i: (reports[i].score, reports[i].seed, i))
    return RankReport(reports, order, order[0], median)
