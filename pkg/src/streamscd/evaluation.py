"""Tolerance-window SCD scoring, gender accuracy and threshold sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scd import detect_changes


@dataclass
class MatchResult:
    matched: list[tuple[float, float]] = field(default_factory=list)
    false_positives: list[float] = field(default_factory=list)
    misses: list[float] = field(default_factory=list)

    @property
    def n_hyp(self) -> int:
        return len(self.matched) + len(self.false_positives)

    @property
    def n_ref(self) -> int:
        return len(self.matched) + len(self.misses)


@dataclass
class Counts:
    matches: int = 0
    n_hyp: int = 0
    n_ref: int = 0

    def add(self, m: MatchResult | Counts) -> Counts:
        if isinstance(m, MatchResult):
            return Counts(self.matches + len(m.matched), self.n_hyp + m.n_hyp, self.n_ref + m.n_ref)
        return Counts(self.matches + m.matches, self.n_hyp + m.n_hyp, self.n_ref + m.n_ref)


@dataclass
class Metrics:
    recall: float
    precision: float
    f1: float


def _check_sorted(xs: Sequence[float], what: str) -> None:
    if any(b < a for a, b in zip(xs, xs[1:])):
        raise ValueError(f"{what} times are not sorted")


def match_detections(hyp: Sequence[float], ref: Sequence[float], tol_s: float = 2.0) -> MatchResult:
    """Maximum one-to-one matching with ``|h - r| <= tol_s``.

    Two-pointer sweep: the leftmost unmatched hypothesis and reference are
    paired whenever they lie within tolerance; otherwise the one that can no
    longer match anything is discarded.
    """
    if tol_s < 0:
        raise ValueError("tolerance must be >= 0")
    hyp, ref = list(hyp), list(ref)
    _check_sorted(hyp, "hypothesis")
    _check_sorted(ref, "reference")
    out = MatchResult()
    i = j = 0
    while i < len(hyp) and j < len(ref):
        d = hyp[i] - ref[j]
        if d < -tol_s:
            out.false_positives.append(hyp[i])
            i += 1
        elif d > tol_s:
            out.misses.append(ref[j])
            j += 1
        else:
            out.matched.append((hyp[i], ref[j]))
            i += 1
            j += 1
    out.false_positives.extend(hyp[i:])
    out.misses.extend(ref[j:])
    return out


def compute_prf(m: MatchResult | Counts) -> Metrics:
    """Recall, precision and F1.  Empty reference sets give recall 1; empty hypothesis sets give precision 1 only if the reference is also empty."""
    c = Counts().add(m)
    recall = c.matches / c.n_ref if c.n_ref else 1.0
    if c.n_hyp:
        precision = c.matches / c.n_hyp
    else:
        precision = 1.0 if c.n_ref == 0 else 0.0
    return Metrics(recall, precision, f1_score(precision, recall))


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def gender_accuracy(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Fraction of tokens whose gender matches; every token counts, punctuation included."""
    if len(hyp) != len(ref):
        raise ValueError(f"{len(hyp)} hypothesis labels vs {len(ref)} reference labels")
    if not hyp:
        raise ValueError("no tokens to score")
    return sum(h == r for h, r in zip(hyp, ref)) / len(hyp)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ScoredSample:
    """Everything needed to re-run detection at a new threshold."""

    sample_id: str
    tvectors: np.ndarray
    frames: list[int]
    ref_times: list[float]


@dataclass
class SweepRow:
    threshold: float
    recall: float
    precision: float
    f1: float
    matches: int
    n_hyp: int
    n_ref: int


def evaluate_events(hyp_times: dict[str, Sequence[float]], ref_times: dict[str, Sequence[float]], tol_s: float = 2.0) -> tuple[Metrics, Counts]:
    if set(hyp_times) != set(ref_times):
        missing = sorted(set(ref_times) ^ set(hyp_times))
        raise KeyError(f"sample ids differ between hypothesis and reference: {missing[:5]}")
    c = Counts()
    for sid in ref_times:
        c = c.add(match_detections(sorted(hyp_times[sid]), ref_times[sid], tol_s))
    return compute_prf(c), c


def threshold_sweep(samples: Sequence[ScoredSample], thresholds: Sequence[float], tol_s: float = 2.0, min_gap_s: float = 0.0, frame_shift_s: float = 0.04, smooth: int = 1) -> list[SweepRow]:
    """Micro-averaged metrics per threshold."""
    if len(thresholds) == 0:
        raise ValueError("threshold list is empty")
    rows = []
    for th in thresholds:
        c = Counts()
        for s in samples:
            events = detect_changes(s.tvectors, s.frames, th, min_gap_s, frame_shift_s, smooth)
            c = c.add(match_detections([e.timestamp_s for e in events], s.ref_times, tol_s))
        m = compute_prf(c)
        rows.append(SweepRow(float(th), m.recall, m.precision, m.f1, c.matches, c.n_hyp, c.n_ref))
    return rows


REPORT_COLUMNS = ("threshold", "recall", "precision", "f1")


def report_tsv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([repr(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(rows: Sequence[SweepRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)


def read_report_tsv(text: str) -> list[dict[str, float]]:
    rows = list(csv.DictReader(io.StringIO(text), delimiter="\t"))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def write_reports(rows: Sequence[SweepRow], stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
    tsv.write_text(report_tsv(rows))
    js.write_text(report_json(rows))
    return tsv, js
