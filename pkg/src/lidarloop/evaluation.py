"""Retrieval and registration benchmarks: PR curves, AP, stats, timing.

Two evaluation protocols share one threshold sweep. Protocol 1 scores each
scan's single best retrieval candidate; a query whose candidates all fall
under the threshold still counts as a false negative whenever a true loop
existed for it. Protocol 2 scores every eligible (query, candidate) pair as
an independent binary decision. Both sweep thresholds over the observed
score set (exact curves, no binning) and integrate average precision as
``sum_k (R_k - R_{k-1}) * P_k`` down the descending-score groups.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .ingest import LoopGroundtruth

_REPORT_HEADER = ("kind", "key", "threshold", "precision", "recall", "value")


@dataclass(frozen=True)
class ScoredPair:
    """A candidate retrieval scored by similarity (higher = more similar).

    ``score`` is conventionally the negated descriptor distance, so exact
    matches score 0 and everything else is negative.
    """

    query_index: int
    candidate_index: int
    score: float
    is_true_loop: bool

    def __post_init__(self):
        if self.candidate_index >= self.query_index:
            raise ValueError(
                f"candidate {self.candidate_index} does not precede "
                f"query {self.query_index}"
            )
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")


@dataclass(frozen=True)
class PrCurve:
    """Threshold sweep results: (threshold, precision, recall) per group.

    Points are ordered from the tightest threshold to the loosest, so
    recall is non-decreasing along the list. ``n_positives`` is the size of
    the positive universe the recall denominator used; a run with no
    positives yields an empty curve with ``ap = 0.0`` (reports print an
    explicit "no positives" marker rather than NaN).
    """

    points: tuple
    ap: float
    n_positives: int

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(map(tuple, self.points)))
        if self.n_positives < 0:
            raise ValueError("n_positives must be >= 0")
        if self.n_positives == 0:
            if self.points or self.ap != 0.0:
                raise ValueError("no positives implies an empty curve")
            return
        if not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"ap must be in [0, 1], got {self.ap}")
        last_recall = 0.0
        for threshold, precision, recall in self.points:
            if not 0.0 <= precision <= 1.0:
                raise ValueError(f"precision {precision} outside [0, 1]")
            if recall < last_recall - 1e-15:
                raise ValueError("recall must not decrease as the "
                                 "threshold loosens")
            last_recall = recall


@dataclass(frozen=True)
class RegistrationStats:
    """Success rate plus translation/rotation errors, successful and all.

    The ``*_succ`` fields are None when nothing succeeded (tables print
    "-" for them, keeping the "- / 2.43" convention).
    """

    success_rate: float
    te_succ: float | None
    te_all: float
    re_succ: float | None
    re_all: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate must be in [0, 1]")
        if (self.te_succ is None) != (self.re_succ is None):
            raise ValueError("te_succ and re_succ must be absent together")
        if (self.te_succ is None) != (self.success_rate == 0.0):
            raise ValueError("succ fields are absent iff nothing succeeded")
        for name in ("te_succ", "te_all", "re_succ", "re_all"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class StageTiming:
    count: int
    median_s: float
    p95_s: float


def labeled_pair(gt: LoopGroundtruth, query_index: int, candidate_index: int,
                 score: float) -> ScoredPair:
    """Build a ScoredPair labeled against the groundtruth pair set.

    The groundtruth labels pairs strictly more than ``exclusion_window``
    scans apart; retrieval may legitimately return a candidate exactly at
    the window edge, which is kept but can never be a true loop.
    """
    if candidate_index > query_index - gt.exclusion_window:
        raise ValueError(
            f"candidate {candidate_index} is inside the exclusion "
            f"window of query {query_index}"
        )
    return ScoredPair(query_index, candidate_index, score,
                      (query_index, candidate_index) in gt.pairs)


def _sweep(scores: np.ndarray, labels: np.ndarray,
           n_positives: int) -> PrCurve:
    """Shared descending-score threshold sweep with tie grouping."""
    if n_positives == 0:
        return PrCurve((), 0.0, 0)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.int64)
    ends = np.append(np.nonzero(np.diff(s))[0], len(s) - 1)
    tp = np.cumsum(y)[ends]
    k = ends + 1
    precision = tp / k
    recall = tp / n_positives
    # integer TP deltas and one final division keep a perfect ranking's
    # AP at exactly 1.0
    delta_tp = np.diff(np.concatenate([[0], tp]))
    ap = float(np.sum(delta_tp * precision) / n_positives)
    points = tuple(zip(s[ends].tolist(), precision.tolist(),
                       recall.tolist()))
    return PrCurve(points, ap, n_positives)


def protocol1(query_indices, candidates, gt: LoopGroundtruth) -> PrCurve:
    """PR sweep over each scan's best retrieval candidate.

    ``candidates`` holds at most one ScoredPair per query; queries with no
    entry never predict a loop but still count toward recall's denominator
    when a true loop existed for them. Labels are derived from ``gt`` (the
    pairs' own flags are ignored here), so retrieval output cannot
    mislabel itself.
    """
    queries = list(query_indices)
    if not queries:
        raise ValueError("protocol 1 needs a non-empty scan sequence")
    query_set = set(queries)
    scores, labels = [], []
    seen = set()
    for pair in candidates:
        if pair.query_index not in query_set:
            raise ValueError(f"candidate for unknown query "
                             f"{pair.query_index}")
        if pair.query_index in seen:
            raise ValueError(f"multiple candidates for query "
                             f"{pair.query_index}")
        seen.add(pair.query_index)
        if pair.candidate_index > pair.query_index - gt.exclusion_window:
            raise ValueError(
                f"candidate {pair.candidate_index} violates the exclusion "
                f"window of query {pair.query_index}"
            )
        scores.append(pair.score)
        labels.append((pair.query_index, pair.candidate_index) in gt.pairs)
    with_loops = gt.queries_with_loops()
    n_positives = sum(q in with_loops for q in queries)
    if not scores or n_positives == 0:
        return PrCurve((), 0.0, n_positives)
    return _sweep(np.array(scores), np.array(labels), n_positives)


def protocol2(pairs) -> PrCurve:
    """PR sweep treating every eligible pair as a binary decision."""
    pairs = list(pairs)
    if not pairs:
        return PrCurve((), 0.0, 0)
    scores = np.array([p.score for p in pairs])
    labels = np.array([p.is_true_loop for p in pairs])
    return _sweep(scores, labels, int(labels.sum()))


def score_all_pairs(vectors, gt: LoopGroundtruth):
    """Every eligible (query, candidate) pair scored by -L2 distance.

    ``vectors`` is the (n, dim) array of global descriptors in scan order;
    the enumeration mirrors the groundtruth labeling: strictly more than
    ``exclusion_window`` scans apart.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) != gt.num_scans:
        raise ValueError("need one descriptor row per groundtruth scan")
    out = []
    for i in range(gt.exclusion_window + 1, len(vectors)):
        cutoff = i - gt.exclusion_window - 1
        dists = np.linalg.norm(vectors[:cutoff + 1] - vectors[i], axis=1)
        for j, d in enumerate(dists):
            out.append(ScoredPair(i, j, -float(d), (i, j) in gt.pairs))
    return out


def registration_stats(results) -> RegistrationStats:
    """Aggregate (PoseError, success flag) pairs into Table-style stats."""
    results = list(results)
    if not results:
        raise ValueError("registration_stats needs at least one result")
    te = np.array([err.translation_error for err, _ in results])
    re = np.array([err.rotation_error for err, _ in results])
    ok = np.array([bool(flag) for _, flag in results])
    rate = float(ok.mean())
    te_succ = float(te[ok].mean()) if ok.any() else None
    re_succ = float(re[ok].mean()) if ok.any() else None
    return RegistrationStats(rate, te_succ, float(te.mean()), re_succ,
                             float(re.mean()))


def timing_report(timings) -> dict:
    """Median and p95 wall-clock per pipeline stage, skipping empty ones."""
    report = {}
    for stage in sorted(timings):
        samples = np.asarray(timings[stage], dtype=np.float64)
        if samples.size == 0:
            continue
        report[stage] = StageTiming(
            count=int(samples.size),
            median_s=float(np.median(samples)),
            p95_s=float(np.percentile(samples, 95)),
        )
    return report


def _value_or_dash(x) -> str:
    return "-" if x is None else repr(float(x))


def _as_stage_timings(timing) -> dict:
    if all(isinstance(v, StageTiming) for v in timing.values()):
        return dict(sorted(timing.items()))
    return timing_report(timing)


def emit_report(curve: PrCurve, stats=None, timing=None, path="report.csv"):
    """Write the curve (plus optional stats/timing) as CSV and an SVG plot.

    The CSV (schema version 1) has columns kind, key, threshold, precision,
    recall, value: one ``point`` row per curve point, one ``summary`` row
    carrying the AP (or a ``no positives`` marker for an empty curve with
    attachments), then optional ``stat``/``timing`` rows. ``timing`` may be
    raw per-stage samples or an already-built timing report. The SVG PR
    plot lands next to the CSV with the same stem; an empty curve produces
    no SVG. Returns ``(csv_path, svg_path or None)``.
    """
    path = os.fspath(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_REPORT_HEADER)
        for threshold, precision, recall in curve.points:
            writer.writerow(["point", "", repr(threshold), repr(precision),
                             repr(recall), ""])
        if curve.points:
            writer.writerow(["summary", "ap", "", "", "", repr(curve.ap)])
        elif stats is not None or timing is not None:
            writer.writerow(["summary", "no positives", "", "", "", ""])
        if stats is not None:
            for key in ("success_rate", "te_succ", "te_all", "re_succ",
                        "re_all"):
                writer.writerow(["stat", key, "", "", "",
                                 _value_or_dash(getattr(stats, key))])
        if timing is not None:
            for stage, t in _as_stage_timings(timing).items():
                writer.writerow(["timing", f"{stage}.count", "", "", "",
                                 str(t.count)])
                writer.writerow(["timing", f"{stage}.median_s", "", "", "",
                                 repr(t.median_s)])
                writer.writerow(["timing", f"{stage}.p95_s", "", "", "",
                                 repr(t.p95_s)])

    svg_path = None
    if curve.points:
        svg_path = os.path.splitext(path)[0] + ".svg"
        _plot_curve(curve, svg_path)
    return path, svg_path


def _plot_curve(curve: PrCurve, svg_path: str) -> None:
    import matplotlib
    from matplotlib.figure import Figure

    recalls = [p[2] for p in curve.points]
    precisions = [p[1] for p in curve.points]
    fig = Figure(figsize=(5.0, 4.0))
    ax = fig.add_subplot()
    ax.plot(recalls, precisions, drawstyle="steps-post", color="tab:blue")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"precision-recall (AP = {curve.ap:.4f})")
    with matplotlib.rc_context({"svg.hashsalt": "pr-curve",
                                "svg.fonttype": "none"}):
        fig.savefig(svg_path, format="svg", metadata={"Date": None})


def read_report_csv(path):
    """Re-parse an emitted report's curve: ``(points, ap)``.

    Floats were written with ``repr`` so the values come back exactly.
    An empty report (header only, or a "no positives" marker) parses to
    ``((), 0.0)``.
    """
    points = []
    ap = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(_REPORT_HEADER):
            raise ValueError(f"unexpected report header: {header}")
        for row in reader:
            if row[0] == "point":
                points.append((float(row[2]), float(row[3]),
                               float(row[4])))
            elif row[0] == "summary" and row[1] == "ap":
                ap = float(row[5])
    if not points:
        if ap is not None:
            raise ValueError("summary ap present without curve points")
        return (), 0.0
    if ap is None:
        raise ValueError("report has points but no summary ap row")
    return tuple(points), ap
