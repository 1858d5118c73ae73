"""Sequence, temporal and concordance metrics for segmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .schema import Plan, normalize_label
from .segmenter import RawProposal
from .validator import EpisodeResult, interval_iou, jitter_agreement

__all__ = [
    "MetricsReport",
    "ReferenceSegmentation",
    "aggregate_report",
    "cnt_ord",
    "edit_sim",
    "interval_iou",
    "iou_idx",
    "kendalls_w",
    "levenshtein",
    "mae",
    "seq_acc",
    "stability_at_jitter",
]

Span = tuple[int, int]


@dataclass(frozen=True)
class ReferenceSegmentation:
    episode_id: str
    steps: tuple[tuple[str, int, int], ...]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s[0] for s in self.steps)

    @property
    def spans(self) -> tuple[Span, ...]:
        return tuple((s[1], s[2]) for s in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "steps": [{"label": lbl, "start": s, "end": e} for lbl, s, e in self.steps],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ReferenceSegmentation":
        return cls(str(d["episode_id"]), tuple((str(s["label"]), int(s["start"]), int(s["end"])) for s in d["steps"]))


def seq_acc(pred_labels: Sequence[str], ref_labels: Sequence[str]) -> int:
    return int([normalize_label(x) for x in pred_labels] == [normalize_label(x) for x in ref_labels])


def levenshtein(a: Sequence[Any], b: Sequence[Any]) -> int:
    """Token-level edit distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_sim(pred_labels: Sequence[str], ref_labels: Sequence[str]) -> float:
    if not pred_labels and not ref_labels:
        raise ValueError("edit similarity undefined for two empty sequences")
    pred = [normalize_label(x) for x in pred_labels]
    ref = [normalize_label(x) for x in ref_labels]
    return 1.0 - levenshtein(pred, ref) / max(len(ref), len(pred))


def cnt_ord(pred: RawProposal | Sequence[str], plan: Plan | Sequence[str]) -> int:
    """1 iff the prediction has K steps whose labels follow the plan order."""
    labels = pred.labels if isinstance(pred, RawProposal) else pred
    planned = plan.labels if isinstance(plan, Plan) else plan
    if len(labels) != len(planned):
        return 0
    return seq_acc(labels, planned)


def iou_idx(pred: Sequence[Span], ref: Sequence[Span]) -> float:
    if not ref:
        raise ValueError("reference segmentation is empty")
    return sum(interval_iou(p, r) for p, r in zip(pred, ref)) / len(ref)


def mae(pred: Sequence[Span], ref: Sequence[Span]) -> tuple[float, float, float] | None:
    """Mean absolute start, end and duration errors; None when counts differ."""
    if len(pred) != len(ref) or not ref:
        return None
    p, r = np.asarray(pred, dtype=float), np.asarray(ref, dtype=float)
    starts = np.abs(p[:, 0] - r[:, 0]).mean()
    ends = np.abs(p[:, 1] - r[:, 1]).mean()
    durs = np.abs((p[:, 1] - p[:, 0]) - (r[:, 1] - r[:, 0])).mean()
    return float(starts), float(ends), float(durs)


def stability_at_jitter(run0: Sequence[Span], run2: Sequence[Span]) -> float:
    agreement = jitter_agreement(run0, run2)
    return float(sum(agreement) / len(agreement)) if agreement else 0.0


def kendalls_w(ratings) -> float:
    """Kendall's coefficient of concordance for an (m raters x n items) matrix.

    Ratings are ranked per rater with average ranks for ties, and the
    denominator carries the usual tie correction.
    """
    x = np.asarray(ratings, dtype=float)
    if x.ndim != 2:
        raise ValueError("ratings must be a 2-D matrix")
    m, n = x.shape
    if m < 2 or n < 2:
        raise ValueError("Kendall's W needs at least 2 raters and 2 items")
    ranks = rankdata(x, axis=1, method="average")
    R = ranks.sum(axis=0)
    S = float(((R - m * (n + 1) / 2.0) ** 2).sum())
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float((counts**3 - counts).sum())
    denom = m * m * (n**3 - n) - m * ties
    if denom <= 0:
        raise ValueError("degenerate ratings: every rater gives all items the same value")
    return min(max(12.0 * S / denom, 0.0), 1.0)


# -- aggregation -------------------------------------------------------------

PER_EPISODE_KEYS = ("seq_acc", "edit_sim", "cnt_ord", "iou_idx", "mae_start", "mae_end", "mae_dur", "stability")


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(math.fsum(vals) / len(vals)) if vals else None


@dataclass
class MetricsReport:
    per_episode: dict[str, dict[str, Any]] = field(default_factory=dict)
    aggregate: dict[str, float | None] = field(default_factory=dict)
    num_episodes: int = 0
    num_accepted: int = 0
    success_rate: float | None = None
    avg_segments: float | None = None
    avg_traj_len: float | None = None
    kendalls_w_mean: float | None = None

    def summary(self) -> dict[str, Any]:
        return {
            "episodes": self.num_episodes,
            "accepted": self.num_accepted,
            "success_rate": self.success_rate,
            "avg_segments": self.avg_segments,
            "avg_traj_len": self.avg_traj_len,
            "kendalls_w_mean": self.kendalls_w_mean,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary(),
            "aggregate": dict(self.aggregate),
            "per_episode": {k: self.per_episode[k] for k in sorted(self.per_episode)},
        }


def _episode_w(runs: Sequence[Sequence[Span]]) -> float | None:
    if len(runs) < 2 or len({len(r) for r in runs}) != 1 or len(runs[0]) < 2:
        return None
    durations = [[e - s + 1 for s, e in r] for r in runs]
    try:
        return kendalls_w(durations)
    except ValueError:
        return None


def aggregate_report(
    results: Sequence[EpisodeResult],
    refs: Mapping[str, ReferenceSegmentation] | None = None,
    runs: Mapping[str, Sequence[Sequence[Span]]] | None = None,
) -> MetricsReport:
    """Fold episode results into per-episode metrics and run-level statistics.

    Kendall's W rates per-step durations with runs as raters; by default the
    runs are each accepted episode's jitter-0 and jittered segmentations.
    """
    report = MetricsReport(num_episodes=len(results))
    if not results:
        return report
    refs = refs or {}
    accepted = [r for r in results if r.accepted]
    report.num_accepted = len(accepted)
    report.success_rate = len(accepted) / len(results)
    report.avg_segments = _mean(len(r.segments) for r in accepted) if accepted else None
    report.avg_traj_len = _mean(r.num_frames for r in results)

    for res in sorted(results, key=lambda r: r.episode_id):
        row: dict[str, Any] = {"status": res.status, "reason": res.reason, "K": res.K, "T": res.num_frames}
        row["stability"] = (
            stability_at_jitter(res.pred_spans, res.jitter_spans) if res.jitter_spans is not None else None
        )
        ep_runs = runs.get(res.episode_id) if runs is not None else None
        if ep_runs is None and res.jitter_spans is not None:
            ep_runs = [res.pred_spans, res.jitter_spans]
        row["kendalls_w"] = _episode_w(ep_runs) if ep_runs else None
        ref = refs.get(res.episode_id)
        if ref is not None:
            row["seq_acc"] = seq_acc(res.pred_labels, ref.labels)
            row["edit_sim"] = edit_sim(res.pred_labels, ref.labels)
            row["cnt_ord"] = cnt_ord(res.pred_labels, res.plan_labels)
            row["iou_idx"] = iou_idx(res.pred_spans, ref.spans)
            errors = mae(res.pred_spans, ref.spans)
            row["mae_start"], row["mae_end"], row["mae_dur"] = errors if errors else (None, None, None)
        report.per_episode[res.episode_id] = row

    rows = list(report.per_episode.values())
    report.aggregate = {k: _mean(row.get(k) for row in rows) for k in PER_EPISODE_KEYS}
    report.kendalls_w_mean = _mean(row["kendalls_w"] for row in rows)
    return report
