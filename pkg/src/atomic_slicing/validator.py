"""Acceptance checks, confidence calibration and the re-query loop."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .ingest import Episode, select_keyframes
from .remote import RemoteError
from .schema import ActionSchema, GroundedOption, Plan, normalize_label
from .segmenter import BackendError, Boundaries, RawProposal, build_request, project_to_valid

log = logging.getLogger(__name__)

ACCEPTED = "accepted"
REJECTED = "rejected"
COUNT_FAIL = "CountFail"
ORDER_FAIL = "OrderFail"
DURATION_FAIL = "DurationFail"
BACKEND_FAIL = "BackendFail"

Bounds = tuple[int, int]


def _check_bounds(bounds: Bounds, where: str) -> Bounds:
    d_min, d_max = (int(b) for b in bounds)
    if not 1 <= d_min <= d_max:
        raise ValueError(f"invalid duration bounds {bounds} for {where}: need 1 <= d_min <= d_max")
    return d_min, d_max


@dataclass(frozen=True)
class DurationBounds:
    """Per-option span limits with per-(task, option) overrides.

    Options with no entry fall back to (2, T).
    """

    per_option: Mapping[str, Bounds] = field(default_factory=dict)
    per_task_override: Mapping[tuple[str, str], Bounds] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_option", {k: _check_bounds(v, k) for k, v in self.per_option.items()})
        object.__setattr__(
            self,
            "per_task_override",
            {k: _check_bounds(v, "/".join(k)) for k, v in self.per_task_override.items()},
        )

    def lookup(self, task_id: str, option: str, T: int) -> Bounds:
        if (task_id, option) in self.per_task_override:
            return self.per_task_override[(task_id, option)]
        if option in self.per_option:
            return self.per_option[option]
        return (min(2, T), T)

    @classmethod
    def from_schema(cls, schema: ActionSchema, base: "DurationBounds | None" = None) -> "DurationBounds":
        """Schema-declared bounds, overridden by any entries already in ``base``."""
        per_option = {o.name: o.duration_bounds for o in schema.options if o.duration_bounds is not None}
        overrides: Mapping[tuple[str, str], Bounds] = {}
        if base is not None:
            per_option.update(base.per_option)
            overrides = base.per_task_override
        return cls(per_option, overrides)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DurationBounds":
        """``{"options": {name: [d_min, d_max]}, "tasks": {task_id: {name: [d_min, d_max]}}}``"""
        per_option = {str(k): tuple(v) for k, v in (doc.get("options") or {}).items()}
        overrides = {}
        for task_id, table in (doc.get("tasks") or {}).items():
            for name, b in table.items():
                overrides[(str(task_id), str(name))] = tuple(b)
        return cls(per_option, overrides)

    @classmethod
    def load(cls, path) -> "DurationBounds":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass(frozen=True)
class CalibrationConfig:
    w_model: float = 0.4
    w_slack: float = 0.3
    w_jitter: float = 0.3
    renormalize_on_missing: bool = True

    def __post_init__(self):
        weights = (self.w_model, self.w_slack, self.w_jitter)
        if min(weights) < 0 or sum(weights) <= 0:
            raise ValueError("calibration weights must be >= 0 with a positive sum")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CalibrationConfig":
        return cls(**{k: doc[k] for k in ("w_model", "w_slack", "w_jitter", "renormalize_on_missing") if k in doc})

    @classmethod
    def load(cls, path) -> "CalibrationConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass(frozen=True)
class ValidatedSegment:
    label: GroundedOption
    t_s: int
    t_e: int
    confidence: float
    score: float | None = None
    slack: float | None = None
    agreement: float | None = None

    def __post_init__(self):
        if self.t_s > self.t_e:
            raise ValueError("segment start after end")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")

    @property
    def duration(self) -> int:
        return self.t_e - self.t_s + 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": str(self.label),
            "option": self.label.option,
            "args": list(self.label.args),
            "start": self.t_s,
            "end": self.t_e,
            "confidence": self.confidence,
            "score": self.score,
            "slack": self.slack,
            "agreement": self.agreement,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ValidatedSegment":
        return cls(
            GroundedOption(d["option"], tuple(d["args"])),
            d["start"],
            d["end"],
            d["confidence"],
            d.get("score"),
            d.get("slack"),
            d.get("agreement"),
        )


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: str
    task_id: str
    num_frames: int
    status: str
    reason: str | None = None
    failed_step: int | None = None
    segments: tuple[ValidatedSegment, ...] = ()
    attempts: int = 1
    plan_labels: tuple[str, ...] = ()
    # last primary proposal: its labels and spans (projected when possible)
    pred_labels: tuple[str, ...] = ()
    pred_spans: tuple[tuple[int, int], ...] = ()
    # projected spans of the jitter run; None when it was not performed
    jitter_spans: tuple[tuple[int, int], ...] | None = None

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED

    @property
    def K(self) -> int:
        return len(self.plan_labels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "task_id": self.task_id,
            "num_frames": self.num_frames,
            "status": self.status,
            "reason": self.reason,
            "failed_step": self.failed_step,
            "attempts": self.attempts,
            "plan_labels": list(self.plan_labels),
            "segments": [s.to_dict() for s in self.segments],
            "pred_labels": list(self.pred_labels),
            "pred_spans": [list(s) for s in self.pred_spans],
            "jitter_spans": None if self.jitter_spans is None else [list(s) for s in self.jitter_spans],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EpisodeResult":
        jitter = d.get("jitter_spans")
        return cls(
            episode_id=d["episode_id"],
            task_id=d["task_id"],
            num_frames=d["num_frames"],
            status=d["status"],
            reason=d.get("reason"),
            failed_step=d.get("failed_step"),
            segments=tuple(ValidatedSegment.from_dict(s) for s in d.get("segments", [])),
            attempts=d.get("attempts", 1),
            plan_labels=tuple(d.get("plan_labels", [])),
            pred_labels=tuple(d.get("pred_labels", [])),
            pred_spans=tuple(tuple(s) for s in d.get("pred_spans", [])),
            jitter_spans=None if jitter is None else tuple(tuple(s) for s in jitter),
        )


# -- checks ------------------------------------------------------------------


def check_count(raw: RawProposal, K: int) -> bool:
    return len(raw.steps) == K


def check_order(raw: RawProposal, plan: Plan) -> bool:
    """Labels equal the plan positionally and start times increase strictly."""
    labels = [normalize_label(lbl) for lbl in raw.labels]
    if labels != [normalize_label(lbl) for lbl in plan.labels]:
        return False
    starts = [s.t_s for s in raw.steps]
    return all(a < b for a, b in zip(starts, starts[1:]))


def check_duration(spans: Boundaries, plan: Plan, bounds: DurationBounds, task_id: str | None = None) -> int | None:
    """Index of the first step whose length leaves its bounds, or None if all fit."""
    task_id = plan.task_id if task_id is None else task_id
    T = spans.spans[-1][1] if spans.spans else 0
    for k, (step, d) in enumerate(zip(plan.steps, spans.durations)):
        d_min, d_max = bounds.lookup(task_id, step.option, T)
        if not d_min <= d <= d_max:
            return k
    return None


def duration_slack(d: int, bounds: Bounds) -> float:
    """Normalised distance of ``d`` from the nearer bound: 1 at the midpoint, 0 at a bound."""
    d_min, d_max = bounds
    if not d_min <= d <= d_max:
        raise ValueError(f"duration {d} outside bounds {bounds}")
    if d_min == d_max:
        return 1.0
    return min(max(2.0 * min(d - d_min, d_max - d) / (d_max - d_min), 0.0), 1.0)


def interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive integer frame intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    len_a, len_b = a[1] - a[0] + 1, b[1] - b[0] + 1
    if len_a <= 0 or len_b <= 0:
        raise ValueError(f"invalid intervals {a}, {b}")
    inter = max(inter, 0)
    return inter / (len_a + len_b - inter)


def _spans(x: Boundaries | Sequence[tuple[int, int]]) -> Sequence[tuple[int, int]]:
    return x.spans if isinstance(x, Boundaries) else x


def jitter_agreement(
    run0: Boundaries | Sequence[tuple[int, int]], run2: Boundaries | Sequence[tuple[int, int]]
) -> list[float]:
    """Per-step IoU between two runs, paired by index; unmatched steps score 0."""
    a, b = _spans(run0), _spans(run2)
    out = [interval_iou(x, y) for x, y in zip(a, b)]
    return out + [0.0] * (max(len(a), len(b)) - len(out))


def calibrate_confidence(
    score: float | None, slack: float | None, agreement: float | None, cfg: CalibrationConfig = CalibrationConfig()
) -> float:
    """Weighted blend of model score, duration slack and jitter agreement.

    Missing inputs are dropped with renormalisation when
    ``cfg.renormalize_on_missing``; otherwise they count as 0.
    """
    terms = [(cfg.w_model, score), (cfg.w_slack, slack), (cfg.w_jitter, agreement)]
    if all(v is None for _, v in terms):
        raise ValueError("calibration needs at least one input")
    if cfg.renormalize_on_missing:
        terms = [(w, v) for w, v in terms if v is not None]
    total = sum(w for w, _ in terms)
    if total <= 0:
        raise ValueError("no positive weight on the available inputs")
    value = sum(w * (v if v is not None else 0.0) for w, v in terms) / total
    return min(max(value, 0.0), 1.0)


# -- episode loop ------------------------------------------------------------


def run_tag(jitter: int, attempt: int) -> str:
    return f"j{jitter}" if attempt == 0 else f"j{jitter}-r{attempt}"


def keyframe_seed(seed: int, episode_id: str, attempt: int, run: int) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(episode_id.encode()), attempt, run])
    return int(ss.generate_state(1)[0])


def project_proposal(raw: RawProposal, T: int) -> tuple[tuple[int, int], ...]:
    """Spans of ``raw`` projected with its own step count; raw spans if that is impossible."""
    n = len(raw.steps)
    if 1 <= n <= T:
        return project_to_valid(raw, T, n).spans
    return raw.spans


def validate_episode(
    episode: Episode,
    plan: Plan,
    backend,
    bounds: DurationBounds,
    cfg: CalibrationConfig,
    retries: int = 2,
    *,
    schema: ActionSchema,
    budget: int = 8,
    jitter: int = 2,
    seed: int = 0,
    fewshot: Sequence[str] = (),
) -> EpisodeResult:
    """Query, check and score one episode, re-querying up to ``retries`` times.

    Each attempt runs Count, Order, then Duration on the jitter-0 proposal;
    an accepted proposal gets a second, jittered query whose agreement feeds
    the confidences. A rejection reports the first failing check of the
    last attempt.
    """
    T, K = episode.num_frames, plan.K
    base = dict(
        episode_id=episode.episode_id, task_id=plan.task_id, num_frames=T, plan_labels=plan.labels
    )
    if K > T:
        return EpisodeResult(**base, status=REJECTED, reason=DURATION_FAIL, attempts=0)

    outcome: dict[str, Any] = {}
    for attempt in range(retries + 1):
        kf = select_keyframes(episode, budget, 0, keyframe_seed(seed, episode.episode_id, attempt, 0))
        request = build_request(episode, plan, schema, kf, fewshot, run_tag=run_tag(0, attempt))
        try:
            raw = backend.propose(request, episode)
        except (BackendError, RemoteError) as exc:
            log.info("%s attempt %d: backend failure: %s", episode.episode_id, attempt + 1, exc)
            outcome = dict(reason=BACKEND_FAIL, failed_step=None, pred_labels=(), pred_spans=())
            continue
        outcome = dict(pred_labels=raw.labels, pred_spans=project_proposal(raw, T), failed_step=None)
        if not check_count(raw, K):
            outcome["reason"] = COUNT_FAIL
            continue
        if not check_order(raw, plan):
            outcome["reason"] = ORDER_FAIL
            continue
        spans = project_to_valid(raw, T, K)
        failed = check_duration(spans, plan, bounds)
        if failed is not None:
            outcome.update(reason=DURATION_FAIL, failed_step=failed)
            continue

        kf2 = select_keyframes(episode, budget, jitter, keyframe_seed(seed, episode.episode_id, attempt, 1))
        request2 = build_request(episode, plan, schema, kf2, fewshot, run_tag=run_tag(jitter, attempt))
        try:
            jittered = project_proposal(backend.propose(request2, episode), T)
        except (BackendError, RemoteError) as exc:
            log.warning("%s: jittered run failed, agreement scored 0: %s", episode.episode_id, exc)
            jittered = ()
        agreement = jitter_agreement(spans, jittered)
        segments = []
        for k, (step, (t_s, t_e)) in enumerate(zip(plan.steps, spans.spans)):
            slack = duration_slack(t_e - t_s + 1, bounds.lookup(plan.task_id, step.option, T))
            score = raw.steps[k].score
            c = calibrate_confidence(score, slack, agreement[k], cfg)
            segments.append(ValidatedSegment(step, t_s, t_e, c, score, slack, agreement[k]))
        return EpisodeResult(
            **base,
            status=ACCEPTED,
            segments=tuple(segments),
            attempts=attempt + 1,
            pred_labels=raw.labels,
            pred_spans=spans.spans,
            jitter_spans=tuple(jittered),
        )
    return EpisodeResult(**base, status=REJECTED, attempts=retries + 1, **outcome)
