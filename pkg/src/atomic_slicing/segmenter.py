"""Boundary proposal backends and projection onto valid partitions.

A backend is any object with a ``backend_id`` attribute and a
``propose(request, episode) -> RawProposal`` method. Raw proposals may break
every constraint; :func:`project_to_valid` repairs contiguity and coverage.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .ingest import GRIPPER_CHANNEL, Episode, KeyframeSet, StateSummary, summarize_state
from .remote import JsonServiceClient, MalformedResponse
from .schema import ActionSchema, Plan, min_duration

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class MissingRecording(BackendError):
    pass


class MalformedProposal(BackendError):
    pass


@dataclass(frozen=True)
class SegmentationRequest:
    episode_id: str
    instruction: str
    plan_labels: tuple[str, ...]
    schema_name: str
    keyframes: KeyframeSet
    state_summaries: tuple[StateSummary, ...] = ()
    fewshot: tuple[str, ...] = ()
    T: int = 0
    scene_symbols: tuple[str, ...] = ()
    schema_options: tuple[str, ...] = ()
    task_id: str = ""
    run_tag: str = "j0"

    def __post_init__(self):
        if not self.plan_labels:
            raise ValueError("plan_labels must be nonempty")
        if self.keyframes.num_frames != self.T:
            raise ValueError("keyframes do not belong to an episode of this length")

    @property
    def K(self) -> int:
        return len(self.plan_labels)

    def to_payload(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "task_id": self.task_id,
            "instruction": self.instruction,
            "scene_symbols": list(self.scene_symbols),
            "schema_name": self.schema_name,
            "schema_options": list(self.schema_options),
            "plan_labels": list(self.plan_labels),
            "keyframes": list(self.keyframes.indices),
            "state_summaries": [s.to_dict() for s in self.state_summaries],
            "fewshot": list(self.fewshot),
            "T": self.T,
            "run_tag": self.run_tag,
        }


@dataclass(frozen=True)
class ProposedStep:
    label: str
    t_s: int
    t_e: int
    score: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "start": self.t_s, "end": self.t_e, "score": self.score}


@dataclass(frozen=True)
class RawProposal:
    episode_id: str
    steps: tuple[ProposedStep, ...]
    backend_id: str = ""
    run_tag: str = ""

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.steps)

    @property
    def spans(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.t_s, s.t_e) for s in self.steps)

    @property
    def scores(self) -> tuple[float | None, ...]:
        return tuple(s.score for s in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {"steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, body: Any, episode_id: str, backend_id: str = "", run_tag: str = "") -> "RawProposal":
        """Parse ``{"steps": [{label, start, end, score?}, ...]}``; raise MalformedProposal otherwise."""
        if not isinstance(body, dict) or not isinstance(body.get("steps"), list):
            raise MalformedProposal(f"{episode_id}: response lacks a 'steps' list")
        steps = []
        for i, st in enumerate(body["steps"]):
            if not isinstance(st, dict):
                raise MalformedProposal(f"{episode_id}: step {i} is not an object")
            label, start, end, score = st.get("label"), st.get("start"), st.get("end"), st.get("score")
            if not isinstance(label, str):
                raise MalformedProposal(f"{episode_id}: step {i} lacks a label")
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (start, end)):
                raise MalformedProposal(f"{episode_id}: step {i} start/end must be integers")
            if score is not None:
                if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
                    raise MalformedProposal(f"{episode_id}: step {i} score must lie in [0, 1]")
                score = float(score)
            steps.append(ProposedStep(label, start, end, score))
        return cls(episode_id, tuple(steps), backend_id, run_tag)


@dataclass(frozen=True)
class Boundaries:
    spans: tuple[tuple[int, int], ...]

    @property
    def K(self) -> int:
        return len(self.spans)

    @property
    def durations(self) -> tuple[int, ...]:
        return tuple(e - s + 1 for s, e in self.spans)

    def is_partition(self, T: int) -> bool:
        if not self.spans:
            return False
        if self.spans[0][0] != 1 or self.spans[-1][1] != T:
            return False
        if any(s > e for s, e in self.spans):
            return False
        return all(a[1] + 1 == b[0] for a, b in zip(self.spans, self.spans[1:]))


def build_request(
    episode: Episode,
    plan: Plan,
    schema: ActionSchema,
    keyframes: KeyframeSet,
    fewshot: Sequence[str] = (),
    channels: Sequence[str] | None = None,
    run_tag: str = "j0",
) -> SegmentationRequest:
    if keyframes.num_frames != episode.num_frames:
        raise ValueError("keyframes were selected for a different episode length")
    summaries = tuple(summarize_state(episode, t, channels) for t in keyframes.indices)
    options = tuple(f"{o.name}({', '.join(f'{n} - {t}' for n, t in o.params)})" for o in schema.options)
    return SegmentationRequest(
        episode_id=episode.episode_id,
        instruction=episode.instruction,
        plan_labels=plan.labels,
        schema_name=schema.name,
        keyframes=keyframes,
        state_summaries=summaries,
        fewshot=tuple(fewshot),
        T=episode.num_frames,
        scene_symbols=tuple(n for n, _ in episode.scene.objects),
        schema_options=options,
        task_id=plan.task_id,
        run_tag=run_tag,
    )


# -- heuristic backend -------------------------------------------------------


def uniform_partition(T: int, K: int) -> list[tuple[int, int]]:
    if K > T:
        raise ValueError(f"cannot split {T} frames into {K} nonempty spans")
    ends = [k * T // K for k in range(1, K)] + [T]
    starts = [1] + [e + 1 for e in ends[:-1]]
    return list(zip(starts, ends))


def segment_heuristic(
    request: SegmentationRequest,
    episode: Episode,
    min_separation: int = 2,
    event_threshold: float = 0.2,
    channel: str = GRIPPER_CHANNEL,
    backend_id: str = "heuristic",
) -> RawProposal:
    """Place the K-1 internal boundaries at the strongest gripper-width changes.

    An event at frame t is |g[t+1] - g[t]| and ends a segment at t. Events
    weaker than ``event_threshold`` times the strongest one are ignored.
    Boundaries are chosen greedily by magnitude with every segment at least
    ``min_separation`` frames long; when fewer than K-1 fit, the episode is
    split uniformly with score 0.5.
    """
    T, K = episode.num_frames, request.K
    if K > T:
        raise ValueError(f"cannot split {T} frames into {K} nonempty spans")
    sep = max(1, min_separation)
    chosen: list[int] = []
    mags = np.zeros(0)
    values = episode.state_channels.get(channel)
    if values is not None and K > 1:
        mags = np.abs(np.diff(values))
        peak = mags.max() if mags.size else 0.0
        if peak > 0:
            mags = mags / peak
            candidates = sorted(np.flatnonzero(mags >= event_threshold), key=lambda i: (-mags[i], i))
            for i in candidates:
                t = int(i) + 1
                if t < sep or T - t < sep or any(abs(t - c) < sep for c in chosen):
                    continue
                chosen.append(t)
                if len(chosen) == K - 1:
                    break

    if K == 1:
        spans, scores = [(1, T)], [1.0]
    elif len(chosen) < K - 1:
        spans, scores = uniform_partition(T, K), [0.5] * K
    else:
        ends = sorted(chosen)
        starts = [1] + [e + 1 for e in ends]
        spans = list(zip(starts, ends + [T]))
        strength = [float(mags[e - 1]) for e in ends]
        scores = []
        for k in range(K):
            around = strength[max(k - 1, 0) : k + 1]
            scores.append(float(np.mean(around)))
    steps = tuple(ProposedStep(lbl, s, e, sc) for lbl, (s, e), sc in zip(request.plan_labels, spans, scores))
    return RawProposal(request.episode_id, steps, backend_id, request.run_tag)


class HeuristicBackend:
    """Deterministic gripper-event baseline; separation defaults to the plan's smallest d_min."""

    def __init__(self, schema: ActionSchema | None = None, event_threshold: float = 0.2, backend_id: str = "heuristic"):
        self.schema = schema
        self.event_threshold = event_threshold
        self.backend_id = backend_id

    def propose(self, request: SegmentationRequest, episode: Episode) -> RawProposal:
        sep = min_duration(self.schema, request.plan_labels) if self.schema is not None else 2
        return segment_heuristic(request, episode, sep, self.event_threshold, backend_id=self.backend_id)


# -- replay backend ----------------------------------------------------------


class ReplayStore:
    """Recorded proposals keyed ``"episode_id/backend/run_tag"``.

    Entries are parsed lazily, so one malformed recording only fails its own
    lookup.
    """

    def __init__(self, entries: Mapping[str, Any] | None = None):
        self._entries: dict[str, Any] = dict(entries or {})

    @staticmethod
    def key(episode_id: str, backend_id: str, run_tag: str) -> str:
        return f"{episode_id}/{backend_id}/{run_tag}"

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, episode_id: str, backend_id: str, run_tag: str) -> RawProposal:
        key = self.key(episode_id, backend_id, run_tag)
        try:
            body = self._entries[key]
        except KeyError:
            raise MissingRecording(f"no recorded response for {key!r}") from None
        return RawProposal.from_dict(body, episode_id, backend_id, run_tag)

    def record(self, proposal: RawProposal) -> None:
        self._entries[self.key(proposal.episode_id, proposal.backend_id, proposal.run_tag)] = proposal.to_dict()

    def put_raw(self, episode_id: str, backend_id: str, run_tag: str, body: Any) -> None:
        self._entries[self.key(episode_id, backend_id, run_tag)] = body

    def to_dict(self) -> dict[str, Any]:
        return dict(sorted(self._entries.items()))

    @classmethod
    def load(cls, path) -> "ReplayStore":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("replay store must be a JSON object")
        return cls(data)


def segment_replay(request: SegmentationRequest, store: ReplayStore, backend_id: str = "replay") -> RawProposal:
    return store.get(request.episode_id, backend_id, request.run_tag)


class ReplayBackend:
    def __init__(self, store: ReplayStore, backend_id: str = "replay"):
        self.store = store
        self.backend_id = backend_id

    def propose(self, request: SegmentationRequest, episode: Episode | None = None) -> RawProposal:
        return segment_replay(request, self.store, self.backend_id)


# -- remote backend ----------------------------------------------------------


def segment_remote(
    request: SegmentationRequest,
    endpoint: str | JsonServiceClient,
    anchored: bool = False,
    backend_id: str = "remote",
    timeout: float = 60.0,
    retries: int = 2,
    transport=None,
) -> RawProposal:
    """POST the request to a segmentation service and parse its reply.

    With ``anchored`` the service's labels are replaced positionally by the
    plan labels; otherwise they are kept for the order check.
    """
    if isinstance(endpoint, JsonServiceClient):
        body = endpoint.post(request.to_payload())
    else:
        with JsonServiceClient(endpoint, timeout=timeout, retries=retries, transport=transport) as client:
            body = client.post(request.to_payload())
    try:
        proposal = RawProposal.from_dict(body, request.episode_id, backend_id, request.run_tag)
    except MalformedProposal as exc:
        raise MalformedResponse(str(exc)) from None
    if anchored:
        steps = tuple(
            ProposedStep(request.plan_labels[k], st.t_s, st.t_e, st.score) if k < request.K else st
            for k, st in enumerate(proposal.steps)
        )
        proposal = RawProposal(proposal.episode_id, steps, backend_id, request.run_tag)
    return proposal


class RemoteBackend:
    def __init__(
        self,
        endpoint: str,
        anchored: bool = False,
        timeout: float = 60.0,
        retries: int = 2,
        transport=None,
        backend_id: str = "remote",
    ):
        self.client = JsonServiceClient(endpoint, timeout=timeout, retries=retries, transport=transport)
        self.anchored = anchored
        self.backend_id = backend_id

    def propose(self, request: SegmentationRequest, episode: Episode | None = None) -> RawProposal:
        return segment_remote(request, self.client, self.anchored, self.backend_id)


# -- projection --------------------------------------------------------------


def _isotonic(values: Sequence[float]) -> list[float]:
    """Least-squares non-decreasing fit (pool adjacent violators)."""
    blocks: list[list[float]] = []  # [mean, count]
    for v in values:
        blocks.append([float(v), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, n2 = blocks.pop()
            m1, n1 = blocks.pop()
            blocks.append([(m1 * n1 + m2 * n2) / (n1 + n2), n1 + n2])
    out: list[float] = []
    for mean, count in blocks:
        out.extend([mean] * int(count))
    return out


def project_to_valid(raw: RawProposal | Sequence[tuple[int, int]], T: int, K: int) -> Boundaries:
    """Map K arbitrary spans onto the nearest contiguous partition of [1, T].

    Steps: clamp each span into [1, T] (reversed spans are swapped); order
    spans by midpoint, stable in step order; put the boundary between
    neighbours at the floor of the midpoint of their conflicting region
    (overlap or gap); pin the first start to 1 and the last end to T; if
    boundaries then cross or leave an empty span, move them the least-squares
    minimal amount to restore strictly increasing ends.
    """
    spans = list(raw.spans if isinstance(raw, RawProposal) else raw)
    if len(spans) != K:
        raise ValueError(f"projection needs exactly {K} steps, got {len(spans)}")
    if K < 1:
        raise ValueError("projection needs at least one step")
    if K > T:
        raise ValueError(f"cannot split {T} frames into {K} nonempty spans")

    def clamp(t: int) -> int:
        return min(max(int(t), 1), T)

    clamped = []
    for s, e in spans:
        s, e = clamp(s), clamp(e)
        clamped.append((min(s, e), max(s, e)))
    order = sorted(range(K), key=lambda i: (clamped[i][0] + clamped[i][1], i))
    clamped = [clamped[i] for i in order]

    ends = [(clamped[k][1] + clamped[k + 1][0]) // 2 for k in range(K - 1)]
    # strictly increasing ends in [1, T-1] <=> offsets ends[k] - (k+1) non-decreasing in [0, T-K]
    offsets = [b - (k + 1) for k, b in enumerate(ends)]
    if any(x > y for x, y in zip(offsets, offsets[1:])) or any(not 0 <= o <= T - K for o in offsets):
        offsets = [min(max(int(np.floor(o)), 0), T - K) for o in _isotonic(offsets)]
    ends = [o + k + 1 for k, o in enumerate(offsets)] + [T]
    starts = [1] + [e + 1 for e in ends[:-1]]
    return Boundaries(tuple(zip(starts, ends)))
