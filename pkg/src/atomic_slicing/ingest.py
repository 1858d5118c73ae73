"""Episode ingestion, keyframe selection and state summaries.

Episode records are JSON lines with the fields ``episode_id``, ``task_id``,
``instruction``, ``num_frames``, ``state_channels`` (name -> list of
``num_frames`` numbers), ``scene`` (``objects``, ``init``, ``goal``) and the
optional ``frame_refs`` and ``actions`` (accepted, ignored). Frames are
1-indexed everywhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .schema import SceneDescription

log = logging.getLogger(__name__)

GRIPPER_CHANNEL = "gripper_width"

__all__ = [
    "Episode",
    "IngestError",
    "KeyframeSet",
    "SceneDescription",
    "StateSummary",
    "parse_episodes",
    "select_keyframes",
    "summarize_state",
]


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class Episode:
    episode_id: str
    task_id: str
    instruction: str
    num_frames: int
    state_channels: Mapping[str, np.ndarray] = field(default_factory=dict)
    scene: SceneDescription = field(default_factory=SceneDescription)
    frame_refs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_frames < 1:
            raise IngestError(f"episode {self.episode_id!r}: num_frames must be >= 1")
        channels = {}
        for name, values in self.state_channels.items():
            arr = np.asarray(values, dtype=float)
            if arr.ndim != 1 or arr.shape[0] != self.num_frames:
                raise IngestError(
                    f"episode {self.episode_id!r}: channel-length mismatch for {name!r} "
                    f"({arr.shape[0] if arr.ndim else 0} != {self.num_frames})"
                )
            arr.setflags(write=False)
            channels[name] = arr
        object.__setattr__(self, "state_channels", channels)
        if self.frame_refs is not None and len(self.frame_refs) != self.num_frames:
            raise IngestError(f"episode {self.episode_id!r}: frame_refs length != num_frames")

    @property
    def T(self) -> int:
        return self.num_frames

    @classmethod
    def from_dict(cls, rec: Mapping[str, Any]) -> "Episode":
        missing = [k for k in ("episode_id", "task_id", "instruction", "num_frames") if k not in rec]
        if missing:
            raise IngestError(f"missing fields {missing}")
        num_frames = rec["num_frames"]
        if not isinstance(num_frames, int) or isinstance(num_frames, bool):
            raise IngestError("num_frames must be an integer")
        refs = rec.get("frame_refs")
        try:
            scene = SceneDescription.from_dict(rec.get("scene") or {})
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(f"bad scene: {exc}") from None
        return cls(
            episode_id=str(rec["episode_id"]),
            task_id=str(rec["task_id"]),
            instruction=str(rec["instruction"]),
            num_frames=num_frames,
            state_channels=dict(rec.get("state_channels") or {}),
            scene=scene,
            frame_refs=tuple(map(str, refs)) if refs is not None else None,
        )

    def to_dict(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "episode_id": self.episode_id,
            "task_id": self.task_id,
            "instruction": self.instruction,
            "num_frames": self.num_frames,
            "state_channels": {k: v.tolist() for k, v in self.state_channels.items()},
            "scene": self.scene.to_dict(),
        }
        if self.frame_refs is not None:
            rec["frame_refs"] = list(self.frame_refs)
        return rec


def parse_episodes(
    lines: Iterable[str], strict: bool = True, errors: list[IngestError] | None = None
) -> list[Episode]:
    """Parse line-delimited episode records.

    In lenient mode bad lines (including duplicate ids) are skipped with a
    warning and appended to ``errors`` when a list is given.
    """
    episodes: list[Episode] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"malformed record: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise IngestError("record must be an object")
            ep = Episode.from_dict(rec)
            if ep.episode_id in seen:
                raise IngestError(f"duplicate episode_id {ep.episode_id!r}")
        except IngestError as exc:
            err = IngestError(exc.message, lineno)
            if strict:
                raise err from None
            log.warning("skipping episode record: %s", err)
            if errors is not None:
                errors.append(err)
            continue
        seen.add(ep.episode_id)
        episodes.append(ep)
    return episodes


def load_episodes(path, strict: bool = True, errors: list[IngestError] | None = None) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return parse_episodes(fh, strict=strict, errors=errors)


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple[int, ...]
    num_frames: int
    jitter_magnitude: int = 0
    seed: int = 0

    def __post_init__(self):
        idx = self.indices
        if not idx or idx[0] != 1 or idx[-1] != self.num_frames:
            raise ValueError("keyframes must include frames 1 and T")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("keyframes must be strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class StateSummary:
    frame: int
    values: Mapping[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {"frame": self.frame, "values": dict(self.values)}


def _grid(T: int, n: int) -> list[int]:
    return sorted({int(round(x)) for x in np.linspace(1, T, n)})


def _event_frames(channel: np.ndarray) -> list[int]:
    """Frames right after a state change, strongest first (z-scored |delta|)."""
    delta = np.abs(np.diff(channel))
    std = delta.std()
    if delta.size == 0 or std == 0:
        return []
    z = (delta - delta.mean()) / std
    # delta[i] is the change between frames i+1 and i+2 (1-indexed)
    order = sorted(np.flatnonzero(z > 0), key=lambda i: (-z[i], i))
    return [int(i) + 2 for i in order]


def select_keyframes(
    episode: Episode, budget: int, jitter: int = 0, seed: int = 0, channel: str = GRIPPER_CHANNEL
) -> KeyframeSet:
    if budget < 2:
        raise ValueError("keyframe budget must be >= 2")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    T = episode.num_frames
    if budget >= T:
        chosen = set(range(1, T + 1))
    else:
        chosen = set(_grid(T, max(2, math.ceil(budget / 2))))
        values = episode.state_channels.get(channel)
        if values is None:
            log.warning("episode %s has no %r channel; using a uniform grid", episode.episode_id, channel)
            events: list[int] = []
        else:
            events = [t for t in _event_frames(values) if 1 < t < T]
        for t in events:
            if len(chosen) >= budget:
                break
            chosen.add(t)
        for t in _grid(T, budget):
            if len(chosen) >= budget:
                break
            chosen.add(t)

    interior = sorted(chosen - {1, T})
    if jitter > 0 and interior:
        rng = np.random.default_rng(seed)
        shifts = rng.integers(-jitter, jitter + 1, size=len(interior))
        interior = [min(max(t + int(s), 2), T - 1) for t, s in zip(interior, shifts)]
    indices = sorted({1, T, *interior})
    return KeyframeSet(tuple(indices), T, jitter, seed)


def summarize_state(episode: Episode, frame: int, channels: Sequence[str] | None = None) -> StateSummary:
    if not 1 <= frame <= episode.num_frames:
        raise IndexError(f"frame {frame} outside [1, {episode.num_frames}]")
    names = list(episode.state_channels) if channels is None else list(channels)
    unknown = [c for c in names if c not in episode.state_channels]
    if unknown:
        raise KeyError(f"unknown channels {unknown}")
    return StateSummary(frame, {c: float(episode.state_channels[c][frame - 1]) for c in names})
