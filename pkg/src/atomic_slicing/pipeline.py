"""End-to-end orchestration: plans -> proposals -> validated segments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .ingest import Episode
from .planner import PlannerRequest, PlanningError, PlanRegistry, discover_plan, remote_plan
from .remote import JsonServiceClient, RemoteError
from .schema import ActionSchema, Plan, validate_plan
from .validator import CalibrationConfig, DurationBounds, EpisodeResult, validate_episode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunOptions:
    budget: int = 8
    jitter: int = 2
    retries: int = 2
    seed: int = 0
    fewshot: tuple[str, ...] = ()
    jobs: int = 1


@dataclass(frozen=True)
class PlanFailure:
    episode_id: str
    task_id: str
    error: str
    detail: str

    def to_dict(self) -> dict[str, str]:
        return {"episode_id": self.episode_id, "task_id": self.task_id, "error": self.error, "detail": self.detail}


def resolve_plans(
    episodes: Sequence[Episode],
    schema: ActionSchema,
    registry: PlanRegistry | None = None,
    given: Mapping[str, Plan] | None = None,
    planner: JsonServiceClient | None = None,
) -> tuple[dict[str, Plan], list[PlanFailure]]:
    """Find a validated plan for every episode from exactly one source."""
    plans: dict[str, Plan] = {}
    failures: list[PlanFailure] = []
    for ep in episodes:
        request = PlannerRequest(ep.instruction, ep.scene, schema.name, ep.task_id)
        try:
            if given is not None:
                if ep.episode_id not in given:
                    raise PlanningError(f"no plan recorded for episode {ep.episode_id!r}")
                plan = given[ep.episode_id]
                errors = validate_plan(schema, plan, ep.scene)
                if errors:
                    raise PlanningError("plan fails schema validation: " + "; ".join(map(str, errors)))
            elif planner is not None:
                plan = remote_plan(request, planner, schema)
            elif registry is not None:
                plan = discover_plan(request, registry, schema)
            else:
                raise ValueError("no plan source configured")
        except (PlanningError, RemoteError) as exc:
            failures.append(PlanFailure(ep.episode_id, ep.task_id, type(exc).__name__, str(exc)))
            continue
        plans[ep.episode_id] = plan
    return plans, failures


def run_episodes(
    episodes: Sequence[Episode],
    plans: Mapping[str, Plan],
    backend,
    schema: ActionSchema,
    bounds: DurationBounds,
    cfg: CalibrationConfig,
    opts: RunOptions = RunOptions(),
) -> list[EpisodeResult]:
    """Validate every planned episode; results come back sorted by episode_id."""
    todo = [ep for ep in episodes if ep.episode_id in plans]

    def work(ep: Episode) -> EpisodeResult:
        return validate_episode(
            ep,
            plans[ep.episode_id],
            backend,
            bounds,
            cfg,
            opts.retries,
            schema=schema,
            budget=opts.budget,
            jitter=opts.jitter,
            seed=opts.seed,
            fewshot=opts.fewshot,
        )

    if opts.jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=opts.jobs) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(ep) for ep in todo]
    return sorted(results, key=lambda r: r.episode_id)
