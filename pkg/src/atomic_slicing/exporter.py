"""Downstream artifacts: segment manifests, dataset statistics, PDDL text."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Sequence

from .schema import ActionSchema, Literal, SceneDescription
from .validator import EpisodeResult


@dataclass(frozen=True)
class ManifestEntry:
    episode_id: str
    segment_index: int
    label: str
    args: tuple[str, ...]
    t_s: int
    t_e: int
    confidence: float
    source_task_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "segment_index": self.segment_index,
            "label": self.label,
            "args": list(self.args),
            "start": self.t_s,
            "end": self.t_e,
            "confidence": self.confidence,
            "source_task_id": self.source_task_id,
        }


@dataclass(frozen=True)
class SegmentManifest:
    entries: tuple[ManifestEntry, ...]
    threshold: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def records(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]


def export_manifest(results: Sequence[EpisodeResult], c_min: float = 0.0) -> SegmentManifest:
    entries = []
    for res in sorted(results, key=lambda r: r.episode_id):
        if not res.accepted:
            continue
        for k, seg in enumerate(res.segments):
            if seg.confidence >= c_min:
                entries.append(
                    ManifestEntry(
                        res.episode_id, k, seg.label.option, seg.label.args, seg.t_s, seg.t_e, seg.confidence, res.task_id
                    )
                )
    return SegmentManifest(tuple(entries), c_min)


def suite_of(task_id: str) -> str:
    """Suite name is the task_id prefix before the first '/'."""
    return task_id.split("/", 1)[0]


@dataclass(frozen=True)
class DatasetStats:
    episodes_in: int
    episodes_accepted: int
    segments_out: int
    threshold: float = 0.0
    per_suite: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "episodes_in": self.episodes_in,
            "episodes_accepted": self.episodes_accepted,
            "segments_out": self.segments_out,
            "threshold": self.threshold,
            "per_suite": {s: {"demos": d, "segments": n} for s, (d, n) in sorted(self.per_suite.items())},
        }


def dataset_stats(results: Sequence[EpisodeResult], manifest: SegmentManifest) -> DatasetStats:
    demos = Counter(suite_of(r.task_id) for r in results)
    segments = Counter(suite_of(e.source_task_id) for e in manifest.entries)
    return DatasetStats(
        episodes_in=len(results),
        episodes_accepted=sum(r.accepted for r in results),
        segments_out=len(manifest),
        threshold=manifest.threshold,
        per_suite={s: (demos[s], segments.get(s, 0)) for s in sorted(demos)},
    )


# -- PDDL --------------------------------------------------------------------


def _term(arg: str, variables: set[str]) -> str:
    return f"?{arg}" if arg in variables else arg


def _atom(lit: Literal, variables: set[str]) -> str:
    inner = " ".join([lit.predicate, *(_term(a, variables) for a in lit.args)])
    return f"(not ({inner}))" if lit.negated else f"({inner})"


def _conjunction(atoms: list[str]) -> str:
    return f"(and {' '.join(atoms)})" if atoms else "(and)"


def emit_pddl_domain(schema: ActionSchema) -> str:
    """STRIPS domain with one action per option type, in declaration order."""
    requirements = [":strips", ":typing"]
    if any(lit.negated for opt in schema.options for lit in opt.preconditions):
        requirements.append(":negative-preconditions")
    lines = [f"(define (domain {schema.name})", f"  (:requirements {' '.join(requirements)})"]
    lines.append(f"  (:types {' '.join(schema.object_types)})" if schema.object_types else "  (:types)")
    if schema.constants:
        lines.append(f"  (:constants {' '.join(f'{n} - {t}' for n, t in schema.constants)})")
    if schema.predicates:
        lines.append("  (:predicates")
        for name, arity in schema.predicates:
            params = "".join(f" ?x{i}" for i in range(1, arity + 1))
            lines.append(f"    ({name}{params})")
        lines.append("  )")
    else:
        lines.append("  (:predicates)")
    for opt in schema.options:
        variables = set(opt.param_names)
        params = " ".join(f"?{n} - {t}" for n, t in opt.params)
        pre = [_atom(lit, variables) for lit in opt.preconditions]
        eff = [_atom(lit, variables) for lit in opt.add_effects]
        eff += [_atom(Literal(lit.predicate, lit.args, True), variables) for lit in opt.del_effects]
        lines += [
            f"  (:action {opt.name}",
            f"    :parameters ({params})",
            f"    :precondition {_conjunction(pre)}",
            f"    :effect {_conjunction(eff)}",
            "  )",
        ]
    lines.append(")")
    return "\n".join(lines) + "\n"


def emit_pddl_problem(scene: SceneDescription, domain_name: str, problem_name: str = "problem") -> str:
    if any(lit.negated for lit in scene.init):
        raise ValueError("negated literal in :init (the initial state is closed-world)")
    if not scene.goal:
        raise ValueError("empty goal")
    no_vars: set[str] = set()
    lines = [f"(define (problem {problem_name})", f"  (:domain {domain_name})"]
    lines.append(f"  (:objects {' '.join(f'{n} - {t}' for n, t in scene.objects)})")
    lines.append(f"  (:init {' '.join(_atom(lit, no_vars) for lit in scene.init)})" if scene.init else "  (:init)")
    lines.append(f"  (:goal {_conjunction([_atom(lit, no_vars) for lit in scene.goal])})")
    lines.append(")")
    return "\n".join(lines) + "\n"
