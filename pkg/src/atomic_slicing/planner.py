"""Plan discovery: map an instruction and scene to an ordered atomic plan.

The default planner is a template registry (YAML)::

    tasks:
      libero_10/put_bowl_in_drawer:
        instructions: [put the bowl in the drawer and close it]
        steps: [pick_up(bowl), place_in(bowl, drawer), close(drawer)]

Template arguments are object *types*; each is bound to the unique scene
object of that type.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .remote import JsonServiceClient, MalformedResponse
from .schema import ActionSchema, GroundedOption, Plan, PlanError, SceneDescription, validate_plan


class PlanningError(ValueError):
    pass


class UnknownTask(PlanningError):
    pass


class GroundingError(PlanningError):
    pass


class PlanValidationError(PlanningError):
    def __init__(self, errors: list[PlanError]):
        self.errors = errors
        super().__init__("plan fails schema validation: " + "; ".join(map(str, errors)))


@dataclass(frozen=True)
class PlanTemplate:
    task_id: str
    steps: tuple[GroundedOption, ...]  # args are object types
    instructions: tuple[str, ...] = ()


def _norm_instruction(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower().rstrip("."))


@dataclass(frozen=True)
class PlanRegistry:
    entries: Mapping[str, PlanTemplate] = field(default_factory=dict)

    def lookup(self, task_id: str | None, instruction: str = "") -> PlanTemplate:
        if task_id is not None:
            try:
                return self.entries[task_id]
            except KeyError:
                raise UnknownTask(f"unknown task_id {task_id!r}") from None
        key = _norm_instruction(instruction)
        for tmpl in self.entries.values():
            if key in map(_norm_instruction, tmpl.instructions):
                return tmpl
        raise UnknownTask(f"no task registered for instruction {instruction!r}")

    def check(self, schema: ActionSchema) -> None:
        """Raise PlanningError unless every template step fits the schema."""
        for tmpl in self.entries.values():
            for k, step in enumerate(tmpl.steps):
                try:
                    opt = schema.option(step.option)
                except KeyError:
                    raise PlanningError(f"{tmpl.task_id} step {k}: unknown option {step.option!r}") from None
                if step.args != opt.param_types:
                    raise PlanningError(
                        f"{tmpl.task_id} step {k}: bindings {list(step.args)} do not match "
                        f"parameter types {list(opt.param_types)}"
                    )

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PlanRegistry":
        entries = {}
        for task_id, body in (doc.get("tasks") or {}).items():
            steps = tuple(GroundedOption.parse(s) for s in body["steps"])
            if not steps:
                raise PlanningError(f"template {task_id!r} has no steps")
            instructions = body.get("instructions") or []
            if isinstance(instructions, str):
                instructions = [instructions]
            entries[str(task_id)] = PlanTemplate(str(task_id), steps, tuple(instructions))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "PlanRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass(frozen=True)
class PlannerRequest:
    instruction: str
    scene: SceneDescription
    schema_name: str
    task_id: str | None = None

    def to_payload(self) -> dict[str, Any]:
        payload = {"instruction": self.instruction, "scene": self.scene.to_dict(), "schema_name": self.schema_name}
        if self.task_id is not None:
            payload["task_id"] = self.task_id
        return payload


def _ground(object_type: str, scene: SceneDescription, where: str) -> str:
    matches = scene.objects_of_type(object_type)
    if not matches:
        raise GroundingError(f"grounding failure: no scene object of type {object_type!r} ({where})")
    if len(matches) > 1:
        raise GroundingError(f"ambiguous grounding: {matches} all have type {object_type!r} ({where})")
    return matches[0]


def discover_plan(request: PlannerRequest, registry: PlanRegistry, schema: ActionSchema) -> Plan:
    tmpl = registry.lookup(request.task_id, request.instruction)
    steps = tuple(
        GroundedOption(step.option, tuple(_ground(t, request.scene, f"{tmpl.task_id} step {k}") for t in step.args))
        for k, step in enumerate(tmpl.steps)
    )
    plan = Plan(tmpl.task_id, steps)
    errors = validate_plan(schema, plan, request.scene)
    if errors:
        raise PlanValidationError(errors)
    return plan


def parse_plan_response(body: Any, task_id: str) -> Plan:
    if not isinstance(body, dict) or not isinstance(body.get("steps"), list):
        raise MalformedResponse("planner response lacks a 'steps' list")
    steps = []
    for i, step in enumerate(body["steps"]):
        if not isinstance(step, dict) or not isinstance(step.get("option"), str):
            raise MalformedResponse(f"planner step {i} lacks an 'option' string")
        args = step.get("args", [])
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise MalformedResponse(f"planner step {i} has non-string args")
        steps.append(GroundedOption(step["option"], tuple(args)))
    if not steps:
        raise MalformedResponse("planner returned an empty plan")
    return Plan(task_id, tuple(steps))


def remote_plan(
    request: PlannerRequest,
    endpoint: str | JsonServiceClient,
    schema: ActionSchema,
    timeout: float = 30.0,
    retries: int = 2,
    transport=None,
) -> Plan:
    """Ask an external planner service for the plan and validate it.

    Invalid plans are rejected (PlanValidationError), never repaired.
    """
    if isinstance(endpoint, JsonServiceClient):
        body = endpoint.post(request.to_payload())
    else:
        with JsonServiceClient(endpoint, timeout=timeout, retries=retries, transport=transport) as client:
            body = client.post(request.to_payload())
    plan = parse_plan_response(body, request.task_id or "remote")
    errors = validate_plan(schema, plan, request.scene)
    if errors:
        raise PlanValidationError(errors)
    return plan
