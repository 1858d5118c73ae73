from __future__ import annotations

import json

import httpx
import pytest

from atomic_slicing.planner import (
    GroundingError,
    PlannerRequest,
    PlanRegistry,
    PlanValidationError,
    UnknownTask,
    discover_plan,
    remote_plan,
)
from atomic_slicing.remote import JsonServiceClient, MalformedResponse, TransportError
from atomic_slicing.schema import SceneDescription

REGISTRY = {
    "tasks": {
        "libero_10/bowl": {
            "instructions": ["put the bowl in the drawer and close it"],
            "steps": ["pick_up(bowl)", "place_in(bowl, drawer)", "close(drawer)"],
        },
        "libero_goal/close": {"instructions": "close the drawer", "steps": ["close(drawer)"]},
    }
}


@pytest.fixture
def registry():
    return PlanRegistry.from_dict(REGISTRY)


def test_three_step_plan(registry, kitchen_schema, kitchen_scene):
    req = PlannerRequest("put the bowl in the drawer and close it", kitchen_scene, "kitchen")
    plan = discover_plan(req, registry, kitchen_schema)
    assert plan.labels == ("pick_up(bowl)", "place_in(bowl,drawer)", "close(drawer)")
    assert plan.K == 3
    assert plan == discover_plan(req, registry, kitchen_schema)


def test_single_step_template(registry, kitchen_schema, kitchen_scene):
    plan = discover_plan(PlannerRequest("", kitchen_scene, "kitchen", "libero_goal/close"), registry, kitchen_schema)
    assert plan.labels == ("close(drawer)",)


def test_grounding_binds_scene_names(registry, kitchen_schema):
    scene = SceneDescription((("akita_bowl", "bowl"), ("top_drawer", "drawer")))
    plan = discover_plan(PlannerRequest("", scene, "kitchen", "libero_10/bowl"), registry, kitchen_schema)
    assert plan.labels[1] == "place_in(akita_bowl,top_drawer)"


def test_ambiguous_grounding(registry, kitchen_schema):
    scene = SceneDescription((("bowl_1", "bowl"), ("bowl_2", "bowl"), ("drawer", "drawer")))
    with pytest.raises(GroundingError, match="ambiguous grounding"):
        discover_plan(PlannerRequest("", scene, "kitchen", "libero_10/bowl"), registry, kitchen_schema)


def test_grounding_failure(registry, kitchen_schema):
    scene = SceneDescription((("bowl", "bowl"),))
    with pytest.raises(GroundingError, match="grounding failure"):
        discover_plan(PlannerRequest("", scene, "kitchen", "libero_10/bowl"), registry, kitchen_schema)


def test_unknown_task(registry, kitchen_schema, kitchen_scene):
    with pytest.raises(UnknownTask, match="unknown task_id"):
        discover_plan(PlannerRequest("", kitchen_scene, "kitchen", "nope"), registry, kitchen_schema)


def test_registry_check(registry, kitchen_schema, example_schema):
    registry.check(kitchen_schema)
    with pytest.raises(ValueError):
        registry.check(example_schema)


def _planner_transport(body, calls):
    def handler(request):
        calls.append(json.loads(request.content))
        return httpx.Response(200, json=body)

    return httpx.MockTransport(handler)


def test_remote_matches_registry(registry, kitchen_schema, kitchen_scene):
    req = PlannerRequest("put the bowl in the drawer and close it", kitchen_scene, "kitchen", "libero_10/bowl")
    expected = discover_plan(req, registry, kitchen_schema)
    calls = []
    body = {"steps": [{"option": s.option, "args": list(s.args)} for s in expected.steps]}
    plan = remote_plan(req, "http://planner", kitchen_schema, transport=_planner_transport(body, calls))
    assert plan == expected
    assert calls[0]["instruction"] == req.instruction
    assert calls[0]["schema_name"] == "kitchen"
    assert calls[0]["scene"]["objects"][0] == {"name": "bowl", "type": "bowl"}


def test_remote_option_outside_schema(kitchen_schema, kitchen_scene):
    req = PlannerRequest("x", kitchen_scene, "kitchen", "t")
    body = {"steps": [{"option": "teleport", "args": ["bowl"]}]}
    with pytest.raises(PlanValidationError, match="plan fails schema validation"):
        remote_plan(req, "http://planner", kitchen_schema, transport=_planner_transport(body, []))


def test_remote_malformed(kitchen_schema, kitchen_scene):
    req = PlannerRequest("x", kitchen_scene, "kitchen", "t")
    with pytest.raises(MalformedResponse):
        remote_plan(req, "http://planner", kitchen_schema, transport=_planner_transport({"plan": []}, []))


def test_unreachable_endpoint_retries_twice(kitchen_schema, kitchen_scene):
    attempts = []

    def handler(request):
        attempts.append(request)
        raise httpx.ConnectError("refused", request=request)

    req = PlannerRequest("x", kitchen_scene, "kitchen", "t")
    with pytest.raises(TransportError):
        remote_plan(req, "http://planner", kitchen_schema, transport=httpx.MockTransport(handler))
    assert len(attempts) == 3


def test_client_does_not_retry_4xx():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(404, text="missing")

    with JsonServiceClient("http://x", transport=httpx.MockTransport(handler)) as client:
        with pytest.raises(MalformedResponse):
            client.post({})
    assert calls == [1]
