from __future__ import annotations

import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomic_slicing.ingest import KeyframeSet, select_keyframes
from atomic_slicing.remote import MalformedResponse
from atomic_slicing.schema import GroundedOption, Plan, parse_schema
from atomic_slicing.segmenter import (
    Boundaries,
    HeuristicBackend,
    MalformedProposal,
    MissingRecording,
    ProposedStep,
    RawProposal,
    ReplayStore,
    build_request,
    project_to_valid,
    segment_heuristic,
    segment_remote,
    segment_replay,
)

from conftest import BOWL_DRAWER_SCHEMA, make_episode

SCHEMA = parse_schema(BOWL_DRAWER_SCHEMA)


def _plan(K):
    return Plan("t/x", tuple(GroundedOption(f"o{k}") for k in range(K)))


def _request(ep, K, schema, run_tag="j0", budget=8):
    return build_request(ep, _plan(K), schema, select_keyframes(ep, budget), run_tag=run_tag)


def _raw(spans, labels=None, eid="ep"):
    labels = labels or [f"o{k}()" for k in range(len(spans))]
    return RawProposal(eid, tuple(ProposedStep(l, s, e, None) for l, (s, e) in zip(labels, spans)), "test", "j0")


def test_build_request(kitchen_schema, kitchen_plan):
    ep = make_episode(120, np.linspace(0, 0.08, 120))
    kf = select_keyframes(ep, 8)
    req = build_request(ep, kitchen_plan, kitchen_schema, kf)
    assert len(req.plan_labels) == 3
    assert len(req.state_summaries) == len(kf) == 8
    assert req.fewshot == ()
    payload = req.to_payload()
    for key in ("episode_id", "instruction", "plan_labels", "keyframes", "state_summaries", "fewshot", "T"):
        assert key in payload
    json.dumps(payload)


def test_keyframes_outside_range_rejected():
    with pytest.raises(ValueError):
        KeyframeSet((0, 5, 10), 10)


def test_heuristic_flat_channel_falls_back(example_schema):
    ep = make_episode(9, np.zeros(9))
    raw = segment_heuristic(_request(ep, 3, example_schema), ep)
    assert raw.spans == ((1, 3), (4, 6), (7, 9))
    assert raw.scores == (0.5, 0.5, 0.5)


def test_heuristic_single_event(example_schema):
    g = np.where(np.arange(1, 101) <= 40, 0.08, 0.0)
    ep = make_episode(100, g)
    raw = segment_heuristic(_request(ep, 2, example_schema), ep)
    assert raw.spans == ((1, 40), (41, 100))
    assert raw.scores == (1.0, 1.0)


def test_heuristic_too_many_steps(example_schema):
    ep = make_episode(2, np.zeros(2))
    with pytest.raises(ValueError):
        segment_heuristic(_request(ep, 3, example_schema, budget=2), ep)


def test_heuristic_respects_separation(example_schema):
    g = np.zeros(60)
    g[20:] = 0.08
    g[22:] = 0.0  # a 2-frame blip right after the first event
    ep = make_episode(60, g)
    raw = segment_heuristic(_request(ep, 3, example_schema), ep, min_separation=5)
    assert min(e - s + 1 for s, e in raw.spans) >= 5
    # only one event survives the separation rule, so the split is uniform
    assert raw.spans == ((1, 20), (21, 40), (41, 60))


def test_heuristic_backend_uses_plan_d_min(kitchen_schema):
    ep = make_episode(50, np.zeros(50))
    raw = HeuristicBackend(kitchen_schema).propose(_request(ep, 2, kitchen_schema), ep)
    assert raw.backend_id == "heuristic"
    assert Boundaries(raw.spans).is_partition(50)


def test_replay_identity_and_keys(example_schema):
    ep = make_episode(100, np.zeros(100), episode_id="ep_001")
    a = RawProposal("ep_001", (ProposedStep("o0()", 1, 40, 0.9), ProposedStep("o1()", 41, 100, 0.8)), "replay", "j0")
    b = RawProposal("ep_001", (ProposedStep("o0()", 1, 50, 0.7), ProposedStep("o1()", 51, 100, 0.6)), "replay", "j2")
    store = ReplayStore()
    store.record(a)
    store.record(b)
    assert segment_replay(_request(ep, 2, example_schema, "j0"), store) == a
    assert segment_replay(_request(ep, 2, example_schema, "j2"), store) == b
    with pytest.raises(MissingRecording, match="no recorded response"):
        segment_replay(_request(ep, 2, example_schema, "j9"), store)


def test_replay_store_file_round_trip(tmp_path):
    store = ReplayStore()
    store.record(_raw([(1, 5), (6, 10)]))
    path = tmp_path / "store.json"
    path.write_text(json.dumps(store.to_dict()))
    again = ReplayStore.load(path)
    assert again.get("ep", "test", "j0") == store.get("ep", "test", "j0")


def test_malformed_recording_fails_only_its_lookup():
    store = ReplayStore({"ep/r/j0": {"steps": [{"label": "a", "start": "x"}]}, "ep/r/j2": {"steps": []}})
    with pytest.raises(MalformedProposal):
        store.get("ep", "r", "j0")
    assert store.get("ep", "r", "j2").steps == ()


def _remote_transport(responses):
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        status, body = responses[min(len(calls) - 1, len(responses) - 1)]
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler), calls


SPANS3 = {"steps": [{"label": "o0()", "start": 1, "end": 30}, {"label": "o1()", "start": 31, "end": 60},
                    {"label": "o2()", "start": 61, "end": 100, "score": 0.4}]}


def test_remote_valid_response(example_schema):
    ep = make_episode(100, np.zeros(100))
    transport, calls = _remote_transport([(200, SPANS3)])
    raw = segment_remote(_request(ep, 3, example_schema), "http://seg", transport=transport)
    assert raw.spans == ((1, 30), (31, 60), (61, 100))
    assert raw.scores == (None, None, 0.4)
    assert calls[0]["T"] == 100 and calls[0]["plan_labels"] == ["o0()", "o1()", "o2()"]


def test_remote_short_response_kept_raw(example_schema):
    ep = make_episode(100, np.zeros(100))
    body = {"steps": SPANS3["steps"][:2]}
    transport, _ = _remote_transport([(200, body)])
    raw = segment_remote(_request(ep, 3, example_schema), "http://seg", transport=transport)
    assert len(raw.steps) == 2


def test_remote_retries_5xx(example_schema):
    ep = make_episode(100, np.zeros(100))
    transport, calls = _remote_transport([(503, {}), (500, {}), (200, SPANS3)])
    raw = segment_remote(_request(ep, 3, example_schema), "http://seg", retries=2, transport=transport)
    assert len(calls) == 3 and len(raw.steps) == 3


def test_remote_anchored_replaces_labels(example_schema):
    ep = make_episode(100, np.zeros(100))
    body = {"steps": [dict(s, label="whatever") for s in SPANS3["steps"]]}
    transport, _ = _remote_transport([(200, body)])
    raw = segment_remote(_request(ep, 3, example_schema), "http://seg", anchored=True, transport=transport)
    assert raw.labels == ("o0()", "o1()", "o2()")
    transport, _ = _remote_transport([(200, body)])
    raw = segment_remote(_request(ep, 3, example_schema), "http://seg", anchored=False, transport=transport)
    assert raw.labels == ("whatever",) * 3


def test_remote_malformed_body(example_schema):
    ep = make_episode(100, np.zeros(100))
    transport, _ = _remote_transport([(200, {"segments": []})])
    with pytest.raises(MalformedResponse):
        segment_remote(_request(ep, 3, example_schema), "http://seg", transport=transport)


@pytest.mark.parametrize(
    "spans, T, expected",
    [
        ([(1, 40), (41, 100)], 100, ((1, 40), (41, 100))),
        ([(1, 50), (45, 100)], 100, ((1, 47), (48, 100))),
        ([(0, 30), (31, 120)], 100, ((1, 30), (31, 100))),
        ([(1, 10), (20, 30)], 30, ((1, 15), (16, 30))),
        ([(50, 60), (1, 10)], 60, ((1, 30), (31, 60))),
        ([(5, 5), (5, 5), (5, 5)], 10, ((1, 4), (5, 5), (6, 10))),
    ],
)
def test_projection_examples(spans, T, expected):
    assert project_to_valid(_raw(spans), T, len(spans)).spans == expected


def test_projection_errors():
    with pytest.raises(ValueError):
        project_to_valid(_raw([(1, 1)] * 3), 2, 3)
    with pytest.raises(ValueError):
        project_to_valid(_raw([(1, 5)]), 10, 2)


@st.composite
def raw_proposals(draw):
    T = draw(st.integers(1, 400))
    K = draw(st.integers(1, min(T, 8)))
    point = st.integers(-10, T + 10)
    return T, K, [(draw(point), draw(point)) for _ in range(K)]


@settings(max_examples=400, deadline=None)
@given(raw_proposals())
def test_projection_partition_and_idempotence(case):
    T, K, spans = case
    b = project_to_valid(spans, T, K)
    assert b.K == K and b.is_partition(T) and sum(b.durations) == T
    assert project_to_valid(b.spans, T, K) == b


@settings(max_examples=150, deadline=None)
@given(T=st.integers(1, 200), K=st.integers(1, 6), data=st.data())
def test_heuristic_output_is_valid(T, K, data):
    if K > T:
        return
    g = data.draw(st.lists(st.sampled_from([0.0, 0.04, 0.08]), min_size=T, max_size=T))
    ep = make_episode(T, g)
    req = build_request(ep, _plan(K), SCHEMA, select_keyframes(ep, 8))
    raw = segment_heuristic(req, ep, min_separation=data.draw(st.integers(1, 5)))
    b = Boundaries(raw.spans)
    assert b.is_partition(T) and b.K == K
    assert project_to_valid(raw, T, K) == b
    assert all(s is not None and 0.0 <= s <= 1.0 for s in raw.scores)
