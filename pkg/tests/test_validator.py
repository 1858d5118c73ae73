from __future__ import annotations

import itertools

import numpy as np
import pytest

from atomic_slicing.schema import GroundedOption, Plan
from atomic_slicing.segmenter import BackendError, Boundaries, ProposedStep, RawProposal, ReplayBackend, ReplayStore
from atomic_slicing.validator import (
    ACCEPTED,
    BACKEND_FAIL,
    COUNT_FAIL,
    DURATION_FAIL,
    ORDER_FAIL,
    REJECTED,
    CalibrationConfig,
    DurationBounds,
    EpisodeResult,
    calibrate_confidence,
    check_count,
    check_duration,
    check_order,
    duration_slack,
    interval_iou,
    jitter_agreement,
    validate_episode,
)

from conftest import make_episode

PLACE = "place_bowl_in_drawer(bowl,drawer)"


def _raw(spans, labels, score=0.9, tag="j0"):
    steps = tuple(ProposedStep(lbl, s, e, score) for lbl, (s, e) in zip(labels, spans))
    return RawProposal("ep", steps, "fixed", tag)


class FixedBackend:
    """Returns the same spans and labels for every request."""

    def __init__(self, spans, labels, score=0.9):
        self.spans, self.labels, self.score = spans, labels, score
        self.calls = []

    def propose(self, request, episode=None):
        self.calls.append(request.run_tag)
        return _raw(self.spans, self.labels, self.score, request.run_tag)


class FailingBackend:
    def propose(self, request, episode=None):
        raise BackendError("down")


def _place_plan(K, task_id="libero_10/place"):
    return Plan(task_id, (GroundedOption("place_bowl_in_drawer", ("bowl", "drawer")),) * K)


def _run(schema, spans, labels=None, T=100, plan=None, bounds=None, retries=2):
    plan = plan or _place_plan(len(spans))
    labels = labels if labels is not None else plan.labels[: len(spans)]
    backend = FixedBackend(spans, labels)
    bounds = bounds or DurationBounds.from_schema(schema)
    res = validate_episode(make_episode(T, np.zeros(T)), plan, backend, bounds, CalibrationConfig(), retries, schema=schema)
    return res, backend


# -- individual checks ---------------------------------------------------------


def test_check_count():
    assert check_count(_raw([(1, 3)] * 3, "abc"), 3)
    assert not check_count(_raw([(1, 3)] * 2, "ab"), 3)
    assert check_count(_raw([], ""), 0)


def test_check_order():
    plan = Plan("t", tuple(GroundedOption(x) for x in "abc"))
    assert check_order(_raw([(1, 40), (41, 80), (81, 100)], ["a()", "b()", "c()"]), plan)
    assert not check_order(_raw([(1, 40), (41, 80), (81, 100)], ["a()", "c()", "b()"]), plan)
    assert not check_order(_raw([(1, 40), (41, 80), (41, 100)], ["a()", "b()", "c()"]), plan)
    assert check_order(_raw([(1, 40), (41, 80), (81, 100)], ["a( )", " b()", "c()"]), plan)


def test_check_duration(example_schema):
    bounds = DurationBounds.from_schema(example_schema)
    plan = _place_plan(2)
    assert check_duration(Boundaries(((1, 29), (30, 100))), plan, bounds) == 0
    assert check_duration(Boundaries(((1, 30), (31, 100))), plan, bounds) is None
    assert check_duration(Boundaries(((1, 30), (31, 151))), plan, bounds) == 1

    override = DurationBounds(bounds.per_option, {("libero_10/place", "place_bowl_in_drawer"): (10, 300)})
    assert check_duration(Boundaries(((1, 200), (201, 230))), plan, override) is None
    assert check_duration(Boundaries(((1, 200), (201, 230))), plan, bounds) == 0


def test_default_bounds_are_permissive():
    bounds = DurationBounds()
    assert bounds.lookup("t", "anything", 100) == (2, 100)
    assert bounds.lookup("t", "anything", 1) == (1, 1)


def test_bounds_from_dict_and_validation():
    b = DurationBounds.from_dict({"options": {"o": [5, 9]}, "tasks": {"t1": {"o": [1, 3]}}})
    assert b.lookup("t1", "o", 50) == (1, 3)
    assert b.lookup("t2", "o", 50) == (5, 9)
    with pytest.raises(ValueError):
        DurationBounds({"o": (9, 5)})


@pytest.mark.parametrize("d, expected", [(75, 1.0), (30, 0.0), (120, 0.0), (40, 2 * 10 / 90)])
def test_duration_slack(d, expected):
    assert duration_slack(d, (30, 120)) == pytest.approx(expected, abs=1e-12)


def test_duration_slack_edge_cases():
    assert duration_slack(40, (40, 40)) == 1.0
    assert round(duration_slack(40, (30, 120)), 4) == 0.2222
    with pytest.raises(ValueError):
        duration_slack(29, (30, 120))


def test_interval_iou_and_agreement():
    assert interval_iou((10, 20), (15, 25)) == 0.375
    assert jitter_agreement([(1, 5), (6, 9)], [(1, 5), (6, 9)]) == [1.0, 1.0]
    assert jitter_agreement([(10, 20)], [(15, 25)]) == [0.375]
    assert jitter_agreement([(1, 5), (6, 9)], [(1, 9)]) == [5 / 9, 0.0]


def test_calibration_examples():
    cfg = CalibrationConfig()
    assert calibrate_confidence(1, 1, 1, cfg) == pytest.approx(1.0)
    assert calibrate_confidence(0.5, 1.0, 0.8, cfg) == pytest.approx(0.74, abs=1e-12)
    assert calibrate_confidence(None, 1.0, 0.5, cfg) == pytest.approx(0.75, abs=1e-12)
    no_renorm = CalibrationConfig(renormalize_on_missing=False)
    assert calibrate_confidence(None, 1.0, 0.5, no_renorm) == pytest.approx(0.45, abs=1e-12)
    with pytest.raises(ValueError):
        calibrate_confidence(None, None, None, cfg)
    with pytest.raises(ValueError):
        CalibrationConfig(0, 0, 0)


def test_calibration_monotone_on_grid():
    cfg = CalibrationConfig()
    grid = [i / 4 for i in range(5)]
    for s, d, a in itertools.product(grid, repeat=3):
        c = calibrate_confidence(s, d, a, cfg)
        assert 0.0 <= c <= 1.0
        for i in range(3):
            bumped = [s, d, a]
            bumped[i] = min(bumped[i] + 0.25, 1.0)
            assert calibrate_confidence(*bumped, cfg) >= c


# -- the episode loop ----------------------------------------------------------


def test_truth_table(example_schema):
    ok, backend = _run(example_schema, [(1, 30), (31, 70), (71, 100)])
    assert ok.status == ACCEPTED and ok.reason is None and ok.attempts == 1
    assert backend.calls == ["j0", "j2"]

    res, _ = _run(example_schema, [(1, 50), (51, 100)], plan=_place_plan(3))
    assert (res.status, res.reason) == (REJECTED, COUNT_FAIL)

    plan = Plan("t", (GroundedOption("place_bowl_in_drawer", ("bowl", "drawer")), GroundedOption("place_bowl_in_drawer", ("drawer", "bowl"))))
    res, _ = _run(example_schema, [(1, 50), (51, 100)], labels=[plan.labels[1], plan.labels[0]], plan=plan)
    assert (res.status, res.reason) == (REJECTED, ORDER_FAIL)

    res, _ = _run(example_schema, [(1, 29), (30, 100)])
    assert (res.status, res.reason, res.failed_step) == (REJECTED, DURATION_FAIL, 0)


def test_count_fail_is_never_reported_as_order_fail(example_schema):
    res, _ = _run(example_schema, [(1, 50), (51, 100)], labels=["x()", "y()"], plan=_place_plan(3))
    assert res.reason == COUNT_FAIL


def test_order_checked_on_raw_starts(example_schema):
    res, _ = _run(example_schema, [(1, 40), (41, 80), (41, 100)])
    assert res.reason == ORDER_FAIL


def test_thirty_frame_span_accepted(example_schema):
    res, _ = _run(example_schema, [(1, 30), (31, 100)])
    assert res.accepted
    first = res.segments[0]
    assert (first.t_s, first.t_e) == (1, 30)
    assert first.slack == 0.0
    assert first.agreement == 1.0
    assert first.confidence == pytest.approx(0.4 * 0.9 + 0.3 * 1.0)


def test_task_override_accepts_long_span(example_schema):
    bounds = DurationBounds.from_schema(
        example_schema, DurationBounds(per_task_override={("libero_10/place", "place_bowl_in_drawer"): (10, 300)})
    )
    res, _ = _run(example_schema, [(1, 200), (201, 230)], T=230, bounds=bounds)
    assert res.accepted


def test_count_failure_exhausts_retries(example_schema):
    res, backend = _run(example_schema, [(1, 50), (51, 100)], plan=_place_plan(3), retries=2)
    assert (res.reason, res.attempts) == (COUNT_FAIL, 3)
    assert backend.calls == ["j0", "j0-r1", "j0-r2"]


def test_retry_then_accept_via_replay(example_schema):
    plan = _place_plan(2)
    store = ReplayStore()
    store.record(RawProposal("ep", (ProposedStep(plan.labels[0], 1, 20, 0.5), ProposedStep(plan.labels[1], 21, 100, 0.5)), "replay", "j0"))
    good = (ProposedStep(plan.labels[0], 1, 50, 0.5), ProposedStep(plan.labels[1], 51, 100, 0.5))
    store.record(RawProposal("ep", good, "replay", "j0-r1"))
    store.record(RawProposal("ep", good, "replay", "j2-r1"))
    res = validate_episode(
        make_episode(100, np.zeros(100)), plan, ReplayBackend(store), DurationBounds.from_schema(example_schema),
        CalibrationConfig(), 2, schema=example_schema,
    )
    assert res.accepted and res.attempts == 2
    assert [(s.t_s, s.t_e) for s in res.segments] == [(1, 50), (51, 100)]


def test_missing_jitter_run_scores_zero_agreement(example_schema):
    plan = _place_plan(2)
    store = ReplayStore()
    store.record(RawProposal("ep", (ProposedStep(plan.labels[0], 1, 50, None), ProposedStep(plan.labels[1], 51, 100, None)), "replay", "j0"))
    res = validate_episode(
        make_episode(100, np.zeros(100)), plan, ReplayBackend(store), DurationBounds.from_schema(example_schema),
        CalibrationConfig(), 2, schema=example_schema,
    )
    assert res.accepted and res.jitter_spans == ()
    seg = res.segments[0]
    assert seg.agreement == 0.0 and seg.score is None
    assert seg.confidence == pytest.approx((0.3 * duration_slack(50, (30, 120))) / 0.6)


def test_backend_failure(example_schema):
    res = validate_episode(
        make_episode(100, np.zeros(100)), _place_plan(2), FailingBackend(), DurationBounds(), CalibrationConfig(), 1,
        schema=example_schema,
    )
    assert (res.status, res.reason, res.attempts) == (REJECTED, BACKEND_FAIL, 2)


def test_more_steps_than_frames(example_schema):
    res, backend = _run(example_schema, [(1, 1)] * 3, T=2)
    assert res.reason == DURATION_FAIL and res.attempts == 0 and backend.calls == []


def test_result_round_trip(example_schema):
    res, _ = _run(example_schema, [(1, 30), (31, 100)])
    assert EpisodeResult.from_dict(res.to_dict()) == res
    rej, _ = _run(example_schema, [(1, 29), (30, 100)])
    assert EpisodeResult.from_dict(rej.to_dict()) == rej


def test_accepted_results_satisfy_invariants(example_schema):
    rng = np.random.default_rng(3)
    for _ in range(200):
        T = int(rng.integers(60, 300))
        cuts = sorted(rng.choice(np.arange(1, T), size=2, replace=False).tolist())
        spans = [(1, cuts[0]), (cuts[0] + 1, cuts[1]), (cuts[1] + 1, T)]
        res, _ = _run(example_schema, spans, T=T)
        if res.accepted:
            b = Boundaries(tuple((s.t_s, s.t_e) for s in res.segments))
            assert b.is_partition(T) and len(res.segments) == 3
            assert all(30 <= d <= 120 for d in b.durations)
            assert all(0.0 <= s.confidence <= 1.0 for s in res.segments)
        else:
            assert res.reason == DURATION_FAIL
