from __future__ import annotations

import numpy as np
import pytest

from atomic_slicing.ingest import Episode
from atomic_slicing.schema import Plan, SceneDescription, parse_schema

BOWL_DRAWER_SCHEMA = """\
name: bowl_drawer
types: [bowl, drawer]
predicates:
  grasped: 1
  isOpen: 1
  clear: 1
  in: 2
options:
  - name: place_bowl_in_drawer
    params: [bowl - bowl, drawer - drawer]
    pre: [grasped(bowl), isOpen(drawer), clear(drawer)]
    add: ["in(bowl, drawer)"]
    del: [grasped(bowl)]
    termination: bowl released inside the drawer
    d_min: 30
    d_max: 120
"""

KITCHEN_SCHEMA = """\
name: kitchen
types: [bowl, drawer]
predicates:
  grasped: 1
  isOpen: 1
  in: 2
  handEmpty: 0
options:
  - name: pick_up
    params: [b - bowl]
    pre: [handEmpty()]
    add: [grasped(b)]
    del: [handEmpty()]
  - name: place_in
    params: [b - bowl, d - drawer]
    pre: [grasped(b), isOpen(d)]
    add: ["in(b, d)", "handEmpty()"]
    del: [grasped(b)]
  - name: close
    params: [d - drawer]
    pre: [isOpen(d)]
    del: [isOpen(d)]
"""


@pytest.fixture
def example_schema():
    return parse_schema(BOWL_DRAWER_SCHEMA)


@pytest.fixture
def kitchen_schema():
    return parse_schema(KITCHEN_SCHEMA)


@pytest.fixture
def kitchen_scene():
    return SceneDescription.from_dict(
        {
            "objects": [{"name": "bowl", "type": "bowl"}, {"name": "drawer", "type": "drawer"}],
            "init": ["isOpen(drawer)", "handEmpty()"],
            "goal": ["in(bowl, drawer)"],
        }
    )


@pytest.fixture
def kitchen_plan():
    return Plan.from_dict({"task_id": "libero_10/bowl", "steps": ["pick_up(bowl)", "place_in(bowl,drawer)", "close(drawer)"]})


def make_episode(T, gripper=None, episode_id="ep", task_id="t/x", scene=None):
    channels = {} if gripper is None else {"gripper_width": np.asarray(gripper, dtype=float)}
    return Episode(episode_id, task_id, "do it", T, channels, scene or SceneDescription())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
