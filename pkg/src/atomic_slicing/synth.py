"""Synthetic episodes with known segmentations, and a noisy oracle segmenter."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .ingest import GRIPPER_CHANNEL, Episode
from .io import atomic_write_text, dumps
from .metrics import ReferenceSegmentation
from .schema import ActionSchema, GroundedOption, Literal, Plan, SceneDescription, parse_schema, serialize_schema
from .segmenter import BackendError, ProposedStep, RawProposal

MIN_SPAN = 2
OPEN_WIDTH = 0.08
CLOSED_WIDTH = 0.0

SYNTH_SCHEMA_TEXT = """\
name: synth_kitchen
types: [bowl, plate, drawer, stove]
predicates:
  grasped: 1
  on: 2
  isOpen: 1
  isOn: 1
  handEmpty: 0
options:
  - name: pick_up
    params: [bowl - bowl]
    pre: [handEmpty()]
    add: [grasped(bowl)]
    del: [handEmpty()]
    termination: bowl lifted clear of its support
  - name: place_on
    params: [bowl - bowl, plate - plate]
    pre: [grasped(bowl)]
    add: ["on(bowl, plate)", "handEmpty()"]
    del: [grasped(bowl)]
    termination: bowl released on plate
  - name: open_drawer
    params: [drawer - drawer]
    pre: [handEmpty()]
    add: [isOpen(drawer)]
    termination: drawer fully open
  - name: close_drawer
    params: [drawer - drawer]
    pre: [isOpen(drawer), handEmpty()]
    del: [isOpen(drawer)]
    termination: drawer flush with cabinet
  - name: turn_on
    params: [stove - stove]
    pre: [handEmpty()]
    add: [isOn(stove)]
    termination: stove knob at on position
"""


def synth_schema() -> ActionSchema:
    return parse_schema(SYNTH_SCHEMA_TEXT)


@dataclass(frozen=True)
class SynthConfig:
    num_episodes: int = 100
    K_range: tuple[int, int] = (3, 4)
    T_range: tuple[int, int] = (150, 350)
    boundary_noise_sigma: float = 0.0
    label_error_rate: float = 0.0
    drop_step_rate: float = 0.0
    seed: int = 0
    task_prefix: str = "synth"
    id_prefix: str = "ep"

    def __post_init__(self):
        k_lo, k_hi = self.K_range
        t_lo, t_hi = self.T_range
        if self.num_episodes < 0:
            raise ValueError("num_episodes must be >= 0")
        if not 1 <= k_lo <= k_hi:
            raise ValueError("K_range must satisfy 1 <= min <= max")
        if not 1 <= t_lo <= t_hi:
            raise ValueError("T_range must satisfy 1 <= min <= max")
        if t_lo < MIN_SPAN * k_hi:
            raise ValueError(
                f"infeasible config: T_range min {t_lo} cannot hold {k_hi} spans of >= {MIN_SPAN} frames"
            )
        if self.boundary_noise_sigma < 0:
            raise ValueError("boundary_noise_sigma must be >= 0")
        for name in ("label_error_rate", "drop_step_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SynthDataset:
    schema: ActionSchema
    episodes: list[Episode] = field(default_factory=list)
    plans: dict[str, Plan] = field(default_factory=dict)
    references: dict[str, ReferenceSegmentation] = field(default_factory=dict)

    def registry_dict(self) -> dict:
        tasks = {}
        for ep in self.episodes:
            plan = self.plans[ep.episode_id]
            if plan.task_id in tasks:
                continue
            steps = [f"{s.option}({', '.join(self.schema.option(s.option).param_types)})" for s in plan.steps]
            tasks[plan.task_id] = {"instructions": [ep.instruction], "steps": steps}
        return {"tasks": tasks}

    def files(self) -> dict[str, str]:
        """File name -> contents for the on-disk form of the dataset."""
        ids = [ep.episode_id for ep in self.episodes]
        return {
            "schema.yaml": serialize_schema(self.schema),
            "registry.yaml": yaml.safe_dump(self.registry_dict(), sort_keys=True),
            "episodes.jsonl": "".join(dumps(ep.to_dict()) + "\n" for ep in self.episodes),
            "plans.jsonl": "".join(dumps({"episode_id": i, **self.plans[i].to_dict()}) + "\n" for i in ids),
            "references.jsonl": "".join(dumps(self.references[i].to_dict()) + "\n" for i in ids),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for name, text in self.files().items():
            atomic_write_text(out / name, text)

    def extend(self, other: "SynthDataset") -> None:
        clash = set(self.plans) & set(other.plans)
        if clash:
            raise ValueError(f"duplicate episode ids {sorted(clash)[:3]}")
        self.episodes.extend(other.episodes)
        self.plans.update(other.plans)
        self.references.update(other.references)


def random_composition(rng: np.random.Generator, T: int, K: int, min_part: int = MIN_SPAN) -> list[int]:
    """K part lengths, each >= min_part, summing to T (uniform over compositions)."""
    extra = T - min_part * K
    if extra < 0:
        raise ValueError(f"cannot split {T} frames into {K} parts of >= {min_part}")
    bars = np.sort(rng.choice(extra + K - 1, size=K - 1, replace=False)) if K > 1 else np.zeros(0, int)
    edges = [-1, *bars.tolist(), extra + K - 1]
    return [min_part + (b - a - 1) for a, b in zip(edges, edges[1:])]


def _ground(schema: ActionSchema, option: str) -> GroundedOption:
    # synthetic scenes name each object after its type
    return GroundedOption(option, schema.option(option).param_types)


def generate_dataset(cfg: SynthConfig, schema: ActionSchema | None = None) -> SynthDataset:
    schema = schema or synth_schema()
    if not schema.options:
        raise ValueError("schema has no options to sample from")
    rng = np.random.default_rng(cfg.seed)
    names = [o.name for o in schema.options]
    scene_objects = tuple((t, t) for t in schema.object_types)
    data = SynthDataset(schema)
    width = max(3, len(str(max(cfg.num_episodes - 1, 0))))
    for i in range(cfg.num_episodes):
        K = int(rng.integers(cfg.K_range[0], cfg.K_range[1] + 1))
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        steps = tuple(_ground(schema, names[j]) for j in rng.integers(0, len(names), size=K))
        lengths = random_composition(rng, T, K)
        ends = np.cumsum(lengths).tolist()
        starts = [1] + [e + 1 for e in ends[:-1]]

        levels = np.concatenate([np.full(n, OPEN_WIDTH if k % 2 == 0 else CLOSED_WIDTH) for k, n in enumerate(lengths)])
        noise = rng.normal(0.0, 0.01 * abs(OPEN_WIDTH - CLOSED_WIDTH), size=T)
        gripper = np.round(levels + noise, 6)

        episode_id = f"{cfg.id_prefix}_{i:0{width}d}"
        task_id = f"{cfg.task_prefix}/" + "-".join(s.option for s in steps)
        instruction = ", then ".join(f"{s.option.replace('_', ' ')} ({', '.join(s.args)})" for s in steps)
        last = schema.option(steps[-1].option)
        binding = dict(zip(last.param_names, steps[-1].args))
        goal = tuple(Literal(l.predicate, tuple(binding.get(a, a) for a in l.args)) for l in last.add_effects)
        if not goal:
            goal = tuple(Literal(l.predicate, tuple(binding.get(a, a) for a in l.args), True) for l in last.del_effects)
        scene = SceneDescription(objects=scene_objects, init=(Literal("handEmpty"),) if "handEmpty" in dict(schema.predicates) else (), goal=goal)
        episode = Episode(episode_id, task_id, instruction, T, {GRIPPER_CHANNEL: gripper}, scene)
        data.episodes.append(episode)
        data.plans[episode_id] = Plan(task_id, steps)
        data.references[episode_id] = ReferenceSegmentation(
            episode_id, tuple((str(s), a, b) for s, a, b in zip(steps, starts, ends))
        )
    return data


def _oracle_rng(cfg: SynthConfig, episode_id: str, run_tag: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed, zlib.crc32(episode_id.encode()), zlib.crc32(run_tag.encode())])
    )


def noisy_oracle(
    reference: ReferenceSegmentation,
    cfg: SynthConfig,
    run_tag: str = "j0",
    schema: ActionSchema | None = None,
    backend_id: str = "oracle",
) -> RawProposal:
    """Perturb a reference segmentation.

    Every random draw is made whatever the noise settings, so runs that
    differ only in sigma or rates share their underlying randomness.
    """
    schema = schema or synth_schema()
    rng = _oracle_rng(cfg, reference.episode_id, run_tag)
    K = len(reference.steps)
    T = reference.steps[-1][2]
    sigma = cfg.boundary_noise_sigma

    z = rng.standard_normal(K - 1)
    label_draw = rng.random(K)
    label_pick = rng.integers(0, max(len(schema.options), 1), size=K)
    drop_draw = rng.random(K)

    shifts = [int(round(sigma * v)) for v in z]
    ends = [e + d for (_, _, e), d in zip(reference.steps[:-1], shifts)] + [T]
    starts = [1] + [e + 1 for e in ends[:-1]]
    scale = max(sigma, 1.0)
    boundary_scores = [math.exp(-abs(d) / scale) for d in shifts]

    steps = []
    for k, (label, _, _) in enumerate(reference.steps):
        if label_draw[k] < cfg.label_error_rate:
            others = [str(_ground(schema, o.name)) for o in schema.options]
            others = [o for o in others if o != label] or others
            label = others[int(label_pick[k]) % len(others)]
        around = boundary_scores[max(k - 1, 0) : k + 1]
        score = float(np.mean(around)) if around else 1.0
        if drop_draw[k] < cfg.drop_step_rate:
            continue
        steps.append(ProposedStep(label, starts[k], ends[k], score))
    return RawProposal(reference.episode_id, tuple(steps), backend_id, run_tag)


class OracleBackend:
    """Segmenter stand-in that perturbs known references with controlled noise."""

    def __init__(
        self,
        references: Mapping[str, ReferenceSegmentation],
        cfg: SynthConfig,
        schema: ActionSchema | None = None,
        backend_id: str = "oracle",
    ):
        self.references = references
        self.cfg = cfg
        self.schema = schema or synth_schema()
        self.backend_id = backend_id

    def propose(self, request, episode=None) -> RawProposal:
        try:
            ref = self.references[request.episode_id]
        except KeyError:
            raise BackendError(f"no reference segmentation for {request.episode_id!r}") from None
        return noisy_oracle(ref, self.cfg, request.run_tag, self.schema, self.backend_id)
