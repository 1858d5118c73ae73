"""Typed action schema: option types, literals, grounded options and plans.

A schema file is a YAML document::

    name: libero_example
    types: [bowl, drawer]
    constants: []            # optional, "name - type" entries
    predicates:
      grasped: 1
      isOpen: 1
    options:
      - name: place_bowl_in_drawer
        params: [bowl - bowl, drawer - drawer]
        pre: [grasped(bowl), isOpen(drawer)]
        add: ["in(bowl, drawer)"]    # quote literals with commas in flow lists
        del: [grasped(bowl)]
        termination: bowl released in drawer
        d_min: 30             # optional pair
        d_max: 120
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import yaml

_IDENT = r"[A-Za-z_][A-Za-z0-9_\-\.]*"
_LITERAL_RE = re.compile(
    rf"^\s*(?P<neg>not\s+|¬\s*|!\s*)?(?P<pred>{_IDENT})\s*\((?P<args>[^()]*)\)\s*$"
)
_PARAM_RE = re.compile(rf"^\s*(?P<name>{_IDENT})\s*(?:-|:)\s*(?P<type>{_IDENT})\s*$")


class SchemaError(ValueError):
    """Raised for malformed or inconsistent schema documents."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(field)
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.message = message


def _split_args(text: str) -> tuple[str, ...]:
    parts = [a.strip() for a in text.split(",")]
    if parts == [""]:
        return ()
    if any(not re.fullmatch(_IDENT, p) for p in parts):
        raise ValueError(f"bad argument list: {text!r}")
    return tuple(parts)


@dataclass(frozen=True)
class Literal:
    predicate: str
    args: tuple[str, ...] = ()
    negated: bool = False

    @classmethod
    def parse(cls, text: str) -> "Literal":
        """Parse ``pred(a, b)``, ``not pred(a)`` or ``¬pred(a)``."""
        m = _LITERAL_RE.match(text)
        if m is None:
            raise ValueError(f"cannot parse literal: {text!r}")
        return cls(m["pred"], _split_args(m["args"]), bool(m["neg"]))

    def negate(self) -> "Literal":
        return Literal(self.predicate, self.args, not self.negated)

    def __str__(self) -> str:
        core = f"{self.predicate}({', '.join(self.args)})"
        return f"not {core}" if self.negated else core


@dataclass(frozen=True)
class OptionType:
    name: str
    params: tuple[tuple[str, str], ...] = ()
    preconditions: tuple[Literal, ...] = ()
    add_effects: tuple[Literal, ...] = ()
    del_effects: tuple[Literal, ...] = ()
    termination: str = ""
    duration_bounds: tuple[int, int] | None = None

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.params)

    @property
    def param_types(self) -> tuple[str, ...]:
        return tuple(t for _, t in self.params)

    def literals(self) -> Iterable[Literal]:
        yield from self.preconditions
        yield from self.add_effects
        yield from self.del_effects


@dataclass(frozen=True)
class ActionSchema:
    name: str
    object_types: tuple[str, ...] = ()
    predicates: tuple[tuple[str, int], ...] = ()
    options: tuple[OptionType, ...] = ()
    constants: tuple[tuple[str, str], ...] = ()

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(o.name for o in self.options)

    def option(self, name: str) -> OptionType:
        for opt in self.options:
            if opt.name == name:
                return opt
        raise KeyError(name)

    def arity(self, predicate: str) -> int | None:
        return dict(self.predicates).get(predicate)


@dataclass(frozen=True)
class SceneDescription:
    """Symbolic scene: typed objects plus initial and goal literals."""

    objects: tuple[tuple[str, str], ...] = ()
    init: tuple[Literal, ...] = ()
    goal: tuple[Literal, ...] = ()

    def __post_init__(self):
        names = [n for n, _ in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("scene object names must be unique")
        known = set(names)
        for lit in (*self.init, *self.goal):
            missing = [a for a in lit.args if a not in known]
            if missing:
                raise ValueError(f"literal {lit} references undeclared objects {missing}")

    def type_of(self, name: str) -> str | None:
        return dict(self.objects).get(name)

    def objects_of_type(self, object_type: str) -> list[str]:
        return [n for n, t in self.objects if t == object_type]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SceneDescription":
        objects = []
        for obj in data.get("objects", []):
            if isinstance(obj, Mapping):
                objects.append((str(obj["name"]), str(obj["type"])))
            else:
                name, typ = obj
                objects.append((str(name), str(typ)))
        return cls(
            objects=tuple(objects),
            init=tuple(Literal.parse(s) for s in data.get("init", [])),
            goal=tuple(Literal.parse(s) for s in data.get("goal", [])),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "objects": [{"name": n, "type": t} for n, t in self.objects],
            "init": [str(lit) for lit in self.init],
            "goal": [str(lit) for lit in self.goal],
        }


@dataclass(frozen=True)
class GroundedOption:
    option: str
    args: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "GroundedOption":
        text = text.strip()
        if "(" not in text:
            if not re.fullmatch(_IDENT, text):
                raise ValueError(f"cannot parse grounded option: {text!r}")
            return cls(text, ())
        m = re.fullmatch(rf"({_IDENT})\s*\(([^()]*)\)", text)
        if m is None:
            raise ValueError(f"cannot parse grounded option: {text!r}")
        return cls(m[1], _split_args(m[2]))

    def __str__(self) -> str:
        return f"{self.option}({','.join(self.args)})"


@dataclass(frozen=True)
class Plan:
    task_id: str
    steps: tuple[GroundedOption, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError(f"plan for {self.task_id!r} has no steps")

    @property
    def K(self) -> int:
        return len(self.steps)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(str(s) for s in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "steps": [{"option": s.option, "args": list(s.args)} for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Plan":
        steps = []
        for step in data["steps"]:
            if isinstance(step, str):
                steps.append(GroundedOption.parse(step))
            else:
                steps.append(GroundedOption(str(step["option"]), tuple(map(str, step.get("args", ())))))
        return cls(str(data["task_id"]), tuple(steps))


def normalize_label(label: str) -> str:
    """Canonical label form used for order comparisons (whitespace-free)."""
    return re.sub(r"\s+", "", label)


@dataclass(frozen=True)
class PlanError:
    kind: str  # UnknownOption | ArityMismatch | UnknownObject | TypeMismatch
    step: int
    message: str = field(default="", compare=False)

    def __str__(self) -> str:
        return f"{self.kind} at step {self.step}: {self.message}"


def validate_plan(schema: ActionSchema, plan: Plan, scene: SceneDescription) -> list[PlanError]:
    errors: list[PlanError] = []
    for k, step in enumerate(plan.steps):
        try:
            opt = schema.option(step.option)
        except KeyError:
            errors.append(PlanError("UnknownOption", k, f"{step.option!r} is not in schema {schema.name!r}"))
            continue
        if len(step.args) != len(opt.params):
            errors.append(
                PlanError("ArityMismatch", k, f"{opt.name} takes {len(opt.params)} args, got {len(step.args)}")
            )
            continue
        for arg, (pname, ptype) in zip(step.args, opt.params):
            actual = scene.type_of(arg)
            if actual is None:
                errors.append(PlanError("UnknownObject", k, f"{arg!r} is not a scene object"))
            elif actual != ptype:
                errors.append(PlanError("TypeMismatch", k, f"{arg!r} has type {actual}, {pname} needs {ptype}"))
    return errors


# -- schema file I/O ---------------------------------------------------------


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that records the source line of every mapping."""


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=deep)
    mapping["__line__"] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
# predicate names such as `on` must not turn into YAML 1.1 booleans
_LineLoader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in resolvers if tag != "tag:yaml.org,2002:bool"]
    for ch, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF")
)


def _parse_param(text: str, where: str, line: int | None) -> tuple[str, str]:
    m = _PARAM_RE.match(str(text))
    if m is None:
        raise SchemaError(f"bad parameter {text!r}, expected 'name - type'", line, where)
    return m["name"], m["type"]


def _literal_list(raw: Any, where: str, line: int | None) -> tuple[Literal, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise SchemaError("expected a list of literals", line, where)
    out = []
    for i, item in enumerate(raw):
        try:
            out.append(Literal.parse(str(item)))
        except ValueError as exc:
            raise SchemaError(str(exc), line, f"{where}[{i}]") from None
    return tuple(out)


def parse_schema(text: str) -> ActionSchema:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SchemaError(f"syntax error: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise SchemaError("schema document must be a mapping", 1)

    unknown = set(doc) - {"name", "types", "constants", "predicates", "options", "__line__"}
    if unknown:
        raise SchemaError(f"unknown sections {sorted(unknown)}", doc["__line__"])
    if "name" not in doc:
        raise SchemaError("missing schema name", doc["__line__"], "name")

    types = tuple(str(t) for t in doc.get("types") or [])
    if len(set(types)) != len(types):
        raise SchemaError("duplicate object type", doc["__line__"], "types")

    constants = tuple(_parse_param(c, "constants", doc["__line__"]) for c in doc.get("constants") or [])

    preds_raw = doc.get("predicates") or {}
    if not isinstance(preds_raw, dict):
        raise SchemaError("predicates must map name to arity", doc["__line__"], "predicates")
    preds_line = preds_raw.pop("__line__", None)
    predicates = []
    for pname, arity in preds_raw.items():
        if not isinstance(arity, int) or isinstance(arity, bool) or arity < 0:
            raise SchemaError(f"arity of {pname!r} must be a non-negative integer", preds_line, f"predicates.{pname}")
        predicates.append((str(pname), arity))

    options = []
    option_lines: list[int | None] = []
    for i, raw in enumerate(doc.get("options") or []):
        if not isinstance(raw, dict):
            raise SchemaError("option entry must be a mapping", None, f"options[{i}]")
        line = raw.get("__line__")
        where = f"options[{i}]"
        extra = set(raw) - {"name", "params", "pre", "add", "del", "termination", "d_min", "d_max", "__line__"}
        if extra:
            raise SchemaError(f"unknown option fields {sorted(extra)}", line, where)
        if "name" not in raw:
            raise SchemaError("option without name", line, f"{where}.name")
        params = tuple(_parse_param(p, f"{where}.params", line) for p in raw.get("params") or [])
        has_min, has_max = "d_min" in raw, "d_max" in raw
        if has_min != has_max:
            raise SchemaError("d_min and d_max must be given together", line, where)
        bounds = None
        if has_min:
            d_min, d_max = raw["d_min"], raw["d_max"]
            if not all(isinstance(d, int) and not isinstance(d, bool) for d in (d_min, d_max)):
                raise SchemaError("duration bounds must be integers", line, where)
            bounds = (d_min, d_max)
        options.append(
            OptionType(
                name=str(raw["name"]),
                params=params,
                preconditions=_literal_list(raw.get("pre"), f"{where}.pre", line),
                add_effects=_literal_list(raw.get("add"), f"{where}.add", line),
                del_effects=_literal_list(raw.get("del"), f"{where}.del", line),
                termination=str(raw.get("termination") or ""),
                duration_bounds=bounds,
            )
        )
        option_lines.append(line)

    schema = ActionSchema(
        name=str(doc["name"]),
        object_types=types,
        predicates=tuple(predicates),
        options=tuple(options),
        constants=constants,
    )
    check_schema(schema, option_lines)
    return schema


def check_schema(schema: ActionSchema, option_lines: Sequence[int | None] = ()) -> None:
    """Raise SchemaError unless every ActionSchema invariant holds."""
    arities = dict(schema.predicates)
    if len(arities) != len(schema.predicates):
        raise SchemaError("duplicate predicate", field="predicates")
    types = set(schema.object_types)
    const_names = {c for c, _ in schema.constants}
    for cname, ctype in schema.constants:
        if ctype not in types:
            raise SchemaError(f"constant {cname!r} has undeclared type {ctype!r}", field="constants")
    seen: set[str] = set()
    for i, opt in enumerate(schema.options):
        line = option_lines[i] if i < len(option_lines) else None
        where = f"options[{i}]"
        if opt.name in seen:
            raise SchemaError(f"duplicate option name {opt.name!r}", line, where)
        seen.add(opt.name)
        if len(set(opt.param_names)) != len(opt.params):
            raise SchemaError(f"duplicate parameter in {opt.name!r}", line, f"{where}.params")
        for pname, ptype in opt.params:
            if ptype not in types:
                raise SchemaError(f"parameter {pname!r} has undeclared type {ptype!r}", line, f"{where}.params")
        if opt.duration_bounds is not None:
            d_min, d_max = opt.duration_bounds
            if d_min < 1:
                raise SchemaError(f"d_min must be >= 1 for {opt.name!r}", line, f"{where}.d_min")
            if d_min > d_max:
                raise SchemaError(f"d_min > d_max for {opt.name!r}", line, f"{where}.d_min")
        scope = set(opt.param_names) | const_names
        for lit in opt.literals():
            if lit.predicate not in arities:
                raise SchemaError(f"undeclared predicate {lit.predicate!r}", line, where)
            if arities[lit.predicate] != len(lit.args):
                raise SchemaError(
                    f"arity mismatch for {lit.predicate!r}: declared {arities[lit.predicate]}, used {len(lit.args)}",
                    line,
                    where,
                )
            unbound = [a for a in lit.args if a not in scope]
            if unbound:
                raise SchemaError(f"literal {lit} uses unbound arguments {unbound}", line, where)


def schema_to_dict(schema: ActionSchema) -> dict[str, Any]:
    options = []
    for opt in schema.options:
        entry: dict[str, Any] = {
            "name": opt.name,
            "params": [f"{n} - {t}" for n, t in opt.params],
            "pre": [str(lit) for lit in opt.preconditions],
            "add": [str(lit) for lit in opt.add_effects],
            "del": [str(lit) for lit in opt.del_effects],
            "termination": opt.termination,
        }
        if opt.duration_bounds is not None:
            entry["d_min"], entry["d_max"] = opt.duration_bounds
        options.append(entry)
    doc: dict[str, Any] = {"name": schema.name, "types": list(schema.object_types)}
    if schema.constants:
        doc["constants"] = [f"{n} - {t}" for n, t in schema.constants]
    doc["predicates"] = dict(schema.predicates)
    doc["options"] = options
    return doc


def serialize_schema(schema: ActionSchema) -> str:
    return yaml.safe_dump(schema_to_dict(schema), sort_keys=False, allow_unicode=True)


def load_schema(path) -> ActionSchema:
    with open(path, encoding="utf-8") as fh:
        return parse_schema(fh.read())


def min_duration(schema: ActionSchema, labels: Sequence[str], default: int = 2) -> int:
    """Smallest declared d_min over the option types named in ``labels``."""
    mins = []
    for label in labels:
        try:
            opt = schema.option(GroundedOption.parse(label).option)
        except (KeyError, ValueError):
            continue
        if opt.duration_bounds is not None:
            mins.append(opt.duration_bounds[0])
    return min(mins) if mins else default
