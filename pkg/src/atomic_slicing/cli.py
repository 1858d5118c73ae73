"""Command-line entry point (``aas``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .exporter import dataset_stats, emit_pddl_domain, emit_pddl_problem, export_manifest
from .ingest import IngestError, load_episodes, select_keyframes
from .io import read_jsonl, write_json, write_jsonl
from .metrics import ReferenceSegmentation, aggregate_report, stability_at_jitter
from .pipeline import RunOptions, resolve_plans, run_episodes
from .planner import PlanRegistry
from .remote import JsonServiceClient, RemoteError
from .schema import Plan, SchemaError, load_schema
from .segmenter import (
    BackendError,
    HeuristicBackend,
    RemoteBackend,
    ReplayBackend,
    ReplayStore,
    build_request,
)
from .synth import OracleBackend, SynthConfig, generate_dataset
from .validator import (
    CalibrationConfig,
    DurationBounds,
    EpisodeResult,
    project_proposal,
    keyframe_seed,
    run_tag,
)

log = logging.getLogger("atomic_slicing")

EXIT_OK = 0
EXIT_REJECTIONS = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Bad flags, unreadable inputs or planning failures; exit code 2."""

    def __init__(self, error: str, detail: Any = None):
        self.error = error
        self.detail = detail
        super().__init__(f"{error}: {detail}")


def _report_error(err: ConfigError) -> None:
    print(json.dumps({"error": err.error, "detail": err.detail}, sort_keys=True), file=sys.stderr)


# -- shared loaders ----------------------------------------------------------


def _episodes(args, errors: list | None = None):
    try:
        return load_episodes(args.episodes, strict=args.strict, errors=errors)
    except IngestError as exc:
        raise ConfigError("IngestError", str(exc)) from None


def _schema(args):
    try:
        return load_schema(args.schema)
    except SchemaError as exc:
        raise ConfigError("SchemaError", str(exc)) from None


def _plans(args, episodes, schema):
    given = registry = planner = None
    if getattr(args, "plans", None):
        given = {rec["episode_id"]: Plan.from_dict(rec) for rec in read_jsonl(args.plans)}
    elif getattr(args, "planner_endpoint", None):
        planner = JsonServiceClient(args.planner_endpoint, timeout=args.timeout, retries=args.remote_retries)
    elif getattr(args, "registry", None):
        registry = PlanRegistry.load(args.registry)
    else:
        raise ConfigError("ConfigError", "one of --plans, --registry or --planner-endpoint is required")
    plans, failures = resolve_plans(episodes, schema, registry, given, planner)
    if failures:
        for f in failures:
            log.warning("planning failed for %s (%s): %s", f.episode_id, f.task_id, f.detail)
        if args.strict or not plans:
            raise ConfigError("PlanningError", [f.to_dict() for f in failures])
    return plans, failures


def _references(path) -> dict[str, ReferenceSegmentation]:
    refs = [ReferenceSegmentation.from_dict(r) for r in read_jsonl(path)]
    return {r.episode_id: r for r in refs}


def _backend(args, schema):
    kind = args.backend
    if kind == "heuristic":
        return HeuristicBackend(schema)
    if kind == "replay":
        if not args.replay_store:
            raise ConfigError("ConfigError", "--replay-store is required for the replay backend")
        return ReplayBackend(ReplayStore.load(args.replay_store), args.replay_backend_id)
    if kind == "remote":
        if not args.endpoint:
            raise ConfigError("ConfigError", "--endpoint (or AAS_ENDPOINT) is required for the remote backend")
        return RemoteBackend(args.endpoint, args.anchored, args.timeout, args.remote_retries)
    if kind == "oracle":
        if not args.references:
            raise ConfigError("ConfigError", "--references is required for the oracle backend")
        cfg = SynthConfig(
            num_episodes=0,
            boundary_noise_sigma=args.sigma,
            label_error_rate=args.label_error,
            drop_step_rate=args.drop_rate,
            seed=args.oracle_seed,
            K_range=(1, 1),
            T_range=(2, 2),
        )
        return OracleBackend(_references(args.references), cfg, schema)
    raise ConfigError("ConfigError", f"unknown backend {kind!r}")


def _bounds(args, schema) -> DurationBounds:
    base = DurationBounds.load(args.bounds) if args.bounds else None
    return DurationBounds.from_schema(schema, base)


def _calibration(args) -> CalibrationConfig:
    return CalibrationConfig.load(args.calibration) if args.calibration else CalibrationConfig()


def _options(args) -> RunOptions:
    fewshot: tuple[str, ...] = ()
    if args.fewshot:
        fewshot = tuple(Path(args.fewshot).read_text(encoding="utf-8").split("\n---\n"))
    return RunOptions(args.budget, args.jitter, args.retries, args.seed, fewshot, max(1, args.jobs))


def _summary_lines(summary: dict[str, Any]) -> list[str]:
    def fmt(v, spec):
        return "n/a" if v is None else format(v, spec)

    return [
        f"Successful segmentations: {summary['accepted']} / {summary['episodes']}",
        f"Success rate: {fmt(summary['success_rate'] and summary['success_rate'] * 100, '.1f')}%",
        f"Avg. segments per demo: {fmt(summary['avg_segments'], '.2f')}",
        f"Avg. trajectory length (frames): {fmt(summary['avg_traj_len'], '.1f')}",
        f"Mean Kendall's W: {fmt(summary['kendalls_w_mean'], '.4f')}",
    ]


def _write_run_outputs(args, results: list[EpisodeResult], refs, extra: dict[str, Any]) -> dict[str, Any]:
    out = Path(args.out)
    write_jsonl(out / "results.jsonl", [r.to_dict() for r in results])
    manifest = export_manifest(results, args.threshold)
    write_jsonl(out / "manifest.jsonl", manifest.records())
    write_json(out / "stats.json", dataset_stats(results, manifest).to_dict())
    report = aggregate_report(results, refs)
    write_json(out / "metrics.json", report.to_dict())
    summary = {**report.summary(), **extra}
    write_json(out / "summary.json", summary)
    for line in _summary_lines(summary):
        print(line)
    return summary


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_episodes=args.num_episodes,
        K_range=(args.k_min, args.k_max),
        T_range=(args.t_min, args.t_max),
        boundary_noise_sigma=args.sigma,
        label_error_rate=args.label_error,
        drop_step_rate=args.drop_rate,
        seed=args.seed,
        task_prefix=args.task_prefix,
        id_prefix=args.id_prefix,
    )
    generate_dataset(cfg).write(args.out)
    print(f"wrote {cfg.num_episodes} synthetic episodes to {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    episodes = _episodes(args)
    schema = _schema(args)
    plans, failures = _plans(args, episodes, schema)
    records = [{"episode_id": eid, **plans[eid].to_dict()} for eid in sorted(plans)]
    write_jsonl(args.out, records)
    print(f"wrote {len(records)} plans to {args.out}")
    if failures:
        _report_error(ConfigError("PlanningError", [f.to_dict() for f in failures]))
        return EXIT_CONFIG
    return EXIT_OK


def _run(args) -> int:
    ingest_errors: list[IngestError] = []
    episodes = _episodes(args, ingest_errors)
    schema = _schema(args)
    plans, plan_failures = _plans(args, episodes, schema)
    backend = _backend(args, schema)
    refs = _references(args.references) if args.references else None
    results = run_episodes(episodes, plans, backend, schema, _bounds(args, schema), _calibration(args), _options(args))
    extra = {"skipped_lines": len(ingest_errors), "planning_failures": len(plan_failures)}
    _write_run_outputs(args, results, refs, extra)
    if args.strict and any(not r.accepted for r in results):
        return EXIT_REJECTIONS
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(args)


def cmd_validate(args) -> int:
    args.backend = "replay"
    if not args.replay_store:
        raise ConfigError("ConfigError", "--replay-store is required")
    return _run(args)


def _query_runs(args):
    """Yield (episode, plan, primary proposal, jittered proposal) for attempt 0."""
    episodes = _episodes(args)
    schema = _schema(args)
    plans, _ = _plans(args, episodes, schema)
    backend = _backend(args, schema)
    for ep in episodes:
        if ep.episode_id not in plans:
            continue
        plan = plans[ep.episode_id]
        runs = []
        for run, jitter in enumerate((0, args.jitter)):
            kf = select_keyframes(ep, args.budget, jitter, keyframe_seed(args.seed, ep.episode_id, 0, run))
            request = build_request(ep, plan, schema, kf, run_tag=run_tag(jitter, 0))
            try:
                runs.append(backend.propose(request, ep))
            except (BackendError, RemoteError) as exc:
                log.warning("%s: backend failure: %s", ep.episode_id, exc)
                runs.append(None)
        yield ep, plan, runs[0], runs[1]


def cmd_segment(args) -> int:
    store = ReplayStore()
    for _, _, raw0, raw2 in _query_runs(args):
        for raw in (raw0, raw2):
            if raw is not None:
                store.record(raw)
    write_json(args.out, store.to_dict())
    print(f"recorded {len(store)} proposals to {args.out}")
    return EXIT_OK


def cmd_stability(args) -> int:
    rows = {}
    for ep, _, raw0, raw2 in _query_runs(args):
        if raw0 is None:
            rows[ep.episode_id] = None
            continue
        run0 = project_proposal(raw0, ep.num_frames)
        run2 = project_proposal(raw2, ep.num_frames) if raw2 is not None else ()
        rows[ep.episode_id] = stability_at_jitter(run0, run2)
    values = [v for v in rows.values() if v is not None]
    doc = {
        "jitter": args.jitter,
        "per_episode": dict(sorted(rows.items())),
        "mean": sum(values) / len(values) if values else None,
    }
    write_json(args.out, doc)
    print(f"Stability@Jitter (±{args.jitter}): {'n/a' if doc['mean'] is None else format(doc['mean'], '.4f')}")
    return EXIT_OK


def _results_from_predictions(pred_path, refs, plans_path=None) -> list[EpisodeResult]:
    plans = {}
    if plans_path:
        plans = {rec["episode_id"]: Plan.from_dict(rec) for rec in read_jsonl(plans_path)}
    results = []
    for rec in read_jsonl(pred_path):
        pred = ReferenceSegmentation.from_dict(rec)
        ref = refs.get(pred.episode_id)
        plan_labels = plans[pred.episode_id].labels if pred.episode_id in plans else (ref.labels if ref else pred.labels)
        T = pred.spans[-1][1] if pred.spans else 0
        results.append(
            EpisodeResult(
                pred.episode_id,
                rec.get("task_id", ""),
                T,
                "accepted",
                plan_labels=plan_labels,
                pred_labels=pred.labels,
                pred_spans=pred.spans,
            )
        )
    return results


def cmd_metrics(args) -> int:
    refs = _references(args.references) if args.references else {}
    if args.pred:
        results = _results_from_predictions(args.pred, refs, args.plans)
    elif args.results:
        results = [EpisodeResult.from_dict(r) for r in read_jsonl(args.results)]
    else:
        raise ConfigError("ConfigError", "one of --results or --pred is required")
    report = aggregate_report(results, refs)
    write_json(args.out, report.to_dict())
    print(json.dumps(report.aggregate, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    results = [EpisodeResult.from_dict(r) for r in read_jsonl(args.results)]
    out = Path(args.out)
    thresholds = args.threshold if isinstance(args.threshold, list) else [args.threshold]
    single = len(thresholds) == 1
    for c_min in thresholds:
        manifest = export_manifest(results, c_min)
        suffix = "" if single else f"_c{c_min:.2f}"
        write_jsonl(out / f"manifest{suffix}.jsonl", manifest.records())
        stats = dataset_stats(results, manifest)
        write_json(out / f"stats{suffix}.json", stats.to_dict())
        print(f"threshold {c_min:.2f}: {len(manifest)} segments from {stats.episodes_accepted} accepted episodes")
    if args.schema:
        schema = _schema(args)
        (out / "domain.pddl").write_text(emit_pddl_domain(schema), encoding="utf-8")
        if args.episodes:
            for ep in _episodes(args):
                try:
                    text = emit_pddl_problem(ep.scene, schema.name, ep.episode_id.replace("/", "_"))
                except ValueError as exc:
                    log.warning("no PDDL problem for %s: %s", ep.episode_id, exc)
                    continue
                (out / "problems").mkdir(parents=True, exist_ok=True)
                (out / "problems" / f"{ep.episode_id.replace('/', '_')}.pddl").write_text(text, encoding="utf-8")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common_inputs(p: argparse.ArgumentParser, plans: bool = True) -> None:
    p.add_argument("--episodes", required=True, help="episode records (JSONL)")
    p.add_argument("--schema", required=True, help="action schema (YAML)")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed episode line")
    if plans:
        src = p.add_argument_group("plan source (one of)")
        src.add_argument("--plans", help="precomputed plans (JSONL, keyed by episode_id)")
        src.add_argument("--registry", help="plan template registry (YAML)")
        src.add_argument("--planner-endpoint", default=os.environ.get("AAS_PLANNER_ENDPOINT"))


def _add_backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["heuristic", "replay", "remote", "oracle"], default="heuristic")
    p.add_argument("--replay-store", help="recorded proposals (JSON)")
    p.add_argument("--replay-backend-id", default="replay", help="backend id used in replay-store keys")
    p.add_argument("--endpoint", default=os.environ.get("AAS_ENDPOINT"), help="remote segmenter URL")
    p.add_argument("--anchored", action="store_true", help="replace remote labels by plan labels")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--remote-retries", type=int, default=2)
    p.add_argument("--references", help="reference segmentations (JSONL)")
    p.add_argument("--sigma", type=float, default=0.0, help="oracle boundary noise (frames)")
    p.add_argument("--label-error", type=float, default=0.0)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--oracle-seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=8, help="keyframe budget")
    p.add_argument("--jitter", type=int, default=2, help="keyframe jitter (frames)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aas", description="Atomic action slicing pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="YAML file whose keys override flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-episodes", type=int, default=100)
    p.add_argument("--k-min", type=int, default=3)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--t-min", type=int, default=150)
    p.add_argument("--t-max", type=int, default=350)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--label-error", type=float, default=0.0)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-prefix", default="synth")
    p.add_argument("--id-prefix", default="ep")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", help="discover plans for every episode")
    _add_common_inputs(p)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--remote-retries", type=int, default=2)
    p.add_argument("--out", required=True, help="plans file (JSONL)")
    p.set_defaults(func=cmd_plan)

    for name, func, helptext in (
        ("run", cmd_run, "full pipeline: plan, segment, validate, export, report"),
        ("validate", cmd_validate, "validate recorded proposals from a replay store"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common_inputs(p)
        _add_backend(p)
        p.add_argument("--bounds", help="duration bounds (YAML)")
        p.add_argument("--calibration", help="calibration weights (YAML)")
        p.add_argument("--fewshot", help="few-shot examples, separated by lines of '---'")
        p.add_argument("--retries", type=int, default=2, help="re-query budget per episode")
        p.add_argument("--threshold", type=float, default=0.0, help="manifest confidence threshold")
        p.add_argument("--jobs", type=int, default=int(os.environ.get("AAS_JOBS", os.cpu_count() or 1)))
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    for name, func, helptext in (
        ("segment", cmd_segment, "query a backend and record its proposals as a replay store"),
        ("stability", cmd_stability, "Stability@Jitter of a backend"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common_inputs(p)
        _add_backend(p)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("metrics", help="score results or predictions against references")
    p.add_argument("--results", help="results.jsonl from run/validate")
    p.add_argument("--pred", help="predicted segmentations in reference format (JSONL)")
    p.add_argument("--plans", help="plans for --pred (defaults to the reference labels)")
    p.add_argument("--references", help="reference segmentations (JSONL)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export", help="manifests, dataset statistics and PDDL")
    p.add_argument("--results", required=True)
    p.add_argument("--threshold", type=float, nargs="+", default=[0.0])
    p.add_argument("--schema", help="emit domain.pddl from this schema")
    p.add_argument("--episodes", help="emit one PDDL problem per episode scene")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError("ConfigError", f"cannot read config: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("ConfigError", "config file must be a mapping")
    # explicit flags win over the config file
    for key, value in doc.items():
        dest = str(key).replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigError("ConfigError", f"unknown config key {key!r}")
        flag = "--" + dest.replace("_", "-")
        if not any(a == flag or a.startswith(flag + "=") for a in argv):
            setattr(args, dest, value)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except ConfigError as err:
        _report_error(err)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as exc:
        _report_error(ConfigError(type(exc).__name__, str(exc)))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
