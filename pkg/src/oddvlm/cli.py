"""Command-line entry point: ``oddvlm validate|plan|run|score|report|compare``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import evaluation as ev
from .backend import BackendConfigError, HttpBackend, RemoteProfile
from .backend.mock import OracleBackend, ScriptedBackend, SeededNoiseBackend
from .pipeline import PipelineConfig, Sample, run
from .predictions import Prediction, PredictionSet
from .prompting import StrategyId, budget, stage_plan, template_digest
from .taxonomy import (
    REFERENCE_COUNTS,
    RoadContextTable,
    Taxonomy,
    TaxonomyError,
    data_path,
    load_road_context,
    load_taxonomy,
    mapillary_taxonomy,
    partition_by_persona,
    reference_road_context,
    reference_taxonomy,
)

log = logging.getLogger("oddvlm")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

BUILTIN_TAXONOMIES = {"reference": reference_taxonomy, "mapillary": mapillary_taxonomy}
DEMO_DIR = data_path("demo")


class CliError(Exception):
    """A user-facing problem detected before any artifact is written."""


def _taxonomy(spec: str | None) -> Taxonomy:
    if spec is None or spec in BUILTIN_TAXONOMIES:
        return BUILTIN_TAXONOMIES[spec or "reference"]()
    path = Path(spec)
    if not path.is_file():
        raise CliError(f"taxonomy not found: {path}")
    try:
        return load_taxonomy(path)
    except TaxonomyError as exc:
        raise CliError(f"invalid taxonomy {path}: {exc}") from None


def _road_table(spec: str | None, taxonomy: Taxonomy) -> RoadContextTable | None:
    if spec:
        if not Path(spec).is_file():
            raise CliError(f"road context not found: {spec}")
        return load_road_context(spec, taxonomy)
    if taxonomy.version == reference_taxonomy().version:
        return reference_road_context(taxonomy)
    return None


def _strategies(value: str) -> list[StrategyId]:
    if value == "all":
        return list(StrategyId)
    try:
        return [StrategyId.parse(v) for v in value.split(",")]
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# validate ------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    source = args.taxonomy
    try:
        if source in BUILTIN_TAXONOMIES:
            taxonomy = BUILTIN_TAXONOMIES[source]()
        else:
            path = Path(source)
            if not path.is_file():
                print(f"error: taxonomy not found: {path}", file=sys.stderr)
                return EXIT_FAILED
            taxonomy = load_taxonomy(path)
        parts = partition_by_persona(taxonomy)
    except TaxonomyError as exc:
        print(f"invalid taxonomy: {exc}", file=sys.stderr)
        for entry in getattr(exc, "entries", ()) or ():
            print(f"  offending: {entry}", file=sys.stderr)
        return EXIT_FAILED

    counts = taxonomy.category_counts()
    shape = "/".join(str(counts.get(c, 0)) for c in REFERENCE_COUNTS)
    print(f"{len(taxonomy)} concepts ({shape})")
    print(f"version: {taxonomy.version}")
    covered = sum(len(ids) for ids in parts.values())
    print(f"persona partition: {len(parts)} personas covering {covered}/{len(taxonomy)} concepts")
    for name, ids in parts.items():
        print(f"  {name}: {len(ids)}")
    ok = covered == len(taxonomy)
    if args.reference_counts and counts != dict(REFERENCE_COUNTS):
        print(f"category counts differ from the reference ({'/'.join(map(str, REFERENCE_COUNTS.values()))})")
        ok = False
    return EXIT_OK if ok else EXIT_FAILED


# plan ------------------------------------------------------------------------


def cmd_plan(args: argparse.Namespace) -> int:
    taxonomy = _taxonomy(args.taxonomy)
    table = _road_table(args.road_context, taxonomy)
    road_types = tuple(table.road_types) if table else ()
    for strategy in _strategies(args.strategy):
        plan = stage_plan(strategy, taxonomy, detection=args.detection)
        b = budget(strategy, taxonomy, road_types=road_types, detection=args.detection)
        print(f"{strategy.value}  ({strategy.title})  budget {b}")
        width = max(len(stage.name) for stage in plan.stages)
        for wave_no, wave in enumerate(plan.waves(), 1):
            for stage in wave:
                image = "image" if stage.attaches_image else "text"
                after = ",".join(stage.consumes_context) or "-"
                print(
                    f"  wave {wave_no}  {stage.name:<{width}}  {image:<5} "
                    f"{len(stage.label_scope):>3} labels  after {after}"
                )
    return EXIT_OK


# run ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    strategies: tuple[StrategyId, ...]
    taxonomy: str | None
    manifest: str
    backend: str
    out: str
    tau: float = ev.DEFAULT_TAU
    k_retrieval: int = 8
    seed: int | None = None
    concurrency: int = 5
    road_context: str | None = None
    road_fallback: str = "open"
    profiles: str | None = None
    confusion_rate: float = 0.2

    def digest(self) -> str:
        doc = {k: v for k, v in self.__dict__.items() if k != "out"}
        doc["strategies"] = [s.value for s in self.strategies]
        return _digest(doc)


RUN_DEFAULTS = {
    "strategy": "all",
    "taxonomy": None,
    "manifest": None,
    "backend": "mock:oracle",
    "out": None,
    "tau": ev.DEFAULT_TAU,
    "k_retrieval": 8,
    "seed": None,
    "concurrency": 5,
    "road_context": None,
    "road_fallback": "open",
    "profiles": None,
    "confusion_rate": 0.2,
}


def _run_config(args: argparse.Namespace) -> RunConfig:
    merged = dict(RUN_DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc.msg}") from None
        unknown = set(doc) - set(RUN_DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(doc)
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if not merged["manifest"]:
        raise CliError("a manifest is required (--manifest)")
    if not merged["out"]:
        raise CliError("an output directory is required (--out)")
    if not Path(merged["manifest"]).is_file():
        raise CliError(f"manifest not found: {merged['manifest']}")
    if merged["concurrency"] < 1:
        raise CliError("--concurrency must be at least 1")
    if merged["k_retrieval"] < 1:
        raise CliError("--k-retrieval must be at least 1")
    if merged["tau"] <= 0:
        raise CliError("--tau must be positive")
    if merged["road_fallback"] not in ("open", "closed"):
        raise CliError("--road-fallback must be 'open' or 'closed'")
    return RunConfig(
        strategies=tuple(_strategies(merged["strategy"])),
        taxonomy=merged["taxonomy"],
        manifest=merged["manifest"],
        backend=merged["backend"],
        out=merged["out"],
        tau=float(merged["tau"]),
        k_retrieval=int(merged["k_retrieval"]),
        seed=merged["seed"],
        concurrency=int(merged["concurrency"]),
        road_context=merged["road_context"],
        road_fallback=merged["road_fallback"],
        profiles=merged["profiles"],
        confusion_rate=float(merged["confusion_rate"]),
    )


def _make_backend(cfg: RunConfig, truth, taxonomy: Taxonomy, table: RoadContextTable | None):
    kind, _, arg = cfg.backend.partition(":")
    if kind == "mock":
        mode, _, path = arg.partition(":")
        if mode == "oracle":
            return OracleBackend(truth, taxonomy, table)
        if mode == "noise":
            if cfg.seed is None:
                raise CliError("mock:noise needs --seed")
            return SeededNoiseBackend(truth, cfg.seed, cfg.confusion_rate, taxonomy, table)
        if mode == "scripted":
            script = Path(path) if path else DEMO_DIR / "confusion_script.json"
            if not script.is_file():
                raise CliError(f"script not found: {script}")
            try:
                return ScriptedBackend.from_file(script)
            except (json.JSONDecodeError, KeyError) as exc:
                raise CliError(f"invalid script {script}: {exc}") from None
        raise CliError(f"unknown mock mode {mode!r} (oracle, scripted, noise)")
    if kind == "remote":
        if not cfg.profiles:
            raise CliError("remote backends need --profiles pointing at a profile file")
        if not Path(cfg.profiles).is_file():
            raise CliError(f"profile file not found: {cfg.profiles}")
        try:
            profile = RemoteProfile.from_file(cfg.profiles, arg or None)
            profile = replace(profile, max_in_flight=cfg.concurrency)
            return HttpBackend(profile)
        except (BackendConfigError, KeyError) as exc:
            raise CliError(f"backend misconfigured: {exc}") from None
    raise CliError(f"unknown backend {cfg.backend!r} (mock:MODE or remote:PROFILE)")


def _write_jsonl(path: Path, rows: list[dict[str, Any]]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    taxonomy = _taxonomy(cfg.taxonomy)
    table = _road_table(cfg.road_context, taxonomy)
    try:
        kind = ev.detect_manifest_kind(cfg.manifest)
        if kind == "detection":
            samples = ev.load_detection_manifest(cfg.manifest, taxonomy)
        else:
            samples = ev.load_classification_manifest(cfg.manifest, taxonomy)
    except (ev.ManifestError, json.JSONDecodeError) as exc:
        raise CliError(str(exc)) from None
    if not samples:
        raise CliError(f"manifest {cfg.manifest} has no samples")
    backend = _make_backend(cfg, ev.truth_for(samples), taxonomy, table)
    detection = kind == "detection"
    pconfig = PipelineConfig(
        detection=detection,
        road_table=table,
        road_fallback=cfg.road_fallback,
        retrieval_k=cfg.k_retrieval,
        max_workers=cfg.concurrency,
    )
    provenance = {
        "taxonomy_version": taxonomy.version,
        "template_digest": template_digest(),
        "config_digest": cfg.digest(),
        "backend": cfg.backend,
        "manifest": Path(cfg.manifest).name,
    }

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    reports = []
    road_types = tuple(table.road_types) if table else ()
    for strategy in cfg.strategies:
        records, audit, scored = [], [], []
        for s in samples:
            result = run(strategy, Sample(s.sample_id, s.image), taxonomy, backend, pconfig)
            failures += result.failed
            records.append(result.to_record())
            for stage, text in result.prompts.items():
                audit.append(
                    {
                        "sample_id": s.sample_id,
                        "strategy": strategy.value,
                        "stage": stage,
                        "prompt_sha256": hashlib.sha256(text.encode()).hexdigest(),
                        "prompt": text,
                    }
                )
            scored.append((s, result.predictions))
        report = _score(scored, taxonomy, detection, cfg.tau, strategy.title)
        report.strategy = strategy.value
        report.budget = budget(strategy, taxonomy, road_types=road_types, detection=detection)
        report.provenance = dict(provenance)
        reports.append(report)
        target = out / strategy.value
        target.mkdir(exist_ok=True)
        _write_jsonl(target / "records.jsonl", records)
        _write_jsonl(target / "audit.jsonl", audit)
        ev.save_report(report, target / "report.json")
        print(_summary_line(report))
    if not detection:
        rows = ev.cost_performance_table(reports)
        (out / "cost_performance.csv").write_text(ev.cost_table_csv(rows), encoding="utf-8")
        (out / "per_category.csv").write_text(ev.category_table_csv(reports), encoding="utf-8")
    else:
        (out / "detection.csv").write_text(ev.detection_table_csv(reports), encoding="utf-8")
    if failures:
        print(f"{failures} pipeline run(s) failed; see records.jsonl", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _score(scored, taxonomy: Taxonomy, detection: bool, tau: float, name: str) -> ev.EvalReport:
    if detection:
        matchings = [ev.match_detections(p, s, tau) for s, p in scored]
        return ev.detection_metrics(matchings, taxonomy.version, name, tau)
    return ev.classification_recall(scored, taxonomy, name)


def _summary_line(report: ev.EvalReport) -> str:
    if report.kind == "detection":
        l2 = "n/a" if report.avg_l2 is None else f"{report.avg_l2:.4f}"
        return (
            f"{report.strategy}: P={report.precision:.4f} R={report.recall:.4f} "
            f"F1={report.f1:.4f} L2={l2}"
        )
    return f"{report.strategy}: recall={report.recall:.4f} over {report.sample_count} samples"


# score ---------------------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> int:
    taxonomy = _taxonomy(args.taxonomy)
    for p in (args.records, args.manifest):
        if not Path(p).is_file():
            raise CliError(f"not found: {p}")
    kind = ev.detect_manifest_kind(args.manifest)
    try:
        if kind == "detection":
            samples = ev.load_detection_manifest(args.manifest, taxonomy)
        else:
            samples = ev.load_classification_manifest(args.manifest, taxonomy)
    except ev.ManifestError as exc:
        raise CliError(str(exc)) from None
    by_id = {s.sample_id: s for s in samples}
    scored = []
    strategy = None
    for line in Path(args.records).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        strategy = rec.get("strategy", strategy)
        sample = by_id.get(rec["sample_id"])
        if sample is None:
            raise CliError(f"record for unknown sample {rec['sample_id']!r}")
        preds = [
            Prediction(
                d["label"],
                int(d.get("rank", 1)),
                tuple(d["center"]) if d.get("center") is not None else None,
                d.get("stage", ""),
            )
            for d in rec["predictions"]
        ]
        scored.append((sample, PredictionSet(preds)))
    if not scored:
        raise CliError(f"no records in {args.records}")
    name = StrategyId.parse(strategy).title if strategy else "scored"
    report = _score(scored, taxonomy, kind == "detection", args.tau, name)
    report.strategy = strategy
    report.provenance = {"taxonomy_version": taxonomy.version, "records": Path(args.records).name}
    print(_summary_line(report))
    if args.out:
        ev.save_report(report, args.out)
    return EXIT_OK


# report / compare ------------------------------------------------------------------


def _load_reports(paths: Sequence[str], fixtures: Sequence[str]) -> list[ev.EvalReport]:
    reports = []
    for name in fixtures:
        try:
            reports.extend(ev.load_fixture_reports(name))
        except FileNotFoundError:
            raise CliError(f"no bundled fixture set {name!r} (strategies, models, detection)") from None
    for p in paths:
        if not Path(p).is_file():
            raise CliError(f"report not found: {p}")
        try:
            reports.append(ev.load_report(p))
        except (json.JSONDecodeError, KeyError) as exc:
            raise CliError(f"invalid report {p}: {exc}") from None
    if not reports:
        raise CliError("give at least one report path or --fixtures set")
    return reports


def cmd_report(args: argparse.Namespace) -> int:
    reports = _load_reports(args.reports, args.fixtures or [])
    csv_dir = Path(args.csv_dir) if args.csv_dir else None
    if csv_dir:
        csv_dir.mkdir(parents=True, exist_ok=True)
    classification = [r for r in reports if r.kind == "classification"]
    detection = [r for r in reports if r.kind == "detection"]
    sections = []

    budgeted = [r for r in classification if r.budget is not None]
    if budgeted:
        rows = ev.cost_performance_table(budgeted)
        sections.append("Cost and performance\n" + ev.format_cost_table(rows))
        if csv_dir:
            (csv_dir / "cost_performance.csv").write_text(ev.cost_table_csv(rows), encoding="utf-8")
            (csv_dir / "cost_plot.csv").write_text(
                ev.cost_plot_csv(rows, args.image_tokens), encoding="utf-8"
            )
    broken_down = [r for r in classification if r.per_category]
    if broken_down:
        sections.append("Recall by category\n" + ev.format_category_table(broken_down))
        if csv_dir:
            (csv_dir / "per_category.csv").write_text(
                ev.category_table_csv(broken_down), encoding="utf-8"
            )
    if detection:
        sections.append("Detection\n" + ev.format_detection_table(detection))
        if csv_dir:
            (csv_dir / "detection.csv").write_text(ev.detection_table_csv(detection), encoding="utf-8")
    if len(broken_down) > 1:
        base = broken_down[0]
        for other in broken_down[1:]:
            try:
                rows = ev.compare_reports(base, other)
            except ev.ReportMismatchError as exc:
                print(f"skipping deltas for {other.name}: {exc}", file=sys.stderr)
                continue
            text = ev.deltas_to_csv(rows, base.name, other.name)
            sections.append(f"Deltas {base.name} - {other.name}\n" + text.rstrip())
            if csv_dir:
                slug = "".join(ch if ch.isalnum() else "_" for ch in other.name).strip("_").lower()
                (csv_dir / f"deltas_{slug}.csv").write_text(text, encoding="utf-8")
    print("\n\n".join(sections))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    a, b = _load_reports([args.a, args.b], [])
    try:
        rows = ev.compare_reports(a, b)
    except ev.ReportMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    text = ev.deltas_to_csv(rows, a.name, b.name)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oddvlm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a taxonomy file and print its shape")
    p.add_argument("taxonomy", nargs="?", default="reference", help="path, or 'reference'/'mapillary'")
    p.add_argument("--reference-counts", action="store_true", help="require the 27/55/96/12/42 split")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="print stage plans and token budgets")
    p.add_argument("--strategy", default="all")
    p.add_argument("--taxonomy")
    p.add_argument("--road-context")
    p.add_argument("--detection", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run strategies over a manifest and score them")
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--strategy", help="strategy id, comma list, or 'all'")
    p.add_argument("--taxonomy")
    p.add_argument("--manifest")
    p.add_argument("--backend", help="mock:oracle | mock:scripted[:PATH] | mock:noise | remote:PROFILE")
    p.add_argument("--profiles", help="JSON file of remote profiles")
    p.add_argument("--road-context")
    p.add_argument("--road-fallback", choices=["open", "closed"])
    p.add_argument("--tau", type=float)
    p.add_argument("--k-retrieval", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--confusion-rate", type=float)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="re-score a records.jsonl file")
    p.add_argument("--records", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--tau", type=float, default=ev.DEFAULT_TAU)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="render tables from report files")
    p.add_argument("reports", nargs="*")
    p.add_argument("--fixtures", action="append", help="bundled set: strategies, models, detection")
    p.add_argument("--image-tokens", type=float, default=ev.DEFAULT_IMAGE_TOKENS)
    p.add_argument("--csv-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="signed deltas between two reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
