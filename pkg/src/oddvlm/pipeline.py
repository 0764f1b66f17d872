"""Run one strategy's stage plan for one sample."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .backend.base import Backend, BackendError, Decoding, RawResponse, VlmRequest
from .backend.parsing import ParseReport, parse_predictions, parse_text_field
from .predictions import ParseFlags, PipelineContext, Prediction, PredictionSet, dedupe
from .prompting import (
    COT_STRATEGIES,
    Stage,
    StagePlan,
    StrategyId,
    TokenCounter,
    count_tokens,
    render,
    stage_plan,
)
from .retrieval import DEFAULT_TOP_K, KnowledgeBase, build_knowledge_base, retrieve_topk
from .taxonomy import RoadContextTable, Taxonomy, UnknownRoadTypeError, allowed_for_road_type

log = logging.getLogger(__name__)

__all__ = [
    "MAX_COT_RANK",
    "OverlappingScopesError",
    "PipelineConfig",
    "PipelineContext",
    "Prediction",
    "PredictionSet",
    "RunResult",
    "Sample",
    "StageUsage",
    "default_knowledge_base",
    "merge_persona_outputs",
    "run",
]

MAX_COT_RANK = 2


class OverlappingScopesError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: str


@dataclass(frozen=True)
class PipelineConfig:
    detection: bool = False
    road_table: RoadContextTable | None = None
    # "open": unknown road type falls back to the full label space; "closed": to nothing
    road_fallback: str = "open"
    knowledge_base: KnowledgeBase | None = None
    retrieval_k: int = DEFAULT_TOP_K
    max_workers: int = 5
    tokenizer: TokenCounter = count_tokens
    decoding: Decoding = field(default_factory=Decoding)

    def __post_init__(self) -> None:
        if self.road_fallback not in ("open", "closed"):
            raise ValueError("road_fallback must be 'open' or 'closed'")


@dataclass
class StageUsage:
    stage: str
    estimated_prompt_tokens: int
    reported_prompt_tokens: int | None = None
    reported_completion_tokens: int | None = None
    latency_ms: float = 0.0
    attached_image: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "estimated_prompt_tokens": self.estimated_prompt_tokens,
            "reported_prompt_tokens": self.reported_prompt_tokens,
            "reported_completion_tokens": self.reported_completion_tokens,
            "latency_ms": self.latency_ms,
            "attached_image": self.attached_image,
        }


@dataclass
class RunResult:
    sample_id: str
    strategy: StrategyId
    predictions: PredictionSet
    context: PipelineContext
    usage: list[StageUsage] = field(default_factory=list)
    reports: dict[str, ParseReport] = field(default_factory=dict)
    prompts: dict[str, str] = field(default_factory=dict)
    failed: bool = False
    failure: str | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def image_calls(self) -> int:
        return sum(u.attached_image for u in self.usage)

    def context_digest(self) -> str:
        blob = json.dumps(self.context.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_record(self) -> dict[str, Any]:
        """One audit-log line."""
        return {
            "sample_id": self.sample_id,
            "strategy": self.strategy.value,
            "predictions": [p.to_dict() for p in self.predictions],
            "context_digest": self.context_digest(),
            "token_usage": [u.to_dict() for u in self.usage],
            "timings": {u.stage: u.latency_ms for u in self.usage},
            "parse": {k: r.to_dict() for k, r in self.reports.items()},
            "failed": self.failed,
            "failure": self.failure,
            "warnings": list(self.warnings),
        }


def merge_persona_outputs(
    per_stage: Mapping[str, PredictionSet],
    scopes: Mapping[str, Any] | None = None,
) -> PredictionSet:
    """Disjoint union of persona outputs, ordered by stage, then rank, then id."""
    if scopes is not None:
        seen: dict[str, str] = {}
        for name in per_stage:
            for cid in scopes.get(name, ()):
                if cid in seen and seen[cid] != name:
                    raise OverlappingScopesError(
                        f"concept {cid!r} is in the scope of {seen[cid]!r} and {name!r}"
                    )
                seen[cid] = name
    owner: dict[str, str] = {}
    merged: list[Prediction] = []
    flags = ParseFlags()
    for name, pset in per_stage.items():
        flags.add(pset.flags)
        for p in pset:
            if owner.setdefault(p.concept_id, name) != name:
                raise OverlappingScopesError(
                    f"concept {p.concept_id!r} emitted by {owner[p.concept_id]!r} and {name!r}"
                )
        stage_preds = dedupe(pset.predictions)
        merged.extend(sorted(stage_preds, key=lambda p: (p.rank, p.concept_id, p.center or ())))
    return PredictionSet(merged, flags)


class _Runner:
    def __init__(self, plan, sample, taxonomy, backend, config):
        self.plan: StagePlan = plan
        self.sample: Sample = sample
        self.taxonomy: Taxonomy = taxonomy
        self.backend: Backend = backend
        self.config: PipelineConfig = config
        self.strategy = plan.strategy
        road_types = tuple(config.road_table.road_types) if config.road_table else ()
        self.ctx = PipelineContext(road_types=road_types)
        self.result = RunResult(sample.sample_id, plan.strategy, PredictionSet(), self.ctx)
        self._usage: dict[str, StageUsage] = {}
        self._kb_cache: dict[str, KnowledgeBase] = {}

    # scope the pipeline accepts predictions from
    def acceptance_scope(self, stage: Stage) -> tuple[str, ...]:
        if stage.name in self.ctx.scopes and stage.name not in self.ctx.retrieved:
            return self.ctx.scopes[stage.name]
        return stage.label_scope

    def prepare(self, stage: Stage) -> None:
        """Fill run-time scopes before rendering."""
        if self.strategy is StrategyId.ROAD_DEPENDENT and stage.runtime_scope:
            self.ctx.scopes[stage.name] = self._road_scope(stage)
        elif self.strategy is StrategyId.PERSONA_RAG and stage.runtime_scope:
            describe = stage.consumes_context[0]
            query = self.ctx.texts.get(describe, "")
            hits: list[tuple[str, float]] = []
            kb = self._persona_kb(stage)
            if kb is not None and query.strip():
                hits = retrieve_topk(query, kb, self.config.retrieval_k)
            self.ctx.retrieved[stage.name] = hits

    def _persona_kb(self, stage: Stage) -> KnowledgeBase | None:
        kb = self.config.knowledge_base
        if kb is None:
            return None
        if stage.name not in self._kb_cache:
            self._kb_cache[stage.name] = kb.subset(stage.label_scope)
        return self._kb_cache[stage.name]

    def _road_scope(self, stage: Stage) -> tuple[str, ...]:
        road = self.ctx.texts.get("road_type", "")
        table = self.config.road_table
        try:
            if table is None:
                raise UnknownRoadTypeError(road, ())
            allowed = allowed_for_road_type(road, table)
        except UnknownRoadTypeError:
            if self.config.road_fallback == "open":
                self.result.warnings.append(
                    f"unrecognized road type {road!r}; using the full label space"
                )
                log.warning("sample %s: unrecognized road type %r", self.sample.sample_id, road)
                return stage.label_scope
            self.result.warnings.append(f"unrecognized road type {road!r}; no labels allowed")
            return ()
        return tuple(sorted(allowed & set(stage.label_scope)))

    def call(self, stage: Stage) -> tuple[Stage, str, RawResponse]:
        prompt = render(stage, self.taxonomy, self.ctx, self.strategy, self.config.tokenizer)
        request = VlmRequest(
            prompt_text=prompt.text,
            request_id=f"{self.sample.sample_id}:{self.strategy.value}:{stage.name}",
            images=(self.sample.image,) if stage.attaches_image else (),
            decoding=self.config.decoding,
            stage=stage.name,
            sample_id=self.sample.sample_id,
            strategy=self.strategy.value,
            output_schema=stage.output_schema,
            label_scope=self.acceptance_scope(stage),
            options=self.ctx.road_types if stage.output_schema == "road_type" else (),
        )
        self._usage[stage.name] = StageUsage(
            stage.name, prompt.estimated_tokens, attached_image=stage.attaches_image
        )
        raw = self.backend.complete(request)
        usage = self._usage[stage.name]
        usage.reported_prompt_tokens = raw.prompt_tokens
        usage.reported_completion_tokens = raw.completion_tokens
        usage.latency_ms = raw.latency_ms
        return stage, prompt.text, raw

    def absorb(self, stage: Stage, raw: RawResponse) -> None:
        if stage.output_schema == "road_type":
            self.ctx.texts[stage.name] = parse_text_field(raw, "road_type") or ""
            return
        if stage.output_schema == "description":
            self.ctx.texts[stage.name] = parse_text_field(raw, "description") or ""
            return
        pset, report = parse_predictions(raw, stage.output_schema, self.taxonomy, stage.name)
        allowed = set(self.acceptance_scope(stage))
        kept = []
        for p in pset:
            if p.concept_id not in allowed:
                report.out_of_scope.append(p.concept_id)
            elif self.strategy in COT_STRATEGIES and p.rank > MAX_COT_RANK:
                report.rank_capped.append(p.concept_id)
            else:
                kept.append(p)
        self.result.reports[stage.name] = report
        self.ctx.record(stage.name, PredictionSet(kept, pset.flags), stage.output_schema)

    def execute(self) -> RunResult:
        workers = max(1, self.config.max_workers)
        for wave in self.plan.waves():
            for stage in wave:
                self.prepare(stage)
            try:
                if len(wave) > 1 and workers > 1:
                    with ThreadPoolExecutor(max_workers=min(workers, len(wave))) as pool:
                        outcomes = list(pool.map(self.call, wave))
                else:
                    outcomes = [self.call(s) for s in wave]
            except BackendError as exc:
                self.result.failed = True
                self.result.failure = f"{type(exc).__name__}: {exc}"
                break
            # record in plan order regardless of completion order
            for stage, text, raw in outcomes:
                self.result.prompts[stage.name] = text
                self.absorb(stage, raw)
        self.result.usage = [self._usage[s.name] for s in self.plan.stages if s.name in self._usage]
        self._reorder_context()
        self.result.predictions = self.final_predictions()
        return self.result

    def _reorder_context(self) -> None:
        order = [s.name for s in self.plan.stages]
        self.ctx.outputs = {n: self.ctx.outputs[n] for n in order if n in self.ctx.outputs}
        self.ctx.texts = {n: self.ctx.texts[n] for n in order if n in self.ctx.texts}

    def final_predictions(self) -> PredictionSet:
        outputs = self.ctx.outputs
        if self.strategy is StrategyId.REEVALUATE:
            first = outputs.get("detect", PredictionSet())
            if "verify" not in outputs:
                return PredictionSet(list(first), first.flags)
            confirmed = outputs["verify"].ids
            flags = ParseFlags()
            flags.add(first.flags)
            flags.add(outputs["verify"].flags)
            return PredictionSet([p for p in first if p.concept_id in confirmed], flags)
        label_stages = [s.name for s in self.plan.label_stages()]
        per_stage = {n: outputs[n] for n in label_stages if n in outputs}
        return merge_persona_outputs(per_stage)


_DEFAULT_KBS: dict[tuple[str, tuple[str, ...]], KnowledgeBase] = {}


def default_knowledge_base(taxonomy: Taxonomy) -> KnowledgeBase:
    """Lexical knowledge base over the taxonomy's descriptions, built once per taxonomy."""
    key = (taxonomy.version, taxonomy.ids)
    if key not in _DEFAULT_KBS:
        _DEFAULT_KBS[key] = build_knowledge_base(taxonomy)
    return _DEFAULT_KBS[key]


def run(
    strategy: StrategyId | str,
    sample: Sample,
    taxonomy: Taxonomy,
    backend: Backend,
    config: PipelineConfig | None = None,
) -> RunResult:
    config = config or PipelineConfig()
    plan = stage_plan(strategy, taxonomy, detection=config.detection)
    if plan.strategy is StrategyId.PERSONA_RAG and config.knowledge_base is None:
        config = replace(config, knowledge_base=default_knowledge_base(taxonomy))
    return _Runner(plan, sample, taxonomy, backend, config).execute()
