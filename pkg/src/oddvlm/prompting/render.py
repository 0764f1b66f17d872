"""Template rendering and fixed-token budgets."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

from ..predictions import PipelineContext, PredictionSet, serialize_predictions
from ..taxonomy import Taxonomy
from .strategies import COT_STRATEGIES, PERSONA_STRATEGIES, Stage, StagePlan, StrategyId, stage_plan
from .tokens import TokenCounter, count_tokens

_PLACEHOLDER = re.compile(r"\{\{\s*([\w.]+)\s*\}\}")

UNCERTAINTY_RULE = (
    " When the evidence leaves two labels plausible for the same element, you may report"
    " both, ranked 1 and 2 by confidence; never use a rank above 2."
)


class MissingContextError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


class TemplateError(ValueError):
    pass


def _template_dir():
    return resources.files("oddvlm") / "prompting" / "templates"


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    path = _template_dir() / f"{template_id}.txt"
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise TemplateError(f"no template named {template_id!r}") from None


@lru_cache(maxsize=None)
def _load_json(name: str) -> dict:
    return json.loads((_template_dir() / name).read_text(encoding="utf-8"))


def load_registry() -> dict[str, dict[str, str]]:
    return _load_json("registry.json")


def template_digest() -> str:
    """sha256 over every bundled template file, for report provenance."""
    h = hashlib.sha256()
    for entry in sorted(_template_dir().iterdir(), key=lambda p: p.name):
        if entry.name.endswith((".txt", ".json")):
            h.update(entry.name.encode())
            h.update(entry.read_bytes())
    return h.hexdigest()


def fill(template: str, values: dict[str, str]) -> str:
    def sub(match: re.Match) -> str:
        key = match.group(1)
        if key not in values:
            raise TemplateError(f"template placeholder {{{{{key}}}}} has no value")
        return values[key]

    text = _PLACEHOLDER.sub(sub, template)
    # sections that rendered empty leave runs of blank lines behind
    return re.sub(r"\n{3,}", "\n\n", text).strip() + "\n"


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    stage: Stage
    estimated_tokens: int


def serialize_stage_output(name: str, context: PipelineContext) -> str:
    if name in context.outputs:
        body = serialize_predictions(context.outputs[name], context.schemas.get(name, "labels"))
    else:
        key = "road_type" if name == "road_type" else "description"
        body = json.dumps({key: context.texts[name]}, sort_keys=True)
    return f'Stage "{name}" output:\n```json\n{body}\n```'


def _label_lines(ids, taxonomy: Taxonomy) -> list[str]:
    return [f"- {i}" for i in ids]


def _aliased_block(ids, taxonomy: Taxonomy) -> str:
    by_group: dict[str, list[str]] = {}
    for i in ids:
        by_group.setdefault(taxonomy[i].group, []).append(taxonomy[i].prompt_label)
    lines = []
    for group in sorted(by_group):
        lines.append(f"[{group.replace('_', ' ')}]")
        lines.extend(f"- {label}" for label in sorted(by_group[group]))
    return "\n".join(lines)


def _persona_title(taxonomy: Taxonomy, name: str) -> str:
    for p in taxonomy.personas:
        if p.name == name:
            return p.title
    return name


def _cot_script(persona: str | None) -> str:
    scripts = _load_json("cot_scripts.json")
    return scripts.get(persona or "default", scripts["default"])


def effective_scope(stage: Stage, context: PipelineContext) -> tuple[str, ...]:
    """Label list a prompt shows for this stage given the run so far."""
    if not stage.runtime_scope:
        return stage.label_scope
    if stage.name in context.retrieved:
        return tuple(i for i, _ in context.retrieved[stage.name])
    return context.scopes.get(stage.name, ())


def render(
    stage: Stage,
    taxonomy: Taxonomy,
    context: PipelineContext,
    strategy: StrategyId | str | None = None,
    tokenizer: TokenCounter = count_tokens,
) -> RenderedPrompt:
    """Render one stage prompt. Pure in its arguments."""
    strategy = StrategyId.parse(strategy) if strategy else _infer_strategy(stage)
    for name in stage.consumes_context:
        if not context.has(name):
            raise MissingContextError(f"stage {stage.name!r} needs output of {name!r}")

    scope = effective_scope(stage, context)
    if strategy is StrategyId.PERSONA_LABEL_ALIASING:
        labels = _aliased_block(scope, taxonomy)
    elif strategy is StrategyId.PERSONA_RAG:
        labels = "\n".join(f"- {i}: {taxonomy[i].description}" for i in scope)
    elif strategy is StrategyId.CHAINED_COT_PER_STAGE_HEAVY:
        labels = _heavy_label_block(taxonomy)
    else:
        labels = "\n".join(_label_lines(scope, taxonomy))

    cot = ""
    if strategy is StrategyId.CHAINED_COT_PER_STAGE_HEAVY:
        cot = "\n\n".join(
            f"Stage {n} ({p.title}):\n{_cot_script(p.name)}"
            for n, p in enumerate(taxonomy.personas, 1)
        )
    elif strategy in COT_STRATEGIES:
        cot = _cot_script(stage.persona)

    persona = ""
    if strategy in PERSONA_STRATEGIES and stage.persona:
        persona = (
            f"Role: you are the {_persona_title(taxonomy, stage.persona)} on a panel of domain"
            " experts. Your label list covers your domain only."
        )

    schema = _load_json("schemas.json")[stage.output_schema]
    schema = schema.replace("{{uncertainty}}", UNCERTAINTY_RULE if strategy in COT_STRATEGIES else "")

    describe = next((n for n in stage.consumes_context if n.endswith("_describe")), None)
    values = {
        "framing": load_template("framing").strip(),
        "persona": persona,
        "labels": labels,
        "context": "\n\n".join(serialize_stage_output(n, context) for n in stage.consumes_context),
        "cot": cot,
        "schema": schema,
        "road_types": "\n".join(f"- {r}" for r in context.road_types),
        "description": context.texts.get(describe, "") if describe else "",
    }
    for name in stage.consumes_context:
        values[f"context.{name}"] = serialize_stage_output(name, context)
    text = fill(load_template(stage.template_id), values)
    return RenderedPrompt(text=text, stage=stage, estimated_tokens=tokenizer(text))


def _heavy_label_block(taxonomy: Taxonomy) -> str:
    from ..taxonomy import partition_by_persona

    parts = partition_by_persona(taxonomy)
    lines = []
    for n, p in enumerate(taxonomy.personas, 1):
        lines.append(f"Stage {n} ({p.title}):")
        lines.extend(f"- {i}" for i in parts[p.name])
    return "\n".join(lines)


def _infer_strategy(stage: Stage) -> StrategyId:
    for strategy, roles in load_registry().items():
        if stage.template_id in roles.values():
            return StrategyId(strategy)
    raise TemplateError(f"cannot infer strategy for template {stage.template_id!r}")


def placeholder_context(plan: StagePlan, road_types=()) -> PipelineContext:
    """Context with every stage present but empty, used for budget accounting."""
    ctx = PipelineContext(road_types=tuple(road_types))
    for s in plan.stages:
        if s.output_schema in ("labels", "detections"):
            ctx.record(s.name, PredictionSet(), s.output_schema)
        else:
            ctx.texts[s.name] = ""
    return ctx


@dataclass(frozen=True)
class TokenBudget:
    """Prompt cost ``P + k*I`` with the per-image vision cost ``I`` left symbolic."""

    fixed_prompt_tokens: int
    image_multiplicity: int

    def total(self, image_tokens: float) -> float:
        return self.fixed_prompt_tokens + self.image_multiplicity * image_tokens

    def __str__(self) -> str:
        k = "" if self.image_multiplicity == 1 else str(self.image_multiplicity)
        return f"{self.fixed_prompt_tokens:,} + {k}I"

    def to_dict(self) -> dict[str, int]:
        return {"P": self.fixed_prompt_tokens, "k": self.image_multiplicity}


def budget(
    strategy: StrategyId | str,
    taxonomy: Taxonomy,
    tokenizer: Callable[[str], int] = count_tokens,
    *,
    road_types=(),
    detection: bool = False,
) -> TokenBudget:
    plan = stage_plan(strategy, taxonomy, detection=detection)
    ctx = placeholder_context(plan, road_types)
    fixed = sum(
        tokenizer(render(s, taxonomy, ctx, plan.strategy, tokenizer).text) for s in plan.stages
    )
    return TokenBudget(fixed, plan.image_multiplicity)
