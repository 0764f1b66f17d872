"""Strategy plans, prompt rendering and token budgets."""

from .render import (
    MissingContextError,
    RenderedPrompt,
    TemplateError,
    TokenBudget,
    budget,
    effective_scope,
    placeholder_context,
    render,
    serialize_stage_output,
    template_digest,
)
from .strategies import (
    COT_STRATEGIES,
    PERSONA_STRATEGIES,
    REFERENCE_MULTIPLICITY,
    Stage,
    StagePlan,
    StrategyId,
    stage_plan,
)
from .tokens import TokenCounter, count_tokens

__all__ = [
    "COT_STRATEGIES",
    "MissingContextError",
    "PERSONA_STRATEGIES",
    "REFERENCE_MULTIPLICITY",
    "RenderedPrompt",
    "Stage",
    "StagePlan",
    "StrategyId",
    "TemplateError",
    "TokenBudget",
    "TokenCounter",
    "budget",
    "count_tokens",
    "effective_scope",
    "placeholder_context",
    "render",
    "serialize_stage_output",
    "stage_plan",
    "template_digest",
]
