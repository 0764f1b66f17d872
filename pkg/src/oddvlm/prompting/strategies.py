from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..taxonomy import Taxonomy, partition_by_persona


class StrategyId(str, enum.Enum):
    FLAT_TAXONOMY = "flat_taxonomy"
    REEVALUATE = "reevaluate"
    ROAD_DEPENDENT = "road_dependent"
    PERSONA_DECOMPOSITION = "persona_decomposition"
    PERSONA_LABEL_ALIASING = "persona_label_aliasing"
    PERSONA_RAG = "persona_rag"
    PERSONA_COT = "persona_cot"
    PERSONA_CHAINED_COT = "persona_chained_cot"
    CHAINED_COT_PER_STAGE_HEAVY = "chained_cot_per_stage_heavy"

    @property
    def title(self) -> str:
        return TITLES[self]

    @property
    def uses_cot(self) -> bool:
        return self in COT_STRATEGIES

    @classmethod
    def parse(cls, value: str | StrategyId) -> StrategyId:
        if isinstance(value, StrategyId):
            return value
        key = value.strip().lower().replace("-", "_").replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown strategy {value!r}; expected one of {', '.join(s.value for s in cls)}"
            ) from None


TITLES = {
    StrategyId.FLAT_TAXONOMY: "Flat Taxonomy List (baseline)",
    StrategyId.REEVALUATE: "Reevaluate",
    StrategyId.ROAD_DEPENDENT: "Road-Dependent",
    StrategyId.PERSONA_DECOMPOSITION: "Persona Decomposition",
    StrategyId.PERSONA_LABEL_ALIASING: "Persona + Label-Aliasing + Taxonomy",
    StrategyId.PERSONA_RAG: "Persona + RAG",
    StrategyId.PERSONA_COT: "Persona + CoT",
    StrategyId.PERSONA_CHAINED_COT: "Persona + Chained CoT",
    StrategyId.CHAINED_COT_PER_STAGE_HEAVY: "Chained CoT (per-stage heavy)",
}

COT_STRATEGIES = frozenset(
    {
        StrategyId.PERSONA_COT,
        StrategyId.PERSONA_CHAINED_COT,
        StrategyId.CHAINED_COT_PER_STAGE_HEAVY,
    }
)

PERSONA_STRATEGIES = frozenset(
    {
        StrategyId.PERSONA_DECOMPOSITION,
        StrategyId.PERSONA_LABEL_ALIASING,
        StrategyId.PERSONA_RAG,
        StrategyId.PERSONA_COT,
        StrategyId.PERSONA_CHAINED_COT,
    }
)

# image submissions per inference for a five-persona taxonomy
REFERENCE_MULTIPLICITY = {
    StrategyId.FLAT_TAXONOMY: 1,
    StrategyId.CHAINED_COT_PER_STAGE_HEAVY: 1,
    StrategyId.REEVALUATE: 2,
    StrategyId.ROAD_DEPENDENT: 2,
    StrategyId.PERSONA_DECOMPOSITION: 5,
    StrategyId.PERSONA_LABEL_ALIASING: 5,
    StrategyId.PERSONA_RAG: 5,
    StrategyId.PERSONA_COT: 5,
    StrategyId.PERSONA_CHAINED_COT: 5,
}


@dataclass(frozen=True)
class Stage:
    name: str
    label_scope: tuple[str, ...]
    template_id: str
    consumes_context: tuple[str, ...] = ()
    attaches_image: bool = True
    output_schema: str = "labels"
    persona: str | None = None
    # label list is narrowed at run time (road context, retrieval hits)
    runtime_scope: bool = False


@dataclass(frozen=True)
class StagePlan:
    strategy: StrategyId
    stages: tuple[Stage, ...]

    @property
    def image_multiplicity(self) -> int:
        return sum(1 for s in self.stages if s.attaches_image)

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def waves(self) -> list[list[Stage]]:
        """Group stages into batches whose dependencies are all in earlier batches."""
        done: set[str] = set()
        pending = list(self.stages)
        out = []
        while pending:
            ready = [s for s in pending if set(s.consumes_context) <= done]
            if not ready:
                raise ValueError(f"stage plan for {self.strategy.value} has a dependency cycle")
            out.append(ready)
            done.update(s.name for s in ready)
            pending = [s for s in pending if s.name not in done]
        return out

    def label_stages(self) -> list[Stage]:
        return [s for s in self.stages if s.output_schema in ("labels", "detections")]


def _registry_template(strategy: StrategyId, role: str) -> str:
    from .render import load_registry

    return load_registry()[strategy.value][role]


def stage_plan(
    strategy: StrategyId | str, taxonomy: Taxonomy, *, detection: bool = False
) -> StagePlan:
    strategy = StrategyId.parse(strategy)
    schema = "detections" if detection else "labels"
    everything = taxonomy.ids
    parts = partition_by_persona(taxonomy)
    tpl = lambda role: _registry_template(strategy, role)  # noqa: E731

    if strategy is StrategyId.FLAT_TAXONOMY:
        stages = [Stage("detect", everything, tpl("detect"), output_schema=schema)]
    elif strategy is StrategyId.REEVALUATE:
        stages = [
            Stage("detect", everything, tpl("detect"), output_schema=schema),
            Stage("verify", everything, tpl("verify"), ("detect",), output_schema=schema),
        ]
    elif strategy is StrategyId.ROAD_DEPENDENT:
        stages = [
            Stage("road_type", (), tpl("road_type"), output_schema="road_type"),
            Stage(
                "detect",
                everything,
                tpl("detect"),
                ("road_type",),
                output_schema=schema,
                runtime_scope=True,
            ),
        ]
    elif strategy is StrategyId.PERSONA_RAG:
        stages = []
        for persona, ids in parts.items():
            describe = f"{persona}_describe"
            stages.append(
                Stage(describe, (), tpl("describe"), output_schema="description", persona=persona)
            )
            stages.append(
                Stage(
                    persona,
                    tuple(ids),
                    tpl("persona"),
                    (describe,),
                    attaches_image=False,
                    output_schema=schema,
                    persona=persona,
                    runtime_scope=True,
                )
            )
    elif strategy is StrategyId.PERSONA_CHAINED_COT:
        stages = []
        earlier: list[str] = []
        for persona, ids in parts.items():
            stages.append(
                Stage(
                    persona,
                    tuple(ids),
                    tpl("persona"),
                    tuple(earlier),
                    output_schema=schema,
                    persona=persona,
                )
            )
            earlier.append(persona)
    elif strategy is StrategyId.CHAINED_COT_PER_STAGE_HEAVY:
        stages = [Stage("chain", everything, tpl("chain"), output_schema=schema)]
    else:
        stages = [
            Stage(persona, tuple(ids), tpl("persona"), output_schema=schema, persona=persona)
            for persona, ids in parts.items()
        ]
    return StagePlan(strategy, tuple(stages))


def with_scope(stage: Stage, scope) -> Stage:
    return replace(stage, label_scope=tuple(sorted(scope)))
