"""Prediction records shared by the renderer, parser, pipeline and scorers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

LABEL_SCHEMAS = ("labels", "detections")


@dataclass(frozen=True, order=True)
class Prediction:
    concept_id: str
    rank: int = 1
    center: tuple[float, float] | None = None
    source_stage: str = ""

    @property
    def key(self) -> tuple[str, tuple[float, float] | None]:
        return (self.concept_id, self.center)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"label": self.concept_id, "rank": self.rank}
        if self.center is not None:
            out["center"] = [self.center[0], self.center[1]]
        if self.source_stage:
            out["stage"] = self.source_stage
        return out


@dataclass
class ParseFlags:
    hard_failures: int = 0
    unknown_labels: int = 0

    def add(self, other: ParseFlags) -> None:
        self.hard_failures += other.hard_failures
        self.unknown_labels += other.unknown_labels


@dataclass
class PredictionSet:
    predictions: list[Prediction] = field(default_factory=list)
    flags: ParseFlags = field(default_factory=ParseFlags)

    def __len__(self) -> int:
        return len(self.predictions)

    def __iter__(self):
        return iter(self.predictions)

    @property
    def ids(self) -> set[str]:
        return {p.concept_id for p in self.predictions}

    def __eq__(self, other: object) -> bool:
        # flags are bookkeeping, not content
        if not isinstance(other, PredictionSet):
            return NotImplemented
        return self.predictions == other.predictions


def dedupe(predictions: Iterable[Prediction]) -> list[Prediction]:
    """Keep one prediction per (concept, center), the best-ranked, in first-seen order."""
    best: dict[tuple, Prediction] = {}
    order: list[tuple] = []
    for p in predictions:
        current = best.get(p.key)
        if current is None:
            order.append(p.key)
            best[p.key] = p
        elif p.rank < current.rank:
            best[p.key] = p
    return [best[k] for k in order]


def serialize_predictions(pset: PredictionSet, schema: str = "labels") -> str:
    """Canonical JSON text for a prediction set (sorted keys, compact separators)."""
    if schema not in LABEL_SCHEMAS:
        raise ValueError(f"schema {schema!r} does not carry predictions")
    items = []
    for p in pset.predictions:
        item: dict[str, Any] = {"label": p.concept_id, "rank": p.rank}
        if schema == "detections":
            if p.center is None:
                raise ValueError(f"detection prediction {p.concept_id!r} has no center")
            item["center"] = [p.center[0], p.center[1]]
        items.append(item)
    return json.dumps({schema: items}, sort_keys=True, separators=(", ", ": "))


@dataclass
class PipelineContext:
    """Stage outputs accumulated during one run, in execution order.

    ``outputs`` holds label/detection stages; ``texts`` holds free-text stage
    results (road type, scene descriptions). ``scopes`` records label lists
    narrowed at run time and ``retrieved`` the knowledge-base hits per stage.
    """

    outputs: dict[str, PredictionSet] = field(default_factory=dict)
    schemas: dict[str, str] = field(default_factory=dict)
    texts: dict[str, str] = field(default_factory=dict)
    road_types: tuple[str, ...] = ()
    scopes: dict[str, tuple[str, ...]] = field(default_factory=dict)
    retrieved: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def has(self, stage: str) -> bool:
        return stage in self.outputs or stage in self.texts

    def record(self, stage: str, pset: PredictionSet, schema: str = "labels") -> None:
        self.outputs[stage] = pset
        self.schemas[stage] = schema

    def to_dict(self) -> dict[str, Any]:
        return {
            "outputs": {
                name: json.loads(serialize_predictions(pset, self.schemas.get(name, "labels")))
                for name, pset in self.outputs.items()
            },
            "texts": dict(self.texts),
            "scopes": {k: list(v) for k, v in self.scopes.items()},
            "retrieved": {k: [[i, s] for i, s in v] for k, v in self.retrieved.items()},
        }
