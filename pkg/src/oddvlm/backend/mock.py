"""Deterministic stand-ins for a vision-language model."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..taxonomy import RoadContextTable, Taxonomy
from .base import RawResponse, VlmRequest


@dataclass(frozen=True)
class SampleTruth:
    labels: tuple[str, ...] = ()
    # (concept id, (x_min, y_min, x_max, y_max)) in normalized coordinates
    instances: tuple[tuple[str, tuple[float, float, float, float]], ...] = ()
    road_type: str | None = None

    @property
    def all_labels(self) -> set[str]:
        return set(self.labels) | {cid for cid, _ in self.instances}


def box_center(box) -> tuple[float, float]:
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2, (y0 + y1) / 2)


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)


class OracleBackend:
    """Answers every stage with the ground truth restricted to the stage's scope."""

    def __init__(
        self,
        truth: Mapping[str, SampleTruth],
        taxonomy: Taxonomy | None = None,
        road_table: RoadContextTable | None = None,
    ) -> None:
        self.truth = truth
        self.taxonomy = taxonomy
        self.road_table = road_table

    def _truth(self, request: VlmRequest) -> SampleTruth:
        return self.truth.get(request.sample_id, SampleTruth())

    def complete(self, request: VlmRequest) -> RawResponse:
        truth = self._truth(request)
        schema = request.output_schema
        if schema == "road_type":
            return RawResponse(_dump({"road_type": self.road_type(truth, request.options)}))
        if schema == "description":
            return RawResponse(_dump({"description": self.describe(truth)}))
        scope = set(request.label_scope)
        if schema == "detections":
            items = [
                {"label": cid, "rank": 1, "center": list(box_center(box))}
                for cid, box in truth.instances
                if cid in scope
            ]
            return RawResponse(_dump({"detections": items}))
        labels = sorted(truth.all_labels & scope)
        return RawResponse(_dump({"labels": [{"label": c, "rank": 1} for c in labels]}))

    def road_type(self, truth: SampleTruth, options: Iterable[str]) -> str:
        if truth.road_type:
            return truth.road_type
        if self.road_table is not None:
            wanted = truth.all_labels
            for road in sorted(options or self.road_table.road_types):
                if wanted <= self.road_table.allowed.get(road, frozenset()):
                    return road
        return "unknown"

    def describe(self, truth: SampleTruth) -> str:
        labels = sorted(truth.all_labels)
        if self.taxonomy is None:
            return "The scene shows " + ", ".join(l.replace("_", " ") for l in labels) + "."
        return " ".join(self.taxonomy[l].description for l in labels if l in self.taxonomy)


class SeededNoiseBackend(OracleBackend):
    """Oracle answers perturbed by a reproducible confusion process.

    Each true label is swapped for another in-scope label with probability
    ``confusion_rate``; detection centers also get small seeded jitter. The
    random stream depends only on ``(seed, request_id)``.
    """

    def __init__(
        self,
        truth: Mapping[str, SampleTruth],
        seed: int,
        confusion_rate: float = 0.2,
        taxonomy: Taxonomy | None = None,
        road_table: RoadContextTable | None = None,
        jitter: float = 0.03,
    ) -> None:
        super().__init__(truth, taxonomy, road_table)
        if not 0.0 <= confusion_rate <= 1.0:
            raise ValueError("confusion_rate must lie in [0, 1]")
        self.seed = seed
        self.confusion_rate = confusion_rate
        self.jitter = jitter

    def _rng(self, request: VlmRequest) -> random.Random:
        digest = hashlib.sha256(f"{self.seed}:{request.request_id}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _swap(self, rng: random.Random, cid: str, scope: list[str]) -> str:
        if len(scope) > 1 and rng.random() < self.confusion_rate:
            return rng.choice([c for c in scope if c != cid])
        return cid

    def complete(self, request: VlmRequest) -> RawResponse:
        if request.output_schema in ("road_type", "description"):
            return super().complete(request)
        rng = self._rng(request)
        truth = self._truth(request)
        scope = sorted(request.label_scope)
        in_scope = set(scope)
        if request.output_schema == "detections":
            items = []
            for cid, box in truth.instances:
                if cid not in in_scope:
                    continue
                x, y = box_center(box)
                x = min(1.0, max(0.0, x + rng.uniform(-self.jitter, self.jitter)))
                y = min(1.0, max(0.0, y + rng.uniform(-self.jitter, self.jitter)))
                items.append({"label": self._swap(rng, cid, scope), "rank": 1, "center": [x, y]})
            return RawResponse(_dump({"detections": items}))
        labels = sorted({self._swap(rng, c, scope) for c in sorted(truth.all_labels & in_scope)})
        return RawResponse(_dump({"labels": [{"label": c, "rank": 1} for c in labels]}))


@dataclass(frozen=True)
class ScriptRule:
    response: str
    stage: str | None = None
    sample_id: str | None = None
    strategy: str | None = None

    @property
    def specificity(self) -> int:
        return sum(v is not None for v in (self.stage, self.sample_id, self.strategy))

    def matches(self, request: VlmRequest) -> bool:
        return (
            (self.stage is None or self.stage == request.stage)
            and (self.sample_id is None or self.sample_id == request.sample_id)
            and (self.strategy is None or self.strategy == request.strategy)
        )


@dataclass
class ScriptedBackend:
    """Returns canned text from the most specific matching rule.

    Rules with more match keys win; among equals the earlier rule wins.
    Requests nothing matches get ``default``.
    """

    rules: list[ScriptRule]
    default: str = '{"labels": []}'
    calls: list[VlmRequest] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self) -> None:
        self._ordered = sorted(self.rules, key=lambda r: -r.specificity)

    def complete(self, request: VlmRequest) -> RawResponse:
        self.calls.append(request)
        for rule in self._ordered:
            if rule.matches(request):
                return RawResponse(rule.response)
        return RawResponse(self.default)

    @classmethod
    def from_entries(cls, entries: Iterable[Mapping[str, Any]], default: str | None = None):
        rules = []
        for entry in entries:
            match = entry.get("match", {})
            response = entry["response"]
            if not isinstance(response, str):
                response = json.dumps(response, sort_keys=True)
            rules.append(
                ScriptRule(
                    response=response,
                    stage=match.get("stage"),
                    sample_id=match.get("sample_id"),
                    strategy=match.get("strategy"),
                )
            )
        kwargs = {} if default is None else {"default": default}
        return cls(rules, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, dict):
            return cls.from_entries(doc.get("rules", []), doc.get("default"))
        return cls.from_entries(doc)
