"""Classification recall and point-based detection scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..predictions import PredictionSet
from ..prompting import TokenBudget
from ..taxonomy import CATEGORIES, Taxonomy
from .manifests import ClassificationSample, DetectionSample

DEFAULT_TAU = 0.5


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    """Scores for one (strategy, model) run over a dataset.

    Classification reports fill the recall breakdowns; detection reports fill
    precision, F1 and average L2 as well. ``category_support`` and
    ``group_support`` hold per-key sample counts.
    """

    name: str
    kind: str
    taxonomy_version: str
    sample_count: int
    recall: float
    per_category: dict[str, float] = field(default_factory=dict)
    per_group: dict[str, float] = field(default_factory=dict)
    category_support: dict[str, int] = field(default_factory=dict)
    group_support: dict[str, int] = field(default_factory=dict)
    precision: float | None = None
    f1: float | None = None
    avg_l2: float | None = None
    matched: int | None = None
    total_predictions: int | None = None
    total_ground_truths: int | None = None
    budget: TokenBudget | None = None
    strategy: str | None = None
    flags: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "kind": self.kind,
            "taxonomy_version": self.taxonomy_version,
            "sample_count": self.sample_count,
            "recall": self.recall,
            "per_category": dict(self.per_category),
            "per_group": dict(self.per_group),
            "category_support": dict(self.category_support),
            "group_support": dict(self.group_support),
            "strategy": self.strategy,
            "flags": dict(self.flags),
            "provenance": dict(self.provenance),
        }
        if self.kind == "detection":
            out.update(
                precision=self.precision,
                f1=self.f1,
                avg_l2=self.avg_l2,
                matched=self.matched,
                total_predictions=self.total_predictions,
                total_ground_truths=self.total_ground_truths,
            )
        if self.budget is not None:
            out["budget"] = self.budget.to_dict()
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> EvalReport:
        budget = doc.get("budget")
        report = cls(
            name=doc["name"],
            kind=doc.get("kind", "classification"),
            taxonomy_version=doc.get("taxonomy_version", "unversioned"),
            sample_count=int(doc.get("sample_count", 0)),
            recall=float(doc["recall"]),
            per_category={k: float(v) for k, v in doc.get("per_category", {}).items()},
            per_group={k: float(v) for k, v in doc.get("per_group", {}).items()},
            category_support={k: int(v) for k, v in doc.get("category_support", {}).items()},
            group_support={k: int(v) for k, v in doc.get("group_support", {}).items()},
            precision=doc.get("precision"),
            avg_l2=doc.get("avg_l2"),
            matched=doc.get("matched"),
            total_predictions=doc.get("total_predictions"),
            total_ground_truths=doc.get("total_ground_truths"),
            budget=TokenBudget(int(budget["P"]), int(budget["k"])) if budget else None,
            strategy=doc.get("strategy"),
            flags=dict(doc.get("flags", {})),
            provenance=dict(doc.get("provenance", {})),
        )
        if "f1_reported" in doc:
            # a published F1 is kept for comparison only
            report.provenance["f1_reported"] = float(doc["f1_reported"])
        if report.kind == "detection" and report.precision is not None:
            # F1 is always derived, never trusted from the file
            report.f1 = f1_score(float(report.precision), report.recall)
        return report


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def classification_recall(
    runs: Sequence[tuple[ClassificationSample, PredictionSet]],
    taxonomy: Taxonomy,
    name: str = "classification",
) -> EvalReport:
    """Fraction of samples whose ground-truth concept is among the predictions.

    Breakdowns attribute each sample to its ground-truth concept's category
    and group.
    """
    if not runs:
        raise EvaluationError("no runs to score")
    seen: set[str] = set()
    hits = 0
    cat_hits: dict[str, int] = {}
    cat_n: dict[str, int] = {}
    grp_hits: dict[str, int] = {}
    grp_n: dict[str, int] = {}
    for sample, pset in runs:
        if sample.sample_id in seen:
            raise EvaluationError(f"sample {sample.sample_id!r} scored twice")
        seen.add(sample.sample_id)
        concept = taxonomy[sample.concept_id]
        hit = int(sample.concept_id in pset.ids)
        hits += hit
        cat_n[concept.category] = cat_n.get(concept.category, 0) + 1
        cat_hits[concept.category] = cat_hits.get(concept.category, 0) + hit
        grp_n[concept.group] = grp_n.get(concept.group, 0) + 1
        grp_hits[concept.group] = grp_hits.get(concept.group, 0) + hit
    hard = sum(p.flags.hard_failures for _, p in runs)
    unknown = sum(p.flags.unknown_labels for _, p in runs)
    return EvalReport(
        name=name,
        kind="classification",
        taxonomy_version=taxonomy.version,
        sample_count=len(runs),
        recall=hits / len(runs),
        per_category={c: cat_hits[c] / cat_n[c] for c in CATEGORIES if c in cat_n},
        per_group={g: grp_hits[g] / grp_n[g] for g in sorted(grp_n)},
        category_support={c: cat_n[c] for c in CATEGORIES if c in cat_n},
        group_support=dict(sorted(grp_n.items())),
        flags={"hard_parse_failures": hard, "unknown_labels": unknown},
    )


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truths: tuple[int, ...]
    n_predictions: int
    n_ground_truths: int


def match_detections(
    predictions: PredictionSet | Sequence,
    sample: DetectionSample,
    tau: float = DEFAULT_TAU,
) -> Matching:
    """Greedy label-constrained nearest-center matching.

    Candidate pairs share a label and lie within ``tau`` of the box center;
    they are accepted in ascending distance order (ties on prediction index,
    then ground-truth index) while both endpoints are free.
    """
    preds = list(predictions)
    gts = sample.instances
    candidates = []
    for i, p in enumerate(preds):
        if p.center is None:
            continue
        for j, g in enumerate(gts):
            if p.concept_id != g.concept_id:
                continue
            gx, gy = g.center
            d = math.hypot(p.center[0] - gx, p.center[1] - gy)
            if d <= tau:
                candidates.append((d, i, j))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for d, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, d))
    return Matching(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(i for i in range(len(preds)) if i not in used_p),
        unmatched_ground_truths=tuple(j for j in range(len(gts)) if j not in used_g),
        n_predictions=len(preds),
        n_ground_truths=len(gts),
    )


def detection_metrics(
    matchings: Iterable[Matching],
    taxonomy_version: str = "unversioned",
    name: str = "detection",
    tau: float = DEFAULT_TAU,
) -> EvalReport:
    matchings = list(matchings)
    n_pred = sum(m.n_predictions for m in matchings)
    n_gt = sum(m.n_ground_truths for m in matchings)
    distances = [d for m in matchings for _, _, d in m.pairs]
    matched = len(distances)
    flags: dict[str, Any] = {"tau": tau}
    if n_pred == 0:
        flags["no_predictions"] = True
    if n_gt == 0:
        flags["no_ground_truths"] = True
    precision = matched / n_pred if n_pred else 0.0
    recall = matched / n_gt if n_gt else 0.0
    return EvalReport(
        name=name,
        kind="detection",
        taxonomy_version=taxonomy_version,
        sample_count=len(matchings),
        recall=recall,
        precision=precision,
        f1=f1_score(precision, recall),
        avg_l2=sum(distances) / matched if matched else None,
        matched=matched,
        total_predictions=n_pred,
        total_ground_truths=n_gt,
        flags=flags,
    )
