"""Report persistence, comparisons and the tables rendered by ``oddvlm report``."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from ..taxonomy import CATEGORIES
from .metrics import EvalReport, f1_score

# image token cost used for plot data unless the caller states another
DEFAULT_IMAGE_TOKENS = 765

CATEGORY_HEADERS = {
    "Markings": "Markings",
    "Scenery": "Scenery",
    "Signs": "Signs",
    "TriggerConditions": "Trigger Conditions",
    "Weather": "Weather",
}


class ReportMismatchError(ValueError):
    pass


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_fixture_reports(name: str) -> list[EvalReport]:
    """Bundled report sets: ``strategies``, ``models`` or ``detection``."""
    path = resources.files("oddvlm") / "data" / "fixtures" / f"{name}.json"
    return [EvalReport.from_dict(d) for d in json.loads(path.read_text(encoding="utf-8"))]


@dataclass(frozen=True)
class DeltaRow:
    level: str
    key: str
    a: float
    b: float
    delta: float


def _delta(a: float, b: float) -> float:
    # rates carry few decimals; rounding strips float subtraction noise
    return round(a - b, 10)


def compare_reports(a: EvalReport, b: EvalReport) -> list[DeltaRow]:
    """Signed differences ``a - b``: overall, then categories, then shared groups."""
    if a.taxonomy_version != b.taxonomy_version:
        raise ReportMismatchError(
            f"taxonomy versions differ: {a.taxonomy_version!r} vs {b.taxonomy_version!r}"
        )
    rows = [DeltaRow("overall", "overall", a.recall, b.recall, _delta(a.recall, b.recall))]
    for cat in CATEGORIES:
        if cat in a.per_category and cat in b.per_category:
            x, y = a.per_category[cat], b.per_category[cat]
            rows.append(DeltaRow("category", cat, x, y, _delta(x, y)))
    for group in sorted(set(a.per_group) & set(b.per_group)):
        x, y = a.per_group[group], b.per_group[group]
        rows.append(DeltaRow("group", group, x, y, _delta(x, y)))
    return rows


def deltas_to_csv(rows: Sequence[DeltaRow], a_name: str = "a", b_name: str = "b") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "key", a_name, b_name, "delta"])
    for r in rows:
        w.writerow([r.level, r.key, f"{r.a:g}", f"{r.b:g}", f"{r.delta:+g}"])
    return buf.getvalue()


@dataclass(frozen=True)
class CostRow:
    name: str
    strategy: str | None
    fixed_tokens: int
    multiplicity: int
    recall: float

    def total_tokens(self, image_tokens: float) -> float:
        return self.fixed_tokens + self.multiplicity * image_tokens


def cost_performance_table(reports: Iterable[EvalReport]) -> list[CostRow]:
    """Rows sorted by recall (descending), then fixed prompt tokens (ascending)."""
    rows = []
    for r in reports:
        if r.budget is None:
            raise ValueError(f"report {r.name!r} carries no token budget")
        rows.append(
            CostRow(r.name, r.strategy, r.budget.fixed_prompt_tokens, r.budget.image_multiplicity, r.recall)
        )
    return sorted(rows, key=lambda row: (-row.recall, row.fixed_tokens, row.name))


def cost_table_csv(rows: Sequence[CostRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "P", "k", "recall"])
    for r in rows:
        w.writerow([r.name, r.fixed_tokens, r.multiplicity, f"{r.recall:g}"])
    return buf.getvalue()


def cost_plot_csv(rows: Sequence[CostRow], image_tokens: float = DEFAULT_IMAGE_TOKENS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "image_tokens", "total_tokens", "recall"])
    for r in rows:
        w.writerow([r.name, f"{image_tokens:g}", f"{r.total_tokens(image_tokens):g}", f"{r.recall:g}"])
    return buf.getvalue()


def _grid(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in body])


def format_cost_table(rows: Sequence[CostRow]) -> str:
    body = []
    for r in rows:
        k = "" if r.multiplicity == 1 else str(r.multiplicity)
        body.append([r.name, f"{r.fixed_tokens:,} + {k}I", f"{r.recall:.2f}"])
    return _grid(["Prompting Strategy", "Prompt Tokens per Inference", "Recall (R)"], body)


def format_category_table(reports: Sequence[EvalReport]) -> str:
    cats = [c for c in sorted(CATEGORY_HEADERS) if any(c in r.per_category for r in reports)]
    body = [
        [r.name, f"{r.recall:.2f}"]
        + [f"{r.per_category[c]:.2f}" if c in r.per_category else "-" for c in cats]
        for r in reports
    ]
    return _grid(["Model", "Overall"] + [CATEGORY_HEADERS[c] for c in cats], body)


def format_detection_table(reports: Sequence[EvalReport]) -> str:
    body = []
    for r in reports:
        p = r.precision or 0.0
        body.append(
            [
                r.name,
                f"{p:.2f}",
                f"{r.recall:.3f}",
                f"{f1_score(p, r.recall):.3f}",
                "-" if r.avg_l2 is None else f"{r.avg_l2:.2f}",
            ]
        )
    return _grid(["Model", "Precision", "Recall", "F1-Score", "Average L2 Error"], body)


def detection_table_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "precision", "recall", "f1", "avg_l2"])
    for r in reports:
        p = r.precision or 0.0
        w.writerow([r.name, f"{p:g}", f"{r.recall:g}", f"{f1_score(p, r.recall):.6f}",
                    "" if r.avg_l2 is None else f"{r.avg_l2:g}"])
    return buf.getvalue()


def category_table_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "overall"] + list(CATEGORIES))
    for r in reports:
        w.writerow([r.name, f"{r.recall:g}"] + [
            f"{r.per_category[c]:g}" if c in r.per_category else "" for c in CATEGORIES
        ])
    return buf.getvalue()
