"""Turn raw model text into canonical predictions."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any

from ..predictions import ParseFlags, Prediction, PredictionSet, dedupe
from ..taxonomy import Taxonomy, canonicalize
from .base import RawResponse

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n?(.*?)```", re.DOTALL)
_decoder = json.JSONDecoder()


@dataclass
class ParseReport:
    hard_failure: bool = False
    unknown_labels: list[str] = field(default_factory=list)
    malformed_items: int = 0
    clamped: int = 0
    out_of_scope: list[str] = field(default_factory=list)
    rank_capped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "hard_failure": self.hard_failure,
            "unknown_labels": list(self.unknown_labels),
            "malformed_items": self.malformed_items,
            "clamped": self.clamped,
            "out_of_scope": list(self.out_of_scope),
            "rank_capped": list(self.rank_capped),
        }


class NoJsonFound(ValueError):
    pass


def extract_json(text: str) -> Any:
    """First well-formed JSON object or array in ``text``; fenced blocks win."""
    for match in _FENCE.finditer(text):
        body = match.group(2).strip()
        try:
            value = json.loads(body)
        except json.JSONDecodeError:
            value = _scan(body)
        if isinstance(value, (dict, list)):
            return value
    value = _scan(text)
    if value is None:
        raise NoJsonFound("no JSON object or array in model output")
    return value


def _scan(text: str) -> Any:
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = _decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                continue
            return value
    return None


def _items(value: Any, schema: str) -> list[Any] | None:
    if isinstance(value, list):
        return value
    if isinstance(value, dict):
        for key in (schema, "labels", "detections", "predictions"):
            if isinstance(value.get(key), list):
                return value[key]
    return None


def _center(raw: Any) -> tuple[float, float] | None:
    if isinstance(raw, dict):
        raw = [raw.get("x"), raw.get("y")]
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        return None
    try:
        x, y = float(raw[0]), float(raw[1])
    except (TypeError, ValueError):
        return None
    if not (math.isfinite(x) and math.isfinite(y)):
        return None
    return (x, y)


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, v))


def parse_predictions(
    raw: RawResponse | str,
    schema: str,
    taxonomy: Taxonomy,
    stage: str = "",
) -> tuple[PredictionSet, ParseReport]:
    """Parse a ``labels`` or ``detections`` response.

    Never raises on model output: failures come back as an empty set with
    ``report.hard_failure`` set.
    """
    text = raw.text if isinstance(raw, RawResponse) else raw
    report = ParseReport()
    try:
        items = _items(extract_json(text or ""), schema)
    except NoJsonFound:
        items = None
    if items is None:
        report.hard_failure = True
        return PredictionSet(flags=ParseFlags(hard_failures=1)), report

    detection = schema == "detections"
    preds = []
    for item in items:
        center = None
        rank = 1
        if isinstance(item, str):
            label = item
        elif isinstance(item, dict):
            label = item.get("label", item.get("id", item.get("name")))
            r = item.get("rank", 1)
            if isinstance(r, bool) or not isinstance(r, (int, float)) or r < 1 or r != int(r):
                report.malformed_items += 1
                continue
            rank = int(r)
            if detection:
                center = _center(item.get("center", item.get("point")))
        else:
            report.malformed_items += 1
            continue
        if not isinstance(label, str):
            report.malformed_items += 1
            continue
        if detection:
            if center is None:
                report.malformed_items += 1
                continue
            clamped = (_clamp(center[0]), _clamp(center[1]))
            if clamped != center:
                report.clamped += 1
            center = clamped
        cid = canonicalize(label, taxonomy)
        if cid is None:
            report.unknown_labels.append(label)
            continue
        preds.append(Prediction(cid, rank, center, stage))
    flags = ParseFlags(unknown_labels=len(report.unknown_labels))
    return PredictionSet(dedupe(preds), flags), report


def parse_text_field(raw: RawResponse | str, key: str) -> str | None:
    """Pull a string field (``road_type``, ``description``) out of a response."""
    text = raw.text if isinstance(raw, RawResponse) else raw
    try:
        value = extract_json(text or "")
    except NoJsonFound:
        return None
    if isinstance(value, dict) and isinstance(value.get(key), str):
        return value[key].strip()
    return None
