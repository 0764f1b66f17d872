from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..backend.mock import SampleTruth
from ..taxonomy import Taxonomy, canonicalize

# moving objects are outside the static ODD taxonomy
MOVING_OBJECT_LABELS = frozenset(
    {
        "person",
        "pedestrian",
        "rider",
        "bicyclist",
        "motorcyclist",
        "animal",
        "bird",
        "ground_animal",
        "vehicle",
        "car",
        "truck",
        "bus",
        "bicycle",
        "motorcycle",
        "trailer",
        "caravan",
        "boat",
        "on_rails",
        "other_vehicle",
        "wheeled_slow",
    }
)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassificationSample:
    sample_id: str
    image: str
    concept_id: str
    road_type: str | None = None


@dataclass(frozen=True)
class Instance:
    concept_id: str
    bbox: tuple[float, float, float, float]

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2, (y0 + y1) / 2)


@dataclass(frozen=True)
class DetectionSample:
    sample_id: str
    image: str
    instances: tuple[Instance, ...]


def _read(path: str | Path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    return p.read_text(encoding="utf-8")


def _jsonl(text: str, where: str) -> list[dict]:
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}:{n}: invalid JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise ManifestError(f"{where}:{n}: expected an object")
        rows.append(row)
    return rows


def _resolve(label: str, taxonomy: Taxonomy, where: str) -> str:
    if label.strip().casefold() in MOVING_OBJECT_LABELS:
        raise ManifestError(f"{where}: moving-object class {label!r} is not evaluated")
    cid = canonicalize(label, taxonomy)
    if cid is None:
        raise ManifestError(f"{where}: concept {label!r} is not in taxonomy {taxonomy.version}")
    return cid


def _check_unique(ids: Iterable[str], where: str) -> None:
    seen = set()
    for sid in ids:
        if sid in seen:
            raise ManifestError(f"{where}: duplicate sample_id {sid!r}")
        seen.add(sid)


def load_classification_manifest(path: str | Path, taxonomy: Taxonomy) -> list[ClassificationSample]:
    """CSV with a header row, or JSON lines, of ``sample_id, image_path, concept_id``."""
    text = _read(path)
    where = str(path)
    if str(path).endswith(".csv") or not text.lstrip().startswith("{"):
        rows = list(csv.DictReader(io.StringIO(text)))
    else:
        rows = _jsonl(text, where)
    samples = []
    for n, row in enumerate(rows, 1):
        try:
            sid, image, label = str(row["sample_id"]), str(row["image_path"]), str(row["concept_id"])
        except KeyError as exc:
            raise ManifestError(f"{where}: row {n} missing field {exc}") from None
        samples.append(
            ClassificationSample(
                sid, image, _resolve(label, taxonomy, f"{where}: row {n}"), row.get("road_type") or None
            )
        )
    _check_unique((s.sample_id for s in samples), where)
    return samples


def _bbox(raw, where: str) -> tuple[float, float, float, float]:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ManifestError(f"{where}: bbox must be [x_min, y_min, x_max, y_max]")
    x0, y0, x1, y1 = (float(v) for v in raw)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ManifestError(f"{where}: bbox {raw} is not a normalized box")
    return (x0, y0, x1, y1)


def load_detection_manifest(path: str | Path, taxonomy: Taxonomy) -> list[DetectionSample]:
    where = str(path)
    samples = []
    for n, row in enumerate(_jsonl(_read(path), where), 1):
        try:
            sid, image, raw_instances = str(row["sample_id"]), str(row["image_path"]), row["instances"]
        except KeyError as exc:
            raise ManifestError(f"{where}: line {n} missing field {exc}") from None
        instances = tuple(
            Instance(
                _resolve(str(inst["concept_id"]), taxonomy, f"{where}: line {n}"),
                _bbox(inst.get("bbox"), f"{where}: line {n}"),
            )
            for inst in raw_instances
        )
        samples.append(DetectionSample(sid, image, instances))
    _check_unique((s.sample_id for s in samples), where)
    return samples


def detect_manifest_kind(path: str | Path) -> str:
    text = _read(path)
    first = next((line for line in text.splitlines() if line.strip()), "")
    if first.lstrip().startswith("{") and "instances" in json.loads(first):
        return "detection"
    return "classification"


def truth_for(samples) -> dict[str, SampleTruth]:
    out = {}
    for s in samples:
        if isinstance(s, DetectionSample):
            out[s.sample_id] = SampleTruth(
                instances=tuple((i.concept_id, i.bbox) for i in s.instances)
            )
        else:
            out[s.sample_id] = SampleTruth(labels=(s.concept_id,), road_type=s.road_type)
    return out
