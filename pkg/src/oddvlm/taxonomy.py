"""Canonical ODD concept space: loading, alias lookup, persona partitions and road-context scopes."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

CATEGORIES = ("Signs", "Markings", "Scenery", "Weather", "TriggerConditions")

REFERENCE_COUNTS = {
    "Signs": 27,
    "Markings": 55,
    "Scenery": 96,
    "Weather": 12,
    "TriggerConditions": 42,
}

_SEPARATORS = re.compile(r"[\s_-]+")


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy or road-context documents.

    ``entries`` carries the offending concept ids (or raw entries) so callers
    can print them.
    """

    def __init__(self, message: str, entries: Iterable[Any] = ()) -> None:
        super().__init__(message)
        self.entries = list(entries)


class UnknownRoadTypeError(KeyError):
    def __init__(self, road_type: str, known: Iterable[str]) -> None:
        self.road_type = road_type
        self.known = sorted(known)
        super().__init__(f"unknown road type {road_type!r}; known types: {', '.join(self.known)}")

    def __str__(self) -> str:
        return self.args[0]


def normalize_label(label: str) -> str:
    """Lookup key for ids and aliases: trimmed, case-folded, separators folded to ``_``."""
    return _SEPARATORS.sub("_", label.strip().casefold())


@dataclass(frozen=True)
class Concept:
    id: str
    display_name: str
    category: str
    group: str
    aliases: tuple[str, ...] = ()
    description: str = ""

    @property
    def prompt_label(self) -> str:
        """Label shown to the model under alias-based prompting."""
        return self.aliases[0] if self.aliases else self.id

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "category": self.category,
            "group": self.group,
            "aliases": list(self.aliases),
            "description": self.description,
        }


@dataclass(frozen=True)
class Persona:
    """A domain expert owning the concepts in some categories and/or groups.

    Group membership takes precedence over category membership, which lets
    a config carve groups out of a category.
    """

    name: str
    title: str
    categories: tuple[str, ...] = ()
    groups: tuple[str, ...] = ()


DEFAULT_PERSONAS = (
    Persona("signs", "Sign Expert", ("Signs",)),
    Persona("markings", "Markings Expert", ("Markings",)),
    Persona("scenery", "Scenery Expert", ("Scenery",)),
    Persona("weather", "Weather Expert", ("Weather",)),
    Persona("trigger_conditions", "Trigger Condition Expert", ("TriggerConditions",)),
)


@dataclass(frozen=True)
class Taxonomy:
    version: str
    concepts: tuple[Concept, ...]
    personas: tuple[Persona, ...] = DEFAULT_PERSONAS
    _by_id: dict[str, Concept] = field(init=False, repr=False, compare=False)
    _lookup: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        concepts = tuple(sorted(self.concepts, key=lambda c: c.id))
        object.__setattr__(self, "concepts", concepts)
        object.__setattr__(self, "_by_id", {c.id: c for c in concepts})
        lookup: dict[str, str] = {}
        for c in concepts:
            lookup[normalize_label(c.id)] = c.id
            for alias in c.aliases:
                lookup[normalize_label(alias)] = c.id
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: object) -> bool:
        return concept_id in self._by_id

    def __getitem__(self, concept_id: str) -> Concept:
        return self._by_id[concept_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self._by_id)

    def canonicalize(self, label: str) -> str | None:
        return canonicalize(label, self)

    def category_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CATEGORIES}
        for concept in self.concepts:
            counts[concept.category] += 1
        return counts

    def groups(self) -> list[str]:
        return sorted({c.group for c in self.concepts})

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "personas": [
                {
                    "name": p.name,
                    "title": p.title,
                    "categories": list(p.categories),
                    "groups": list(p.groups),
                }
                for p in self.personas
            ],
            "concepts": [c.to_dict() for c in self.concepts],
        }


def _parse_concept(entry: Any) -> Concept:
    if not isinstance(entry, Mapping):
        raise TaxonomyError("concept entry is not an object", [entry])
    missing = [k for k in ("id", "category", "description") if k not in entry]
    if missing:
        raise TaxonomyError(f"concept entry missing fields {missing}", [entry.get("id", entry)])
    cid = entry["id"]
    if not isinstance(cid, str) or not cid.strip():
        raise TaxonomyError("concept id must be a non-empty string", [entry])
    if entry["category"] not in CATEGORIES:
        raise TaxonomyError(f"unknown category {entry['category']!r} for concept {cid!r}", [cid])
    description = entry["description"]
    if not isinstance(description, str) or not description.strip():
        raise TaxonomyError(f"concept {cid!r} has an empty description", [cid])
    aliases = entry.get("aliases") or []
    if not isinstance(aliases, list) or not all(isinstance(a, str) and a.strip() for a in aliases):
        raise TaxonomyError(f"concept {cid!r} has malformed aliases", [cid])
    return Concept(
        id=cid,
        display_name=str(entry.get("display_name") or cid.replace("_", " ")),
        category=entry["category"],
        group=str(entry.get("group") or entry["category"]),
        aliases=tuple(aliases),
        description=description.strip(),
    )


def _parse_personas(raw: Any) -> tuple[Persona, ...]:
    if raw is None:
        return DEFAULT_PERSONAS
    if not isinstance(raw, list) or not raw:
        raise TaxonomyError("'personas' must be a non-empty list")
    personas = []
    for entry in raw:
        if not isinstance(entry, Mapping) or "name" not in entry:
            raise TaxonomyError("persona entry needs a name", [entry])
        personas.append(
            Persona(
                name=entry["name"],
                title=entry.get("title", entry["name"]),
                categories=tuple(entry.get("categories", ())),
                groups=tuple(entry.get("groups", ())),
            )
        )
    names = [p.name for p in personas]
    if len(set(names)) != len(names):
        raise TaxonomyError("duplicate persona names", sorted({n for n in names if names.count(n) > 1}))
    return tuple(personas)


def taxonomy_from_dict(doc: Any) -> Taxonomy:
    if not isinstance(doc, Mapping):
        raise TaxonomyError("taxonomy document must be a JSON object")
    if not isinstance(doc.get("concepts"), list):
        raise TaxonomyError("taxonomy document needs a 'concepts' list")
    concepts = [_parse_concept(e) for e in doc["concepts"]]

    seen: dict[str, str] = {}
    for c in concepts:
        if c.id in seen:
            raise TaxonomyError(f"duplicate concept id {c.id!r}", [c.id])
        seen[c.id] = c.id

    # ids and aliases share one namespace after normalization
    owners: dict[str, str] = {normalize_label(c.id): c.id for c in concepts}
    if len(owners) != len(concepts):
        raise TaxonomyError("concept ids collide after normalization", sorted(seen))
    for c in concepts:
        for alias in c.aliases:
            key = normalize_label(alias)
            if key in owners:
                other = owners[key]
                what = "concept id" if normalize_label(other) == key else "alias"
                raise TaxonomyError(
                    f"duplicate alias {alias!r}: used by {other!r} ({what}) and {c.id!r}",
                    sorted({other, c.id}),
                )
            owners[key] = c.id

    return Taxonomy(
        version=str(doc.get("version", "unversioned")),
        concepts=tuple(concepts),
        personas=_parse_personas(doc.get("personas")),
    )


def load_taxonomy(source: str | Path | Mapping[str, Any]) -> Taxonomy:
    """Load a taxonomy from a JSON file path, JSON text, or an already-parsed mapping."""
    if isinstance(source, Mapping):
        return taxonomy_from_dict(source)
    text = Path(source).read_text(encoding="utf-8") if _looks_like_path(source) else str(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"taxonomy is not valid JSON: {exc}") from exc
    return taxonomy_from_dict(doc)


def _looks_like_path(source: str | Path) -> bool:
    if isinstance(source, Path):
        return True
    text = str(source).strip()
    return bool(text) and not text.startswith(("{", "["))


def data_path(name: str) -> Path:
    return Path(str(resources.files("oddvlm") / "data" / name))


def reference_taxonomy() -> Taxonomy:
    return load_taxonomy(data_path("reference_taxonomy.json"))


def mapillary_taxonomy() -> Taxonomy:
    return load_taxonomy(data_path("mapillary_taxonomy.json"))


def canonicalize(label: str, taxonomy: Taxonomy) -> str | None:
    """Map a model-emitted label to its canonical id; ``None`` when unrecognized."""
    if not isinstance(label, str):
        return None
    return taxonomy._lookup.get(normalize_label(label))


def persona_of(concept: Concept, personas: Iterable[Persona]) -> Persona:
    personas = list(personas)
    by_group = [p for p in personas if concept.group in p.groups]
    if len(by_group) == 1:
        return by_group[0]
    if len(by_group) > 1:
        raise TaxonomyError(
            f"concept {concept.id!r} matches several personas by group", [concept.id]
        )
    by_cat = [p for p in personas if concept.category in p.categories]
    if len(by_cat) != 1:
        reason = "no persona assignment" if not by_cat else "several personas by category"
        raise TaxonomyError(f"concept {concept.id!r} has {reason}", [concept.id])
    return by_cat[0]


def partition_by_persona(taxonomy: Taxonomy) -> dict[str, list[str]]:
    """Split concept ids among the taxonomy's personas (persona order kept, ids sorted)."""
    parts: dict[str, list[str]] = {p.name: [] for p in taxonomy.personas}
    for concept in taxonomy.concepts:
        parts[persona_of(concept, taxonomy.personas).name].append(concept.id)
    return {name: sorted(ids) for name, ids in parts.items()}


@dataclass(frozen=True)
class RoadContextTable:
    allowed: Mapping[str, frozenset[str]]

    @property
    def road_types(self) -> list[str]:
        return sorted(self.allowed)


def load_road_context(source: str | Path | Mapping[str, Any], taxonomy: Taxonomy) -> RoadContextTable:
    if isinstance(source, Mapping):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"road-context file is not valid JSON: {exc}") from exc
    if not isinstance(doc, Mapping) or not doc:
        raise TaxonomyError("road-context document must be a non-empty JSON object")
    allowed = {}
    for road_type, ids in doc.items():
        if not isinstance(ids, list) or not ids:
            raise TaxonomyError(f"road type {road_type!r} maps to an empty set", [road_type])
        unknown = sorted(i for i in ids if i not in taxonomy)
        if unknown:
            raise TaxonomyError(f"road type {road_type!r} lists unknown ids", unknown)
        allowed[road_type] = frozenset(ids)
    return RoadContextTable(allowed)


def reference_road_context(taxonomy: Taxonomy | None = None) -> RoadContextTable:
    return load_road_context(data_path("road_context.json"), taxonomy or reference_taxonomy())


def allowed_for_road_type(road_type: str, table: RoadContextTable) -> frozenset[str]:
    try:
        return table.allowed[road_type]
    except KeyError:
        raise UnknownRoadTypeError(road_type, table.allowed) from None
