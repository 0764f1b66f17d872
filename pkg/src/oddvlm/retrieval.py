"""Concept-description knowledge base with top-k cosine retrieval."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .backend.http import JsonPoster, RemoteProfile
from .taxonomy import Taxonomy

DEFAULT_TOP_K = 8

_WORDS = re.compile(r"[^\W_]+")
# scores are rounded before ranking so float noise cannot reorder exact ties
_SCORE_DECIMALS = 12


class EmptyTextError(ValueError):
    pass


class Embedder(Protocol):
    embedder_id: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def lexical_tokens(text: str) -> list[str]:
    return _WORDS.findall(text.casefold())


class LexicalEmbedder:
    """Normalized term-frequency vectors over a fixed vocabulary.

    Tokens outside the vocabulary are ignored, so a text sharing no word with
    the vocabulary maps to the zero (null) vector.
    """

    def __init__(self, vocabulary: Iterable[str]) -> None:
        self.vocabulary = sorted(set(vocabulary))
        self._index = {w: i for i, w in enumerate(self.vocabulary)}
        self.dimension = len(self.vocabulary)
        self.embedder_id = f"lexical-tf/{self.dimension}"

    @classmethod
    def fit(cls, texts: Iterable[str]) -> LexicalEmbedder:
        vocab: set[str] = set()
        for t in texts:
            vocab.update(lexical_tokens(t))
        return cls(vocab)

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        for word, n in Counter(lexical_tokens(text)).items():
            i = self._index.get(word)
            if i is not None:
                vec[i] = n
        return normalize(vec)


class RemoteEmbedder:
    """Embeddings from an OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, profile: RemoteProfile, dimension: int, **poster_kwargs) -> None:
        self.profile = profile
        self.dimension = dimension
        self.embedder_id = f"remote/{profile.model}"
        self._poster = JsonPoster(profile, **poster_kwargs)

    def embed(self, text: str) -> np.ndarray:
        data = self._poster.post(self.profile.endpoint, {"model": self.profile.model, "input": text})
        vec = np.asarray(data["data"][0]["embedding"], dtype=float)
        if vec.shape != (self.dimension,) or not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding has shape {vec.shape}, expected ({self.dimension},)")
        return normalize(vec)


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return vec / norm


def is_null(vec: np.ndarray) -> bool:
    return not np.any(vec)


def embed(text: str, embedder: Embedder) -> np.ndarray:
    if not text or not text.strip():
        raise EmptyTextError("cannot embed empty text")
    return embedder.embed(text)


@dataclass(frozen=True)
class KnowledgeBase:
    ids: tuple[str, ...]
    descriptions: tuple[str, ...]
    matrix: np.ndarray  # one unit row per entry
    embedder: Embedder

    @property
    def embedder_id(self) -> str:
        return self.embedder.embedder_id

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Iterable[str]) -> KnowledgeBase:
        keep = set(ids)
        rows = [i for i, cid in enumerate(self.ids) if cid in keep]
        return KnowledgeBase(
            tuple(self.ids[i] for i in rows),
            tuple(self.descriptions[i] for i in rows),
            self.matrix[rows],
            self.embedder,
        )


def build_knowledge_base(taxonomy: Taxonomy, embedder: Embedder | None = None) -> KnowledgeBase:
    descriptions = [c.description for c in taxonomy.concepts]
    embedder = embedder or LexicalEmbedder.fit(descriptions)
    matrix = np.vstack([embed(d, embedder) for d in descriptions])
    return KnowledgeBase(taxonomy.ids, tuple(descriptions), matrix, embedder)


def retrieve_topk(query: str, kb: KnowledgeBase, k: int = DEFAULT_TOP_K) -> list[tuple[str, float]]:
    """Rank entries by cosine similarity to ``query``; ties break on concept id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    q = embed(query, kb.embedder)
    scores = kb.matrix @ q
    ranked = sorted(
        (
            (round(float(s), _SCORE_DECIMALS), cid)
            for cid, s, row in zip(kb.ids, scores, kb.matrix)
            if not is_null(row)
        ),
        key=lambda t: (-t[0], t[1]),
    )
    return [(cid, score) for score, cid in ranked[:k]]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
