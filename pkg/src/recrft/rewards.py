"""Shaped reward: NDCG plus weighted attribute-overlap and embedding-cosine terms."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import UnknownItemError, ValidationError
from .graph_store import AttributeGraph, EmbeddingTable, Item, attribute_relations
from .text import normalize_title

BOXED_MARKER = "\\boxed{"


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 0.01
    w2: float = 0.01
    K: int = 1

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValidationError("reward weights must be non-negative")
        if self.K < 1:
            raise ValidationError("NDCG cutoff K must be >= 1")

    def combine(self, ndcg: float, qas: float, pas: float) -> ShapedReward:
        return ShapedReward(ndcg, qas, pas, ndcg + self.w1 * qas + self.w2 * pas)


@dataclass(frozen=True)
class ShapedReward:
    ndcg: float
    qas: float
    pas: float
    total: float

    def to_dict(self) -> dict:
        return {"ndcg": self.ndcg, "qas": self.qas, "pas": self.pas, "total": self.total}


ZERO_REWARD = ShapedReward(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ExtractedAnswer:
    item: str | None
    raw_span: str | None


def last_boxed_span(text: str) -> str | None:
    """Content of the last ``\\boxed{...}``, honouring nested braces.

    An unterminated final marker falls back to the previous complete one.
    """
    spans = []
    pos = 0
    while True:
        start = text.find(BOXED_MARKER, pos)
        if start < 0:
            break
        i = start + len(BOXED_MARKER)
        depth = 1
        while i < len(text) and depth:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            spans.append(text[start + len(BOXED_MARKER) : i - 1])
        pos = start + len(BOXED_MARKER)
    return spans[-1] if spans else None


def title_index(candidates: Sequence[Item]) -> dict[str, str]:
    """Map normalised title -> item id; titles must be unique after normalisation."""
    index: dict[str, str] = {}
    for c in candidates:
        key = normalize_title(c.title)
        if key in index and index[key] != c.id:
            raise ValidationError(f"candidate titles collide after normalisation: {key!r}")
        index[key] = c.id
    return index


def extract_answer(response_text: str, candidates: Sequence[Item]) -> ExtractedAnswer:
    raw = last_boxed_span(response_text)
    index = title_index(candidates)
    if raw is None:
        return ExtractedAnswer(None, None)
    return ExtractedAnswer(index.get(normalize_title(raw)), raw)


def ndcg_at_k(ranked: Sequence[str], gt: str, K: int) -> float:
    """Binary-relevance NDCG@K with a single relevant item (IDCG = 1)."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    if len(set(ranked)) != len(ranked):
        raise ValidationError("ranked list contains duplicates")
    for j, item in enumerate(ranked[:K], start=1):
        if item == gt:
            return 1.0 / math.log2(j + 1)
    return 0.0


def qas(p: str, gt: str, graph: AttributeGraph) -> float:
    rp = attribute_relations(p, graph)
    rgt = attribute_relations(gt, graph)
    if not rgt:
        return 1.0 if p == gt else 0.0
    return len(rp & rgt) / len(rgt)


def pas(p: str, gt: str, embeddings: EmbeddingTable) -> float:
    """Cosine of the two item embeddings, clamped at 0; cold items score 0."""
    a = embeddings.vector(p)
    b = embeddings.vector(gt)
    if p in embeddings.cold or gt in embeddings.cold:
        return 0.0
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    if p == gt:
        return 1.0
    cos = float(np.dot(a, b)) / (na * nb)
    return min(max(cos, 0.0), 1.0)


def shape_reward(
    p: str | None,
    gt: str,
    graph: AttributeGraph,
    embeddings: EmbeddingTable,
    weights: RewardWeights = RewardWeights(),
) -> ShapedReward:
    if gt not in graph:
        raise UnknownItemError(f"unknown ground-truth item {gt!r}")
    if p is None:
        return ZERO_REWARD
    n = ndcg_at_k([p], gt, weights.K)
    q = qas(p, gt, graph)
    s = pas(p, gt, embeddings)
    return weights.combine(n, q, s)

