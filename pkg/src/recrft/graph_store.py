"""Item catalog, item-attribute graph, user-item graph and item embeddings."""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .errors import IngestError, ParseError, TrainingError, UnknownItemError, ValidationError
from .seeding import make_rng
from .text import normalize_attr, normalize_title

DEFAULT_RELATIONS = frozenset({"genre", "actor", "director", "year"})


@dataclass(frozen=True)
class Item:
    id: str
    title: str

    def __post_init__(self):
        if not self.title or not self.title.strip():
            raise ValidationError(f"item {self.id!r} has an empty title")


@dataclass(frozen=True, order=True)
class Attribute:
    relation: str
    value: str

    @classmethod
    def make(cls, relation: str, value: str) -> Attribute:
        return cls(normalize_attr(relation), normalize_attr(value))

    def __str__(self) -> str:
        return f"{self.relation}={self.value}"


class AttributeGraph:
    """Bipartite item/attribute graph with forward and inverse indexes.

    Immutable once built; the mappings handed out are read-only views.
    """

    def __init__(self, edges: Mapping[str, Iterable[Attribute]]):
        forward: dict[str, frozenset[Attribute]] = {}
        inverse: dict[Attribute, set[str]] = {}
        for item, attrs in edges.items():
            fs = frozenset(attrs)
            forward[item] = fs
            for a in fs:
                inverse.setdefault(a, set()).add(item)
        self._forward = MappingProxyType(forward)
        self._inverse = MappingProxyType({a: frozenset(s) for a, s in inverse.items()})

    @property
    def forward(self) -> Mapping[str, frozenset[Attribute]]:
        return self._forward

    @property
    def inverse(self) -> Mapping[Attribute, frozenset[str]]:
        return self._inverse

    def __contains__(self, item: str) -> bool:
        return item in self._forward

    def __len__(self) -> int:
        return len(self._forward)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttributeGraph):
            return NotImplemented
        return dict(self._forward) == dict(other._forward)

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self._forward.values())

    def items_with(self, attr: Attribute) -> frozenset[str]:
        return self._inverse.get(attr, frozenset())


@dataclass(frozen=True)
class Catalog:
    """Ordered item catalog plus its attribute graph."""

    items: tuple[Item, ...]
    graph: AttributeGraph
    relations: frozenset[str] = DEFAULT_RELATIONS
    _by_id: Mapping[str, Item] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id = {}
        for it in self.items:
            if it.id in by_id:
                raise IngestError(f"duplicate item id {it.id!r}")
            by_id[it.id] = it
        object.__setattr__(self, "_by_id", MappingProxyType(by_id))

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(it.id for it in self.items)

    def get(self, item_id: str) -> Item:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise UnknownItemError(f"unknown item {item_id!r}") from None

    def title(self, item_id: str) -> str:
        return self.get(item_id).title


def build_catalog(records: Iterable[Mapping], relations: Iterable[str] = DEFAULT_RELATIONS) -> Catalog:
    """Build a catalog from already-decoded records (see ``load_catalog``)."""
    relations = frozenset(normalize_attr(r) for r in relations)
    items: list[Item] = []
    edges: dict[str, set[Attribute]] = {}
    for rec in records:
        item_id = str(rec["id"])
        if item_id in edges:
            raise IngestError(f"duplicate item id {item_id!r}")
        attrs = set()
        for a in rec.get("attributes", ()):
            attr = Attribute.make(a["relation"], a["value"])
            if attr.relation not in relations:
                raise IngestError(f"item {item_id!r}: relation {attr.relation!r} not in vocabulary")
            attrs.add(attr)
        items.append(Item(item_id, str(rec["title"])))
        edges[item_id] = attrs
    return Catalog(tuple(items), AttributeGraph(edges), relations)


def _check_record(rec: object, lineno: int) -> None:
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    for key in ("id", "title"):
        if not isinstance(rec.get(key), str):
            raise ParseError(f"missing or non-string field {key!r}", lineno)
    attrs = rec.get("attributes", [])
    if not isinstance(attrs, list):
        raise ParseError("'attributes' must be a list", lineno)
    for a in attrs:
        if not (isinstance(a, dict) and isinstance(a.get("relation"), str) and isinstance(a.get("value"), str)):
            raise ParseError("attribute needs string 'relation' and 'value'", lineno)


def load_catalog(path: str | Path, relations: Iterable[str] = DEFAULT_RELATIONS) -> Catalog:
    """Read a JSONL catalog: ``{"id", "title", "attributes": [{"relation", "value"}]}`` per line."""
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            _check_record(rec, lineno)
            if rec["id"] in seen:
                raise IngestError(f"line {lineno}: duplicate item id {rec['id']!r}")
            seen.add(rec["id"])
            records.append(rec)
    return build_catalog(records, relations)


def catalog_records(catalog: Catalog) -> list[dict]:
    out = []
    for it in catalog.items:
        attrs = sorted(catalog.graph.forward[it.id])
        out.append(
            {
                "id": it.id,
                "title": it.title,
                "attributes": [{"relation": a.relation, "value": a.value} for a in attrs],
            }
        )
    return out


def write_catalog(catalog: Catalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in catalog_records(catalog):
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def attribute_relations(item: str, graph: AttributeGraph) -> frozenset[Attribute]:
    try:
        return graph.forward[item]
    except KeyError:
        raise UnknownItemError(f"unknown item {item!r}") from None


class InteractionGraph:
    """Deduplicated bipartite user-item graph over a fixed item universe."""

    def __init__(self, items: Iterable[str], pairs: Iterable[tuple[str, str]]):
        self.items: tuple[str, ...] = tuple(items)
        item_set = set(self.items)
        user_items: dict[str, set[str]] = {}
        item_users: dict[str, set[str]] = {i: set() for i in self.items}
        for u, i in pairs:
            if i not in item_set:
                raise IngestError(f"interaction references unknown item {i!r}")
            user_items.setdefault(u, set()).add(i)
            item_users[i].add(u)
        self.users: tuple[str, ...] = tuple(sorted(user_items))
        self.user_items = MappingProxyType({u: frozenset(s) for u, s in user_items.items()})
        self.item_users = MappingProxyType({i: frozenset(s) for i, s in item_users.items()})

    @property
    def n_edges(self) -> int:
        return sum(len(s) for s in self.user_items.values())

    def edges(self) -> list[tuple[str, str]]:
        return [(u, i) for u in self.users for i in sorted(self.user_items[u])]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return self.items == other.items and dict(self.user_items) == dict(other.user_items)


def load_interactions(path: str | Path, catalog: Catalog | Iterable[str], header: bool = False) -> InteractionGraph:
    """Read ``user_id,item_id[,timestamp]`` rows; duplicates collapse to one edge."""
    items = catalog.ids if isinstance(catalog, Catalog) else tuple(catalog)
    known = set(items)
    pairs = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (2, 3) or not row[0].strip() or not row[1].strip():
                raise ParseError("expected user_id,item_id[,timestamp]", lineno)
            u, i = row[0].strip(), row[1].strip()
            if i not in known:
                raise IngestError(f"line {lineno}: unknown item {i!r}")
            pairs.append((u, i))
    return InteractionGraph(items, pairs)


def write_interactions(graph: InteractionGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for u, i in graph.edges():
            w.writerow([u, i])


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    ids: tuple[str, ...]
    vectors: np.ndarray
    provenance: str
    cold: frozenset[str] = frozenset()

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.ids):
            raise ValidationError("embedding matrix must be (n_items, dim)")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate ids in embedding table")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "_index", {k: n for n, k in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, item: str) -> bool:
        return item in self._index

    def vector(self, item: str) -> np.ndarray:
        try:
            return self.vectors[self._index[item]]
        except KeyError:
            raise UnknownItemError(f"no embedding for item {item!r}") from None

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "dim": self.dim,
            "cold": sorted(self.cold),
            "ids": list(self.ids),
            "vectors": self.vectors.tolist(),
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> EmbeddingTable:
        ids = tuple(payload["ids"])
        vecs = np.array(payload["vectors"], dtype=np.float64).reshape(len(ids), int(payload["dim"]))
        return cls(ids, vecs, payload["provenance"], frozenset(payload.get("cold", ())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingTable:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def baseline_embeddings(graph: InteractionGraph) -> EmbeddingTable:
    """L2-normalised binary user-incidence vectors, one column per user."""
    if not graph.items:
        raise ValidationError("baseline embeddings need a non-empty catalog")
    col = {u: n for n, u in enumerate(graph.users)}
    vecs = np.zeros((len(graph.items), max(len(graph.users), 1)))
    cold = set()
    for r, item in enumerate(graph.items):
        users = graph.item_users[item]
        if not users:
            cold.add(item)
            continue
        vecs[r, [col[u] for u in users]] = 1.0
        vecs[r] /= np.sqrt(len(users))
    return EmbeddingTable(graph.items, vecs, "baseline", frozenset(cold))


def train_mf_embeddings(
    graph: InteractionGraph,
    dims: int = 16,
    epochs: int = 50,
    learning_rate: float = 0.05,
    seed: int = 0,
    reg: float = 0.01,
    batch_size: int = 256,
) -> EmbeddingTable:
    """Pairwise-ranking (BPR) matrix factorisation; returns the item factors.

    Each epoch visits every observed (user, item) edge once in a seeded order,
    pairs it with a uniformly drawn unobserved item and takes mini-batch SGD
    steps on ``-log sigmoid(x_ui - x_uj)``.
    """
    if dims < 2:
        raise ValidationError("dims must be >= 2")
    edges = graph.edges()
    if not edges:
        raise TrainingError("cannot train embeddings without interactions")
    item_ix = {i: n for n, i in enumerate(graph.items)}
    user_ix = {u: n for n, u in enumerate(graph.users)}
    n_items, n_users = len(graph.items), len(graph.users)
    eu = np.array([user_ix[u] for u, _ in edges])
    ei = np.array([item_ix[i] for _, i in edges])
    seen = np.zeros((n_users, n_items), dtype=bool)
    seen[eu, ei] = True

    rng = make_rng(seed, "mf-embeddings")
    P = rng.normal(0.0, 0.1, size=(n_users, dims))
    Q = rng.normal(0.0, 0.1, size=(n_items, dims))
    for _ in range(epochs):
        order = rng.permutation(len(edges))
        for start in range(0, len(order), batch_size):
            b = order[start : start + batch_size]
            u, i = eu[b], ei[b]
            j = rng.integers(0, n_items, size=len(b))
            # redraw negatives that hit observed items; users who saw everything keep the collision
            for _retry in range(10):
                bad = seen[u, j]
                if not bad.any():
                    break
                j[bad] = rng.integers(0, n_items, size=int(bad.sum()))
            pu, qi, qj = P[u], Q[i], Q[j]
            x = np.einsum("bd,bd->b", pu, qi - qj)
            g = 1.0 / (1.0 + np.exp(x))  # sigmoid(-x)
            dpu = g[:, None] * (qi - qj) - reg * pu
            dqi = g[:, None] * pu - reg * qi
            dqj = -g[:, None] * pu - reg * qj
            np.add.at(P, u, learning_rate * dpu)
            np.add.at(Q, i, learning_rate * dqi)
            np.add.at(Q, j, learning_rate * dqj)

    cold = frozenset(i for i in graph.items if not graph.item_users[i])
    for i in cold:
        Q[item_ix[i]] = 0.0
    return EmbeddingTable(graph.items, Q, "trained", cold)
