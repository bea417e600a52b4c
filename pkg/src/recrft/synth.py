"""Synthetic recommendation world with exactly solvable symbolic queries.

Three query categories:

* ``explicit``    - constraints state attributes of the target directly;
* ``implicit``    - one relation's value is hidden (``director=?``) and must be
  inferred from two evidence items that share it with the target;
* ``misinformed`` - one stated value is wrong; the evidence items pin the
  correct value for that relation.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, InvalidInstanceError, ParseError
from .graph_store import Attribute, AttributeGraph, Catalog, InteractionGraph, build_catalog
from .seeding import make_rng

CATEGORIES = ("explicit", "implicit", "misinformed")
HIDDEN = "?"
RELATION_ORDER = ("genre", "actor", "director", "year")


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 200
    n_genres: int = 8
    n_actors: int = 40
    n_directors: int = 20
    n_years: int = 30
    attributes_per_item: int = 3
    n_users: int = 300
    interactions_per_user: int = 20
    preference_strength: float = 2.0
    n_candidates: int = 20
    n_queries: int = 2000
    category_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    max_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "category_mix", tuple(float(x) for x in self.category_mix))
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be >= 2")
        if len(self.category_mix) != len(CATEGORIES) or any(x < 0 for x in self.category_mix):
            raise ConfigError("category_mix needs one non-negative weight per category")
        if abs(sum(self.category_mix) - 1.0) > 1e-9:
            raise ConfigError("category_mix must sum to 1")
        if not 1 <= self.attributes_per_item <= len(RELATION_ORDER):
            raise ConfigError(f"attributes_per_item must be in 1..{len(RELATION_ORDER)}")
        if self.attributes_per_item < 2 and (self.category_mix[1] or self.category_mix[2]):
            raise ConfigError("implicit/misinformed queries need at least 2 attributes per item")
        sizes = (self.n_genres, self.n_actors, self.n_directors, self.n_years)[: self.attributes_per_item]
        if min(sizes) < 2:
            raise ConfigError("every relation vocabulary needs at least 2 values")
        if self.n_items < self.n_candidates + 2:
            raise ConfigError("catalog too small for the candidate count")
        if self.interactions_per_user > self.n_items:
            raise ConfigError("interactions_per_user exceeds n_items")
        if self.n_users < 0 or self.interactions_per_user < 0 or self.n_queries < 0:
            raise ConfigError("counts must be non-negative")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")

    @property
    def relations(self) -> tuple[str, ...]:
        return RELATION_ORDER[: self.attributes_per_item]

    def vocab_size(self, relation: str) -> int:
        return {"genre": self.n_genres, "actor": self.n_actors, "director": self.n_directors, "year": self.n_years}[
            relation
        ]

    def to_json(self) -> dict:
        d = asdict(self)
        d["category_mix"] = list(self.category_mix)
        return d


@dataclass(frozen=True)
class World:
    catalog: Catalog
    interactions: InteractionGraph
    profiles: Mapping[str, tuple[str, ...]] | None = None  # user -> preferred value per relation


@dataclass(frozen=True)
class Constraint:
    relation: str
    value: str  # HIDDEN when the value must be inferred

    def __str__(self) -> str:
        return f"{self.relation}={self.value}"

    @classmethod
    def parse(cls, s: str) -> Constraint:
        rel, sep, val = s.partition("=")
        if not sep or not rel or not val:
            raise ParseError(f"bad constraint {s!r}")
        return cls(rel.strip().casefold(), val.strip().casefold())


@dataclass(frozen=True)
class QueryInstance:
    query_id: str
    category: str
    constraints: tuple[Constraint, ...]
    ground_truth: str
    candidates: tuple[str, ...]
    evidence: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "category": self.category,
            "constraints": [str(c) for c in self.constraints],
            "evidence": list(self.evidence),
            "ground_truth": self.ground_truth,
            "candidates": list(self.candidates),
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> QueryInstance:
        try:
            inst = cls(
                query_id=str(rec["query_id"]),
                category=str(rec["category"]),
                constraints=tuple(Constraint.parse(c) for c in rec.get("constraints", [])),
                ground_truth=str(rec["ground_truth"]),
                candidates=tuple(str(c) for c in rec["candidates"]),
                evidence=tuple(str(e) for e in rec.get("evidence", [])),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"query record missing field {exc}") from None
        if inst.category not in CATEGORIES:
            raise ParseError(f"unknown category {inst.category!r}")
        return inst


def _item_title(n: int, width: int) -> str:
    return f"Film {n:0{width}d}"


def _value(relation: str, k: int) -> str:
    if relation == "year":
        return str(1960 + k)
    return f"{relation[0]}{k}"


def generate_world(config: SynthConfig) -> World:
    """Catalog plus interactions where users favour items matching a sampled profile.

    Each user draws one value per relation as a profile and samples
    ``interactions_per_user`` distinct items with probability proportional to
    ``exp(preference_strength * |item attrs & profile|)``. Strength 0 gives the
    uniform null world.
    """
    rng = make_rng(config.seed, "world")
    width = max(4, len(str(config.n_items)))
    rels = config.relations
    values = np.stack([rng.integers(0, config.vocab_size(r), size=config.n_items) for r in rels], axis=1)
    records = []
    for n in range(config.n_items):
        records.append(
            {
                "id": f"i{n:0{width}d}",
                "title": _item_title(n, width),
                "attributes": [{"relation": r, "value": _value(r, int(values[n, k]))} for k, r in enumerate(rels)],
            }
        )
    catalog = build_catalog(records)

    urng = make_rng(config.seed, "users")
    ids = catalog.ids
    pairs = []
    profiles = {}
    uwidth = max(4, len(str(config.n_users)))
    for u in range(config.n_users):
        user = f"u{u:0{uwidth}d}"
        profile = np.array([urng.integers(0, config.vocab_size(r)) for r in rels])
        profiles[user] = tuple(_value(r, int(k)) for r, k in zip(rels, profile))
        score = (values == profile).sum(axis=1)
        w = np.exp(config.preference_strength * score)
        picks = urng.choice(config.n_items, size=config.interactions_per_user, replace=False, p=w / w.sum())
        pairs.extend((user, ids[i]) for i in sorted(picks))
    return World(catalog, InteractionGraph(ids, pairs), profiles)


def relation_values(item: str, relation: str, graph: AttributeGraph) -> set[str]:
    return {a.value for a in graph.forward[item] if a.relation == relation}


def satisfies(item: str, constraints: Iterable[Constraint], graph: AttributeGraph) -> bool:
    attrs = graph.forward[item]
    return all(Attribute(c.relation, c.value) in attrs for c in constraints)


def items_matching(constraints: Sequence[Constraint], graph: AttributeGraph) -> frozenset[str]:
    """Every catalog item carrying all ``constraints`` (via the inverse index)."""
    sets = [graph.items_with(Attribute(c.relation, c.value)) for c in constraints]
    if not sets:
        return frozenset(graph.forward)
    return frozenset.intersection(*sets)


def resolve_constraints(instance: QueryInstance, graph: AttributeGraph) -> tuple[Constraint, ...]:
    """Fill hidden values and correct contradicted ones from the evidence items.

    For a constrained relation, if all evidence items share exactly one value,
    that value wins over whatever the query stated.
    """
    resolved = []
    for c in instance.constraints:
        shared = None
        if instance.evidence:
            sets = [relation_values(e, c.relation, graph) for e in instance.evidence]
            shared = set.intersection(*sets)
        if shared is not None and len(shared) == 1:
            resolved.append(Constraint(c.relation, next(iter(shared))))
        elif c.value == HIDDEN:
            raise InvalidInstanceError(f"{instance.query_id}: evidence does not pin {c.relation}")
        else:
            resolved.append(c)
    return tuple(resolved)


def oracle_answer(instance: QueryInstance, graph: AttributeGraph) -> str:
    resolved = resolve_constraints(instance, graph)
    hits = [c for c in instance.candidates if satisfies(c, resolved, graph)]
    if len(hits) != 1:
        raise InvalidInstanceError(f"{instance.query_id}: {len(hits)} candidates satisfy {[str(c) for c in resolved]}")
    return hits[0]


def _pick_negatives(rng, pool: Sequence[str], k: int) -> list[str] | None:
    if len(pool) < k:
        return None
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def _attempt(category: str, catalog: Catalog, rng, n_candidates: int, query_id: str) -> QueryInstance | None:
    graph = catalog.graph
    ids = catalog.ids
    gt = ids[int(rng.integers(len(ids)))]
    gt_attrs = sorted(graph.forward[gt])
    rels = sorted({a.relation for a in gt_attrs})
    first = {r: sorted(relation_values(gt, r, graph))[0] for r in rels}
    if len(rels) < 2:
        return None
    r_a, r_b = (rels[i] for i in rng.choice(len(rels), size=2, replace=False))
    evidence: list[str] = []
    trap = None
    if category == "explicit":
        stated = (Constraint(r_a, first[r_a]), Constraint(r_b, first[r_b]))
    elif category == "implicit":
        # r_a stated, r_b hidden and carried by the evidence
        stated = (Constraint(r_a, first[r_a]), Constraint(r_b, HIDDEN))
    else:
        # r_b stated with a wrong value; evidence carries the true one
        others = sorted({a.value for a in graph.inverse if a.relation == r_b} - relation_values(gt, r_b, graph))
        if not others:
            return None
        wrong = others[int(rng.integers(len(others)))]
        stated = (Constraint(r_a, first[r_a]), Constraint(r_b, wrong))
        traps = sorted(items_matching(stated, graph) - {gt})
        if traps:
            trap = traps[int(rng.integers(len(traps)))]
    if category != "explicit":
        carriers = sorted(graph.items_with(Attribute(r_b, first[r_b])) - {gt} - {trap})
        if len(carriers) < 2:
            return None
        evidence = [carriers[i] for i in rng.choice(len(carriers), size=2, replace=False)]

    stated = tuple(stated[i] for i in rng.permutation(len(stated)))
    probe = QueryInstance(query_id, category, stated, gt, (gt,), tuple(evidence))
    try:
        resolved = resolve_constraints(probe, graph)
    except InvalidInstanceError:
        return None
    if not satisfies(gt, resolved, graph):
        return None
    blocked = items_matching(resolved, graph) | {gt} | set(evidence)
    fixed = [trap] if trap is not None else []
    pool = [i for i in ids if i not in blocked and i not in fixed]
    negs = _pick_negatives(rng, pool, n_candidates - 1 - len(fixed))
    if negs is None:
        return None
    cands = [gt] + fixed + negs
    order = rng.permutation(len(cands))
    inst = QueryInstance(query_id, category, stated, gt, tuple(cands[i] for i in order), tuple(evidence))
    try:
        if oracle_answer(inst, graph) != gt:
            return None
    except InvalidInstanceError:
        return None
    return inst


def generate_query(
    category: str,
    catalog: Catalog,
    seed: int,
    n_candidates: int = 20,
    query_id: str = "q0",
    max_retries: int = 100,
) -> QueryInstance:
    if category not in CATEGORIES:
        raise ConfigError(f"unknown category {category!r}")
    if len(catalog) < n_candidates:
        raise GenerationError("catalog smaller than the candidate list")
    for attempt in range(max_retries):
        rng = make_rng(seed, "query", query_id, attempt)
        inst = _attempt(category, catalog, rng, n_candidates, query_id)
        if inst is not None:
            return inst
    raise GenerationError(f"no unique-answer {category} instance after {max_retries} attempts")


def category_counts(n: int, mix: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` over ``mix``."""
    raw = [n * w for w in mix]
    counts = [int(np.floor(x)) for x in raw]
    rest = n - sum(counts)
    order = sorted(range(len(mix)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def generate_queries(config: SynthConfig, catalog: Catalog) -> list[QueryInstance]:
    counts = category_counts(config.n_queries, config.category_mix)
    cats = [c for c, n in zip(CATEGORIES, counts) for _ in range(n)]
    order = make_rng(config.seed, "query-categories").permutation(len(cats))
    width = max(5, len(str(config.n_queries)))
    return [
        generate_query(
            cats[k],
            catalog,
            config.seed,
            config.n_candidates,
            query_id=f"q{n:0{width}d}",
            max_retries=config.max_retries,
        )
        for n, k in enumerate(order)
    ]


def render_query_tokens(instance: QueryInstance) -> list[str]:
    return (
        [f"<{instance.category}>"]
        + [str(c) for c in instance.constraints]
        + ["<evidence>"]
        + list(instance.evidence)
        + ["</evidence>", "<candidates>"]
        + list(instance.candidates)
        + ["</q>"]
    )


def parse_query_tokens(tokens: Sequence[str]) -> tuple[str, tuple[Constraint, ...], tuple[str, ...], tuple[str, ...]]:
    """Inverse of ``render_query_tokens``: (category, constraints, evidence, candidates)."""
    try:
        cat = tokens[0][1:-1]
        ev_open = tokens.index("<evidence>")
        ev_close = tokens.index("</evidence>")
        c_open = tokens.index("<candidates>")
        end = tokens.index("</q>")
    except (ValueError, IndexError):
        raise ParseError("malformed query token sequence") from None
    if cat not in CATEGORIES or not (0 < ev_open < ev_close < c_open < end):
        raise ParseError("malformed query token sequence")
    constraints = tuple(Constraint.parse(t) for t in tokens[1:ev_open])
    return cat, constraints, tuple(tokens[ev_open + 1 : ev_close]), tuple(tokens[c_open + 1 : end])


def write_queries(queries: Iterable[QueryInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(q.to_json(), sort_keys=True) + "\n")


def load_queries(path: str | Path) -> list[QueryInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(QueryInstance.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            except ParseError as exc:
                raise ParseError(str(exc), lineno) from None
    return out
