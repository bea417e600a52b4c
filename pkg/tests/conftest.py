import json

import numpy as np
import pytest

from recrft.graph_store import EmbeddingTable, build_catalog
from recrft.synth import SynthConfig, generate_queries, generate_world

MOVIES = [
    {
        "id": "go",
        "title": "Go (1999)",
        "attributes": [
            {"relation": "genre", "value": "scifi"},
            {"relation": "actor", "value": "a1"},
            {"relation": "actor", "value": "a2"},
        ],
    },
    {
        "id": "kk",
        "title": "King Kong (1933)",
        "attributes": [
            {"relation": "genre", "value": "scifi"},
            {"relation": "actor", "value": "a1"},
            {"relation": "director", "value": "d1"},
        ],
    },
    {
        "id": "heat",
        "title": "Heat (1995)",
        "attributes": [{"relation": "genre", "value": "Crime "}, {"relation": "actor", "value": "A3"}],
    },
    {"id": "blank", "title": "Untitled Project", "attributes": []},
]


@pytest.fixture
def movies():
    return build_catalog(MOVIES)


@pytest.fixture
def movies_path(tmp_path):
    p = tmp_path / "catalog.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in MOVIES), encoding="utf-8")
    return p


@pytest.fixture
def movie_embeddings():
    ids = ("go", "kk", "heat", "blank")
    vecs = np.array([[1.0, 0.0], [0.5, np.sqrt(3) / 2], [-1.0, 0.0], [0.0, 0.0]])
    return EmbeddingTable(ids, vecs, "baseline", frozenset({"blank"}))


SMALL_SYNTH = SynthConfig(
    n_items=60,
    n_genres=4,
    n_actors=10,
    n_directors=6,
    n_users=60,
    interactions_per_user=8,
    n_candidates=8,
    n_queries=120,
    seed=11,
)


@pytest.fixture(scope="session")
def small_world():
    world = generate_world(SMALL_SYNTH)
    return world, generate_queries(SMALL_SYNTH, world.catalog)
