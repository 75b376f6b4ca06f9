"""
Shared fixtures: small hand-built graphs, templates and synthetic datasets
"""
from datetime import date
from typing import List

import numpy as np
import pytest

from knowledge_platform.core.graph import KnowledgeGraph, Triplet
from knowledge_platform.core.oracle import ProbeBatchResult, TemplateTable
from knowledge_platform.core.planted import RELATION_TEMPLATES
from knowledge_platform.core.tables import EntityScoreTable, TripletLabelTable


def make_graph(edges: List[tuple], n_entities: int = None, relation_labels=("linked_to",)) -> KnowledgeGraph:
    """Graph over entities e0..e{n-1}; edges are (head, tail) or (head, relation, tail)."""
    if n_entities is None:
        n_entities = 1 + max(max(e[0], e[-1]) for e in edges)
    triplets = []
    for edge in edges:
        if len(edge) == 2:
            triplets.append(Triplet(edge[0], 0, edge[1]))
        else:
            triplets.append(Triplet(edge[0], edge[1], edge[2]))
    return KnowledgeGraph([f"e{i}" for i in range(n_entities)], list(relation_labels), triplets)


def random_graph(rng: np.random.Generator, n_entities: int, n_triplets: int, n_relations: int = 3) -> KnowledgeGraph:
    triplets = [
        Triplet(int(rng.integers(n_entities)), int(rng.integers(n_relations)), int(rng.integers(n_entities)))
        for _ in range(n_triplets)
    ]
    return KnowledgeGraph(
        [f"e{i}" for i in range(n_entities)],
        [f"r{i}" for i in range(n_relations)],
        triplets,
    )


def scores_table(values: dict) -> EntityScoreTable:
    return EntityScoreTable(scores=dict(values), support={v: 1 for v in values})


class FixedLabeler:
    """Labels every triplet with a fixed value, counting calls."""

    kind = "fixed"

    def __init__(self, value: int = 1):
        self.value = value
        self.calls = 0

    def label(self, g, triplet_refs):
        self.calls += 1
        labels = {int(i): self.value for i in triplet_refs}
        return ProbeBatchResult(TripletLabelTable(labels, {i: "synthetic" for i in labels}))


@pytest.fixture
def path_graph() -> KnowledgeGraph:
    """a - b - c"""
    return make_graph([(0, 1), (1, 2)])


@pytest.fixture
def star_graph() -> KnowledgeGraph:
    """center 0 with leaves 1, 2, 3"""
    return make_graph([(0, 1), (0, 2), (0, 3)])


@pytest.fixture
def templates() -> TemplateTable:
    return TemplateTable.from_mapping(RELATION_TEMPLATES)


@pytest.fixture
def family_graph() -> KnowledgeGraph:
    return KnowledgeGraph(
        ["X", "Y", "Trump", "China"],
        ["son_of", "visit"],
        [
            Triplet(0, 0, 1),
            Triplet(2, 1, 3, date(2017, 11, 8)),
        ],
    )


@pytest.fixture
def family_templates() -> TemplateTable:
    return TemplateTable.from_mapping({
        "son_of": "{SUB} is the son of {OBJ}.",
        "visit": "{SUB} made a visit to {OBJ}.",
    })


@pytest.fixture
def tsv_file(tmp_path):
    def write(text: str, name: str = "graph.tsv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write
