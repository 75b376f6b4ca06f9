"""
Planted oracle and synthetic dataset generation.

The planted oracle labels triplets with community-structured Bernoulli rates,
giving ground truth that exhibits knowledge homophily without any LLM. The
generator writes a desk-scale knowledge graph with templates and weakly
informative entity embeddings, so every stage can run offline.
"""
import logging
from collections import deque
from dataclasses import dataclass
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .errors import DataError, GraphError
from .graph import KnowledgeGraph, Triplet
from .oracle import LabelSource, ProbeBatchResult, TemplateTable
from .retrieval import GoldPath, Question, render_question
from .tables import TripletLabelTable

logger = logging.getLogger(__name__)


class CommunityAssignment(str, Enum):
    BFS_BLOCKS = "bfs_blocks"
    RANDOM = "random"


class PlantedOracleConfig(BaseModel):
    n_communities: int = Field(default=2, ge=1)
    community_rates: List[float] = Field(default_factory=lambda: [0.9, 0.1])
    assignment: CommunityAssignment = CommunityAssignment.BFS_BLOCKS
    noise: float = Field(default=0.05, ge=0.0, lt=0.5)
    seed: int = 0

    @model_validator(mode="after")
    def check_rates(self) -> "PlantedOracleConfig":
        if len(self.community_rates) != self.n_communities:
            raise ValueError(
                f"community_rates has {len(self.community_rates)} entries, "
                f"expected n_communities={self.n_communities}"
            )
        if any(not 0.0 <= r <= 1.0 for r in self.community_rates):
            raise ValueError("community rates must lie in [0, 1]")
        return self


def bfs_order(g: KnowledgeGraph) -> List[int]:
    """BFS from the lowest unvisited id, neighbors in ascending order."""
    visited = [False] * g.num_entities
    order: List[int] = []
    for root in range(g.num_entities):
        if visited[root]:
            continue
        visited[root] = True
        queue = deque([root])
        while queue:
            v = queue.popleft()
            order.append(v)
            for u in sorted(g.neighbors(v)):
                if not visited[u]:
                    visited[u] = True
                    queue.append(u)
    return order


def assign_communities(
    g: KnowledgeGraph,
    n_communities: int,
    assignment: CommunityAssignment = CommunityAssignment.BFS_BLOCKS,
    seed: int = 0,
) -> np.ndarray:
    """
    Split entities into ``n_communities`` near-equal blocks.

    bfs_blocks cuts the BFS order into contiguous blocks, so communities are
    topologically coherent; random cuts a seeded permutation.
    """
    if not 1 <= n_communities <= g.num_entities:
        raise GraphError(
            f"cannot assign {n_communities} communities over {g.num_entities} entities"
        )
    if CommunityAssignment(assignment) == CommunityAssignment.BFS_BLOCKS:
        order = bfs_order(g)
    else:
        order = np.random.default_rng(seed).permutation(g.num_entities).tolist()
    community = np.empty(g.num_entities, dtype=np.int64)
    for position, entity in enumerate(order):
        community[entity] = position * n_communities // g.num_entities
    return community


class PlantedOracle:
    """
    Deterministic synthetic labeler.

    Labels are drawn once for every triplet of the root graph; sparsified
    graphs resolve their triplets through ``origin`` and see the same labels.
    """

    kind = "planted"

    def __init__(self, g: KnowledgeGraph, cfg: PlantedOracleConfig, community: Optional[np.ndarray] = None):
        self.cfg = cfg
        if community is None:
            community = assign_communities(g, cfg.n_communities, cfg.assignment, cfg.seed)
        community = np.asarray(community, dtype=np.int64)
        if community.shape != (g.num_entities,):
            raise GraphError(f"community array has shape {community.shape} for {g.num_entities} entities")
        if len(community) and not 0 <= community.min() <= community.max() < cfg.n_communities:
            raise GraphError(f"community ids must lie in [0, {cfg.n_communities})")
        self.community = community
        rates = np.asarray(cfg.community_rates, dtype=float)
        entity_rates = rates[self.community]

        n_root = max(g.origin) + 1 if g.num_triplets else 0
        heads = np.array([t.head for t in g.triplets], dtype=np.int64)
        tails = np.array([t.tail for t in g.triplets], dtype=np.int64)
        triplet_rates = (entity_rates[heads] + entity_rates[tails]) / 2.0

        rng = np.random.default_rng(cfg.seed)
        draws = rng.random(g.num_triplets)
        flips = rng.random(g.num_triplets)
        values = (draws < triplet_rates).astype(np.int64)
        values = np.where(flips < cfg.noise, 1 - values, values)

        self.rates = np.full(n_root, np.nan)
        self._labels = np.full(n_root, -1, dtype=np.int64)
        for index, root_index in enumerate(g.origin):
            self._labels[root_index] = values[index]
            self.rates[root_index] = triplet_rates[index]
        logger.info(
            f"Planted oracle over {g.num_triplets} triplets: "
            f"{cfg.n_communities} communities ({cfg.assignment.value}), "
            f"positive rate {values.mean() if len(values) else 0.0:.3f}"
        )

    def label_of(self, g: KnowledgeGraph, triplet_ref: int) -> int:
        root_index = g.origin[triplet_ref]
        if not 0 <= root_index < len(self._labels) or self._labels[root_index] < 0:
            raise DataError(f"triplet {triplet_ref} is not part of the planted graph")
        return int(self._labels[root_index])

    def label(self, g: KnowledgeGraph, triplet_refs: Sequence[int]) -> ProbeBatchResult:
        labels = {int(ref): self.label_of(g, int(ref)) for ref in triplet_refs}
        sources = {ref: LabelSource.SYNTHETIC.value for ref in labels}
        return ProbeBatchResult(TripletLabelTable(labels, sources))


def planted_oracle(
    g: KnowledgeGraph, cfg: PlantedOracleConfig, community: Optional[np.ndarray] = None
) -> PlantedOracle:
    """Planted oracle over BFS-block communities, or over ``community`` when given."""
    return PlantedOracle(g, cfg, community)


# -- synthetic dataset -----------------------------------------------------

RELATION_TEMPLATES: Dict[str, str] = {
    "born_in": "{SUB} was born in {OBJ}.",
    "capital_of": "{SUB} is the capital of {OBJ}.",
    "member_of": "{SUB} is a member of {OBJ}.",
    "located_in": "{SUB} is located in {OBJ}.",
    "works_for": "{SUB} works for {OBJ}.",
    "spouse_of": "{SUB} is the spouse of {OBJ}.",
    "founded_by": "{SUB} was founded by {OBJ}.",
    "part_of": "{SUB} is part of {OBJ}.",
    "genre_of": "{SUB} is the genre of {OBJ}.",
    "treats": "{SUB} treats {OBJ}.",
}

_FIRST_DAY = date(2000, 1, 1)
_DAY_SPAN = (date(2020, 12, 31) - _FIRST_DAY).days


class SyntheticDatasetConfig(BaseModel):
    n_entities: int = Field(default=1000, ge=4)
    half_degree: int = Field(default=2, ge=1)  # ring lattice links i to i+1 .. i+half_degree
    rewire_probability: float = Field(default=0.05, ge=0.0, le=1.0)
    n_communities: int = Field(default=2, ge=1)
    embedding_dim: int = Field(default=8, ge=2)
    signal: float = Field(default=0.25, ge=0.0)
    temporal: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def check_size(self) -> "SyntheticDatasetConfig":
        if 2 * self.half_degree >= self.n_entities:
            raise ValueError("half_degree too large for the number of entities")
        if self.n_communities > self.n_entities:
            raise ValueError("more communities than entities")
        return self


@dataclass
class SyntheticDataset:
    graph: KnowledgeGraph
    templates: TemplateTable
    embeddings: Dict[str, np.ndarray]
    community: np.ndarray


def _entity_labels(n: int) -> List[str]:
    width = len(str(n - 1))
    return [f"Entity {i:0{width}d}" for i in range(n)]


def _community_embeddings(
    rng: np.random.Generator, g: KnowledgeGraph, community: np.ndarray, cfg: SyntheticDatasetConfig
) -> Dict[str, np.ndarray]:
    directions = rng.normal(size=(cfg.n_communities, cfg.embedding_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    noise = rng.normal(size=(g.num_entities, cfg.embedding_dim)) / np.sqrt(cfg.embedding_dim)
    vectors = cfg.signal * directions[community] + noise
    return {label: vectors[i] for i, label in enumerate(g.entity_labels)}


def generate_synthetic(cfg: SyntheticDatasetConfig) -> SyntheticDataset:
    """
    Ring-lattice graph with random rewiring and natural relation names.

    Embeddings are a weak community direction plus isotropic noise, so an
    entity's own vector barely predicts its community while the average over
    its neighborhood does.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_entities
    relations = list(RELATION_TEMPLATES)

    edges = set()
    triplets: List[Triplet] = []
    for i in range(n):
        for offset in range(1, cfg.half_degree + 1):
            tail = (i + offset) % n
            if rng.random() < cfg.rewire_probability:
                candidate = int(rng.integers(n))
                if candidate != i and (i, candidate) not in edges and (candidate, i) not in edges:
                    tail = candidate
            if (i, tail) in edges or (tail, i) in edges:
                continue
            edges.add((i, tail))
            relation = int(rng.integers(len(relations)))
            timestamp = None
            if cfg.temporal:
                timestamp = _FIRST_DAY + timedelta(days=int(rng.integers(_DAY_SPAN + 1)))
            triplets.append(Triplet(i, relation, tail, timestamp))

    graph = KnowledgeGraph(_entity_labels(n), relations, triplets)
    community = assign_communities(graph, cfg.n_communities, CommunityAssignment.BFS_BLOCKS)

    embeddings = _community_embeddings(rng, graph, community, cfg)

    logger.info(
        f"Generated synthetic graph: {graph.num_entities} entities, "
        f"{graph.num_triplets} triplets, {cfg.n_communities} communities"
    )
    return SyntheticDataset(graph, TemplateTable.from_mapping(RELATION_TEMPLATES), embeddings, community)


def write_synthetic(dataset: SyntheticDataset, out_dir: Path) -> Dict[str, Path]:
    """Write graph.tsv, templates.tsv and embeddings.tsv; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = dataset.graph

    graph_path = out_dir / "graph.tsv"
    with open(graph_path, "w", encoding="utf-8", newline="\n") as f:
        for t in g.triplets:
            fields = [g.entity_label(t.head), g.relation_label(t.relation), g.entity_label(t.tail)]
            if t.timestamp is not None:
                fields.append(t.timestamp.isoformat())
            f.write("\t".join(fields) + "\n")

    templates_path = out_dir / "templates.tsv"
    with open(templates_path, "w", encoding="utf-8", newline="\n") as f:
        for relation in g.relation_labels:
            f.write(f"{relation}\t{dataset.templates.get(relation).pattern}\n")

    embeddings_path = out_dir / "embeddings.tsv"
    labels = list(g.entity_labels)
    frame = pd.DataFrame(np.vstack([dataset.embeddings[label] for label in labels]))
    frame.insert(0, "label", labels)
    frame.to_csv(embeddings_path, sep="\t", header=False, index=False, float_format="%.17g")

    logger.info(f"Wrote synthetic dataset to {out_dir}")
    return {"graph": graph_path, "templates": templates_path, "embeddings": embeddings_path}


# -- planted retrieval corpus ------------------------------------------------

KNOWN_COMMUNITY = 0  # rate 0.9 under the default planted oracle
UNKNOWN_COMMUNITY = 1  # rate 0.1
LINK_RELATION = "linked_to"
LINK_TEMPLATE = "{SUB} is linked to {OBJ}."


class RetrievalCorpusConfig(BaseModel):
    questions_per_hop: int = Field(default=200, ge=1)
    hops: List[int] = Field(default_factory=lambda: [2, 3])
    decoys: int = Field(default=10, ge=1)  # well-known chains competing with each gold chain
    links: int = Field(default=2, ge=0)  # background links per chain entity
    background: SyntheticDatasetConfig = Field(
        default_factory=lambda: SyntheticDatasetConfig(signal=1.0)
    )
    seed: int = 0

    @model_validator(mode="after")
    def check_shape(self) -> "RetrievalCorpusConfig":
        if not self.hops or any(h not in (2, 3) for h in self.hops):
            raise ValueError(f"hops must be drawn from 2 and 3, got {self.hops}")
        if self.background.n_communities != 2:
            raise ValueError("the background graph needs exactly two communities")
        if self.links > self.background.n_entities // 2:
            raise ValueError("more background links than community members")
        return self


@dataclass
class RetrievalCorpus:
    dataset: SyntheticDataset
    questions: List[Question]


def generate_retrieval_corpus(cfg: RetrievalCorpusConfig) -> RetrievalCorpus:
    """
    Synthetic graph with questions whose gold paths cross poorly known entities.

    Every question gets its own start entity. One chain leaves it through the
    low-rate community (the gold path) and ``decoys`` chains leave it through
    the high-rate community. All chains of a question repeat the same
    relations, so edge-to-question similarity alone cannot single out the
    gold chain. Chain entities also link into the background graph of their
    own community.
    """
    background = generate_synthetic(cfg.background)
    rng = np.random.default_rng(cfg.seed)
    relations = list(RELATION_TEMPLATES) + [LINK_RELATION]
    link = len(relations) - 1
    triplets: List[Triplet] = list(background.graph.triplets)
    community: List[int] = background.community.tolist()
    members = [np.flatnonzero(background.community == c) for c in range(2)]

    def add_entity(c: int, links: int) -> int:
        entity = len(community)
        community.append(c)
        for target in rng.choice(members[c], size=links, replace=False):
            triplets.append(Triplet(entity, link, int(target)))
        return entity

    gold_paths: List[GoldPath] = []
    for n_hops in cfg.hops:
        for _ in range(cfg.questions_per_hop):
            chain_relations = rng.choice(len(RELATION_TEMPLATES), size=n_hops, replace=False)
            start = add_entity(UNKNOWN_COMMUNITY, 0)
            # chain 0 is the gold chain; chains are created in shuffled order
            for chain in rng.permutation(cfg.decoys + 1):
                c = UNKNOWN_COMMUNITY if chain == 0 else KNOWN_COMMUNITY
                entities, edges = [start], []
                for relation in chain_relations:
                    entity = add_entity(c, cfg.links)
                    triplets.append(Triplet(entities[-1], int(relation), entity))
                    edges.append(len(triplets) - 1)
                    entities.append(entity)
                if chain == 0:
                    gold_paths.append(GoldPath(tuple(edges), tuple(entities)))

    graph = KnowledgeGraph(_entity_labels(len(community)), relations, triplets)
    labels = np.asarray(community, dtype=np.int64)
    embeddings = _community_embeddings(rng, graph, labels, cfg.background)
    templates = TemplateTable.from_mapping({**RELATION_TEMPLATES, LINK_RELATION: LINK_TEMPLATE})
    questions = [
        Question(i, render_question(graph, gold, templates), gold) for i, gold in enumerate(gold_paths)
    ]
    logger.info(
        f"Generated retrieval corpus: {graph.num_entities} entities, {graph.num_triplets} triplets, "
        f"{len(questions)} questions with {cfg.decoys} decoy chains each"
    )
    return RetrievalCorpus(SyntheticDataset(graph, templates, embeddings, labels), questions)
