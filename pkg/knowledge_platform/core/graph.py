"""
Knowledge graph data model, TSV loading and caching, and sparsification
"""
import hashlib
import logging
import math
import pickle
from dataclasses import dataclass
from datetime import date, datetime
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config import settings
from .errors import GraphError, GraphParseError
from .tables import EntityScoreTable

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["entity_id", "label", "k_score", "degree"]


class GraphFormat(str, Enum):
    TSV = "tsv"
    TSV_TEMPORAL = "tsv_temporal"


@dataclass(frozen=True)
class Entity:
    id: int
    label: str


@dataclass(frozen=True)
class Relation:
    id: int
    label: str


@dataclass(frozen=True)
class Triplet:
    """A relational fact; the timestamp is set only for temporal datasets."""
    head: int
    relation: int
    tail: int
    timestamp: Optional[date] = None

    @property
    def is_self_loop(self) -> bool:
        return self.head == self.tail

    def other(self, entity: int) -> int:
        """Endpoint opposite to ``entity``."""
        return self.tail if entity == self.head else self.head


def quota(fraction: float, total: int) -> int:
    """⌈fraction·total⌉ without floating artefacts (0.07·100 stays 7)."""
    return int(math.ceil(round(fraction * total, 9)))


class KnowledgeGraph:
    """
    Immutable knowledge graph with undirected neighbor and incidence indexes.

    Neighbor sets deduplicate parallel edges and list a self-looping entity
    once; incidence lists keep every triplet (a self-loop appears once).
    ``origin`` maps each triplet to its index in the graph it was sampled
    from, so labels survive sparsification.
    """

    def __init__(
        self,
        entity_labels: Sequence[str],
        relation_labels: Sequence[str],
        triplets: Sequence[Triplet],
        origin: Optional[Sequence[int]] = None,
    ):
        self._entity_labels: Tuple[str, ...] = tuple(entity_labels)
        self._relation_labels: Tuple[str, ...] = tuple(relation_labels)
        self._triplets: Tuple[Triplet, ...] = tuple(triplets)
        self._origin: Tuple[int, ...] = (
            tuple(origin) if origin is not None else tuple(range(len(self._triplets)))
        )
        if len(self._origin) != len(self._triplets):
            raise GraphError("origin must have one entry per triplet")

        self._entity_index: Dict[str, int] = {}
        for entity_id, label in enumerate(self._entity_labels):
            if label in self._entity_index:
                raise GraphError(f"duplicate entity label {label!r}")
            self._entity_index[label] = entity_id

        n_entities = len(self._entity_labels)
        n_relations = len(self._relation_labels)
        neighbors: List[set] = [set() for _ in range(n_entities)]
        incidence: List[List[int]] = [[] for _ in range(n_entities)]
        for index, triplet in enumerate(self._triplets):
            if not (0 <= triplet.head < n_entities and 0 <= triplet.tail < n_entities):
                raise GraphError(f"triplet {index} references an unknown entity")
            if not 0 <= triplet.relation < n_relations:
                raise GraphError(f"triplet {index} references an unknown relation")
            neighbors[triplet.head].add(triplet.tail)
            neighbors[triplet.tail].add(triplet.head)
            incidence[triplet.head].append(index)
            if not triplet.is_self_loop:
                incidence[triplet.tail].append(index)

        self._neighbor_index: Tuple[FrozenSet[int], ...] = tuple(frozenset(s) for s in neighbors)
        self._incidence_index: Tuple[Tuple[int, ...], ...] = tuple(tuple(i) for i in incidence)

    # -- sizes and labels -------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self._entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self._relation_labels)

    @property
    def num_triplets(self) -> int:
        return len(self._triplets)

    @property
    def entities(self) -> List[Entity]:
        return [Entity(i, label) for i, label in enumerate(self._entity_labels)]

    @property
    def relations(self) -> List[Relation]:
        return [Relation(i, label) for i, label in enumerate(self._relation_labels)]

    @property
    def entity_labels(self) -> Tuple[str, ...]:
        return self._entity_labels

    @property
    def relation_labels(self) -> Tuple[str, ...]:
        return self._relation_labels

    @property
    def triplets(self) -> Tuple[Triplet, ...]:
        return self._triplets

    @property
    def origin(self) -> Tuple[int, ...]:
        return self._origin

    @property
    def is_temporal(self) -> bool:
        return any(t.timestamp is not None for t in self._triplets)

    def entity_id(self, label: str) -> int:
        try:
            return self._entity_index[label]
        except KeyError:
            raise GraphError(f"unknown entity label {label!r}") from None

    def entity_label(self, entity: int) -> str:
        self._check_entity(entity)
        return self._entity_labels[entity]

    def relation_label(self, relation: int) -> str:
        if not 0 <= relation < self.num_relations:
            raise GraphError(f"invalid relation id {relation}")
        return self._relation_labels[relation]

    def triplet(self, index: int) -> Triplet:
        if not 0 <= index < self.num_triplets:
            raise GraphError(f"invalid triplet index {index}")
        return self._triplets[index]

    # -- neighborhood queries ---------------------------------------------

    def neighbors(self, entity: int) -> FrozenSet[int]:
        """N(v): entities adjacent to ``entity`` as head or tail."""
        self._check_entity(entity)
        return self._neighbor_index[entity]

    def incident_indices(self, entity: int) -> Tuple[int, ...]:
        """Indices of T(v) in load order."""
        self._check_entity(entity)
        return self._incidence_index[entity]

    def incident_triplets(self, entity: int) -> List[Triplet]:
        """T(v): triplets with ``entity`` as head or tail, in load order."""
        return [self._triplets[i] for i in self.incident_indices(entity)]

    def degree(self, entity: int) -> int:
        return len(self.neighbors(entity))

    def _check_entity(self, entity: int) -> None:
        if isinstance(entity, bool) or not isinstance(entity, (int, np.integer)):
            raise GraphError(f"entity id must be an integer, got {entity!r}")
        if not 0 <= entity < self.num_entities:
            raise GraphError(f"invalid entity id {entity}")

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
            f"triplets={self.num_triplets})"
        )


def neighbors(g: KnowledgeGraph, v: int) -> FrozenSet[int]:
    return g.neighbors(v)


def incident_triplets(g: KnowledgeGraph, v: int) -> List[Triplet]:
    return g.incident_triplets(v)


def parse_graph_lines(lines: Sequence[str], fmt: GraphFormat = GraphFormat.TSV) -> KnowledgeGraph:
    """
    Build a graph from TSV lines.

    Ids are assigned in first-appearance order; ``#`` lines and blank lines
    are skipped. Labels are kept verbatim (case-sensitive, no trimming).
    """
    fmt = GraphFormat(fmt)
    expected = 4 if fmt == GraphFormat.TSV_TEMPORAL else 3
    entity_ids: Dict[str, int] = {}
    relation_ids: Dict[str, int] = {}
    triplets: List[Triplet] = []

    for line_number, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != expected:
            raise GraphParseError(
                f"expected {expected} tab-separated fields, found {len(fields)}", line_number
            )
        head, relation, tail = fields[0], fields[1], fields[2]
        timestamp = None
        if fmt == GraphFormat.TSV_TEMPORAL:
            try:
                timestamp = datetime.strptime(fields[3].strip(), "%Y-%m-%d").date()
            except ValueError:
                raise GraphParseError(f"unparseable date {fields[3]!r}", line_number) from None

        head_id = entity_ids.setdefault(head, len(entity_ids))
        relation_id = relation_ids.setdefault(relation, len(relation_ids))
        tail_id = entity_ids.setdefault(tail, len(entity_ids))
        triplets.append(Triplet(head_id, relation_id, tail_id, timestamp))

    if not triplets:
        raise GraphParseError("graph file contains no triplets")
    return KnowledgeGraph(list(entity_ids), list(relation_ids), triplets)


class KnowledgeGraphLoader:
    """
    Loads knowledge graph TSV files.
    Parsed graphs are pickled under the processed-data directory, keyed by a
    digest of the file content and format.
    """

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else settings.PROCESSED_DATA_DIR

    def _get_cache_path(self, digest: str) -> Path:
        return self.cache_dir / f"graph-{digest}.pkl"

    def _load_from_cache(self, digest: str) -> Optional[KnowledgeGraph]:
        cache_path = self._get_cache_path(digest)
        if cache_path.exists():
            logger.info(f"Loading graph {digest[:12]} from cache")
            with open(cache_path, "rb") as f:
                return pickle.load(f)
        return None

    def _save_to_cache(self, graph: KnowledgeGraph, digest: str) -> None:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Saving graph {digest[:12]} to cache")
        with open(self._get_cache_path(digest), "wb") as f:
            pickle.dump(graph, f)

    def load(self, path: Path, fmt: GraphFormat = GraphFormat.TSV, use_cache: bool = False) -> KnowledgeGraph:
        path = Path(path)
        if not path.exists():
            raise GraphParseError(f"graph file not found: {path}")
        content = path.read_bytes()
        fmt = GraphFormat(fmt)
        digest = hashlib.sha256(content + fmt.value.encode("utf-8")).hexdigest()

        if use_cache:
            cached = self._load_from_cache(digest)
            if cached is not None:
                return cached

        logger.info(f"Loading {path.name} from disk")
        try:
            text = content.decode("utf-8")
        except UnicodeDecodeError as e:
            raise GraphParseError(f"{path.name} is not valid UTF-8: {e}") from None
        graph = parse_graph_lines(text.splitlines(), fmt)
        logger.info(
            f"Loaded {graph.num_triplets} triplets, {graph.num_entities} entities, "
            f"{graph.num_relations} relations from {path.name}"
        )

        if use_cache:
            self._save_to_cache(graph, digest)
        return graph

    def clear_cache(self) -> None:
        cache_files = list(self.cache_dir.glob("graph-*.pkl"))
        for file in cache_files:
            file.unlink()
        logger.info(f"Cleared {len(cache_files)} cache files")


def load_graph(path: Path, format: GraphFormat = GraphFormat.TSV, use_cache: bool = False) -> KnowledgeGraph:
    return graph_loader.load(path, format, use_cache=use_cache)


def sparsify(g: KnowledgeGraph, retain_fraction: float, seed: int) -> KnowledgeGraph:
    """
    Uniformly keep ⌈retain_fraction·|T|⌉ triplets (load order preserved).
    The entity id space is unchanged, so entities may become isolated.
    """
    if not 0.0 < retain_fraction <= 1.0:
        raise GraphError(f"retain_fraction must lie in (0, 1], got {retain_fraction}")
    n_keep = quota(retain_fraction, g.num_triplets)
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(g.num_triplets, size=n_keep, replace=False))
    triplets = [g.triplets[i] for i in kept]
    origin = [g.origin[i] for i in kept]
    logger.info(f"Sparsified {g.num_triplets} -> {n_keep} triplets (fraction={retain_fraction})")
    return KnowledgeGraph(g.entity_labels, g.relation_labels, triplets, origin=origin)


def export_scores_csv(g: KnowledgeGraph, scores: EntityScoreTable, path: Path) -> Path:
    """Write entity_id,label,k_score,degree for every scored entity."""
    rows = [
        {
            "entity_id": entity,
            "label": g.entity_label(entity),
            "k_score": float(score),
            "degree": g.degree(entity),
        }
        for entity, score in sorted(scores.scores.items())
    ]
    df = pd.DataFrame(rows, columns=SCORE_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def read_scores_csv(path: Path) -> pd.DataFrame:
    """Parse an exported score CSV (full float precision)."""
    return pd.read_csv(
        path,
        dtype={"entity_id": "int64", "label": str, "degree": "int64"},
        keep_default_na=False,
        float_precision="round_trip",
    )


def scores_from_frame(df: pd.DataFrame) -> EntityScoreTable:
    return EntityScoreTable(
        scores={int(row.entity_id): float(row.k_score) for row in df.itertuples()},
        support={int(row.entity_id): 0 for row in df.itertuples()},
    )


# Create singleton instance
graph_loader = KnowledgeGraphLoader()
