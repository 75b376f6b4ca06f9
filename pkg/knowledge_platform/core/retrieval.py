"""
Multi-hop question harness and knowledge-aware beam search over the graph
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ..config import settings
from .errors import ConfigError, DataError, GraphError, InsufficientPathsError
from .features import EmbeddingProvider, normalize_rows
from .graph import KnowledgeGraph
from .oracle import TemplateTable
from .tables import EntityScoreTable

logger = logging.getLogger(__name__)


class RetrievalMode(str, Enum):
    SEMANTIC = "semantic"
    KNOWLEDGE_AWARE = "knowledge_aware"


class RetrievalConfig(BaseModel):
    beam_width: Optional[int] = Field(default=settings.DEFAULT_BEAM_WIDTH, ge=1)  # None = exhaustive
    max_hops: int = 2
    alpha: float = Field(default=settings.DEFAULT_ALPHA, ge=0.0, le=1.0)
    mode: RetrievalMode = RetrievalMode.SEMANTIC
    raw_cosine: bool = False
    missing_knowledge: float = Field(default=settings.MISSING_KNOWLEDGE, ge=0.0, le=1.0)

    @field_validator("max_hops")
    @classmethod
    def check_hops(cls, value: int) -> int:
        if value not in (2, 3):
            raise ValueError(f"max_hops must be 2 or 3, got {value}")
        return value


@dataclass(frozen=True)
class GoldPath:
    """Triplet indices of the hops and the entity sequence they walk."""
    edges: Tuple[int, ...]
    entities: Tuple[int, ...]

    @property
    def start(self) -> int:
        return self.entities[0]

    @property
    def answer(self) -> int:
        return self.entities[-1]

    @property
    def n_hops(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class Question:
    id: int
    text: str
    gold: GoldPath


@dataclass(frozen=True)
class PathCandidate:
    edges: Tuple[int, ...]
    entities: Tuple[int, ...]
    score: float
    per_hop_scores: Tuple[float, ...]

    @property
    def terminal(self) -> int:
        return self.entities[-1]


@dataclass
class RetrievalReport:
    variant: str
    n_questions: int
    gold_path_recovery: float
    answer_hit: float
    per_hop_breakdown: Dict[str, Dict] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "n_questions": self.n_questions,
            "gold_path_recovery": self.gold_path_recovery,
            "answer_hit": self.answer_hit,
            "per_hop_breakdown": self.per_hop_breakdown,
        }


# -- semantic scoring --------------------------------------------------------

def _cosine_to_score(cosine: float, raw: bool) -> float:
    if raw:
        return float(np.clip(cosine, -1.0, 1.0))
    return float(np.clip((1.0 + cosine) / 2.0, 0.0, 1.0))


def text_similarity(provider: EmbeddingProvider, a: str, b: str, raw: bool = False) -> float:
    """(1 + cos) / 2 between the two texts' embeddings, or raw cosine."""
    vectors = normalize_rows(np.asarray(provider.embed_many([a, b]), dtype=float), [a, b])
    return _cosine_to_score(float(vectors[0] @ vectors[1]), raw)


class SemanticScorer:
    """
    S(r || d, q): similarity of "relation tail" to the question text.
    Embeddings are cached per string.
    """

    def __init__(self, g: KnowledgeGraph, provider: EmbeddingProvider, raw_cosine: bool = False):
        self.g = g
        self.provider = provider
        self.raw_cosine = raw_cosine
        self._cache: Dict[str, np.ndarray] = {}

    def _unit(self, text: str) -> np.ndarray:
        vector = self._cache.get(text)
        if vector is None:
            vector = normalize_rows(np.asarray(self.provider.embed_many([text]), dtype=float), [text])[0]
            self._cache[text] = vector
        return vector

    def edge_text(self, relation: int, tail: int) -> str:
        return f"{self.g.relation_label(relation)} {self.g.entity_label(tail)}"

    def score(self, relation: int, tail: int, question_text: str) -> float:
        cosine = float(self._unit(self.edge_text(relation, tail)) @ self._unit(question_text))
        return _cosine_to_score(cosine, self.raw_cosine)


def semantic_score(
    provider: EmbeddingProvider,
    g: KnowledgeGraph,
    relation: int,
    tail: int,
    q: Question,
) -> float:
    return SemanticScorer(g, provider).score(relation, tail, q.text)


# -- search -------------------------------------------------------------------

def _rank_key(candidate: PathCandidate):
    return (-candidate.score, candidate.edges)


def beam_search(
    g: KnowledgeGraph,
    start: int,
    q: Question,
    cfg: RetrievalConfig,
    k_scores: Optional[EntityScoreTable] = None,
    scorer: Optional[SemanticScorer] = None,
    provider: Optional[EmbeddingProvider] = None,
) -> List[PathCandidate]:
    """
    Level-synchronous beam search from ``start``.

    Every beam path extends along each incident triplet of its frontier
    entity that does not revisit a path entity. The hop score is S, times
    (1 - alpha * K(u)) in knowledge-aware mode, and path scores multiply.
    Each level keeps the top ``beam_width`` paths ordered by
    (-score, edge indices); a path that cannot extend is carried forward.
    """
    mode = RetrievalMode(cfg.mode)
    if mode == RetrievalMode.KNOWLEDGE_AWARE and k_scores is None:
        raise ConfigError("knowledge-aware search needs entity knowledgeability scores")
    if scorer is None:
        if provider is None:
            raise ConfigError("beam search needs a semantic scorer or an embedding provider")
        scorer = SemanticScorer(g, provider, cfg.raw_cosine)
    if not g.neighbors(start) - {start}:
        return []

    beam = [PathCandidate((), (start,), 1.0, ())]
    for _ in range(cfg.max_hops):
        expanded: List[PathCandidate] = []
        for path in beam:
            frontier = path.entities[-1]
            extended = False
            for index in g.incident_indices(frontier):
                t = g.triplets[index]
                nxt = t.other(frontier)
                if nxt in path.entities:
                    continue
                hop = scorer.score(t.relation, nxt, q.text)
                if mode == RetrievalMode.KNOWLEDGE_AWARE:
                    k = k_scores.get(nxt, cfg.missing_knowledge)
                    hop = hop * (1.0 - cfg.alpha * k)
                expanded.append(
                    PathCandidate(
                        path.edges + (index,),
                        path.entities + (nxt,),
                        path.score * hop,
                        path.per_hop_scores + (hop,),
                    )
                )
                extended = True
            if not extended:
                expanded.append(path)
        expanded.sort(key=_rank_key)
        beam = expanded if cfg.beam_width is None else expanded[: cfg.beam_width]
    return beam


class EntityLinker:
    """Longest entity label found in the text; otherwise nearest label by cosine."""

    def __init__(self, g: KnowledgeGraph, provider: EmbeddingProvider):
        if g.num_entities == 0:
            raise GraphError("cannot link entities in an empty graph")
        self.g = g
        self.provider = provider
        self._label_vectors: Optional[np.ndarray] = None

    def _vectors(self) -> np.ndarray:
        if self._label_vectors is None:
            labels = list(self.g.entity_labels)
            raw = np.asarray(self.provider.embed_many(labels), dtype=float)
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            self._label_vectors = np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)
        return self._label_vectors

    def link(self, text: str) -> int:
        best: Optional[int] = None
        for entity, label in enumerate(self.g.entity_labels):
            if label and label in text:
                if best is None or len(label) > len(self.g.entity_labels[best]):
                    best = entity
        if best is not None:
            return best
        query = normalize_rows(np.asarray(self.provider.embed_many([text]), dtype=float), [text])[0]
        return int(np.argmax(self._vectors() @ query))


def link_entity(q: Question, g: KnowledgeGraph, provider: EmbeddingProvider) -> int:
    return EntityLinker(g, provider).link(q.text)


# -- question harness ---------------------------------------------------------

def render_question(g: KnowledgeGraph, gold: GoldPath, templates: TemplateTable) -> str:
    """
    "Given that <start> ... #1 and #1 ... #2, what is #2?" with each clause
    filled from the relation template in the triplet's own direction.
    """
    names = [g.entity_label(gold.start)] + [f"#{i}" for i in range(1, gold.n_hops + 1)]
    clauses = []
    for hop, index in enumerate(gold.edges):
        t = g.triplet(index)
        here, there = names[hop], names[hop + 1]
        subject, obj = (here, there) if t.head == gold.entities[hop] else (there, here)
        clause = templates.get(g.relation_label(t.relation)).fill(subject, obj)
        clauses.append(clause.rstrip().rstrip("."))
    return f"Given that {' and '.join(clauses)}, what is #{gold.n_hops}?"


def generate_questions(
    g: KnowledgeGraph,
    templates: TemplateTable,
    n_per_hop: int,
    seed: int,
    hops: Sequence[int] = (2, 3),
    max_knowledge: Optional[float] = None,
    k_scores: Optional[EntityScoreTable] = None,
    max_attempts_per_question: int = 200,
) -> List[Question]:
    """
    Sample simple paths by random walks with rejection.

    Walks revisiting an entity or repeating an earlier edge sequence are
    rejected. With ``max_knowledge`` every non-start entity on the path must
    have K at most that value (missing K counts as 0.5).
    """
    if n_per_hop < 1:
        raise DataError(f"n_per_hop must be positive, got {n_per_hop}")
    if max_knowledge is not None and k_scores is None:
        raise ConfigError("max_knowledge filter needs entity knowledgeability scores")
    if g.num_entities == 0 or g.num_triplets == 0:
        raise InsufficientPathsError("graph has no triplets to walk")

    questions: List[Question] = []
    shortfalls: Dict[int, int] = {}
    for h in hops:
        if h not in (2, 3):
            raise ConfigError(f"question hops must be 2 or 3, got {h}")
        rng = np.random.default_rng([seed, h])
        seen = set()
        found = 0
        attempts = 0
        while found < n_per_hop and attempts < n_per_hop * max_attempts_per_question:
            attempts += 1
            current = int(rng.integers(g.num_entities))
            entities = [current]
            edges: List[int] = []
            for _ in range(h):
                incident = g.incident_indices(current)
                if not incident:
                    break
                index = incident[int(rng.integers(len(incident)))]
                current = g.triplets[index].other(current)
                if current in entities:
                    break
                edges.append(index)
                entities.append(current)
            if len(edges) != h or tuple(edges) in seen:
                continue
            if max_knowledge is not None and any(
                k_scores.get(v, settings.MISSING_KNOWLEDGE) > max_knowledge for v in entities[1:]
            ):
                continue
            seen.add(tuple(edges))
            gold = GoldPath(tuple(edges), tuple(entities))
            questions.append(Question(len(questions), render_question(g, gold, templates), gold))
            found += 1
        if found < n_per_hop:
            shortfalls[h] = found

    if shortfalls:
        detail = ", ".join(f"{h}-hop: {n}/{n_per_hop}" for h, n in sorted(shortfalls.items()))
        raise InsufficientPathsError(f"not enough simple paths ({detail})")
    logger.info(f"Generated {len(questions)} questions over hops {list(hops)}")
    return questions


def question_entities(questions: Iterable[Question]) -> List[int]:
    """Entities on any gold path (kept out of estimator training)."""
    return sorted({v for q in questions for v in q.gold.entities})


def write_questions(questions: Sequence[Question], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in questions:
            record = {
                "id": q.id,
                "text": q.text,
                "hops": q.gold.n_hops,
                "start": q.gold.start,
                "answer": q.gold.answer,
                "gold_edges": list(q.gold.edges),
                "gold_entities": list(q.gold.entities),
            }
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_questions(path: Path) -> List[Question]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"question file not found: {path}")
    questions = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            gold = GoldPath(tuple(record["gold_edges"]), tuple(record["gold_entities"]))
            questions.append(Question(int(record["id"]), record["text"], gold))
    return questions


# -- benchmark -----------------------------------------------------------------

def retrieve_all(
    g: KnowledgeGraph,
    questions: Sequence[Question],
    cfg: RetrievalConfig,
    scorer: SemanticScorer,
    k_scores: Optional[EntityScoreTable] = None,
    use_gold_start: bool = True,
    linker: Optional[EntityLinker] = None,
) -> List[List[PathCandidate]]:
    """Search every question with its own hop count as the depth limit."""
    if not use_gold_start and linker is None:
        linker = EntityLinker(g, scorer.provider)
    results = []
    for q in questions:
        start = q.gold.start if use_gold_start else linker.link(q.text)
        per_question = cfg.model_copy(update={"max_hops": q.gold.n_hops})
        results.append(beam_search(g, start, q, per_question, k_scores=k_scores, scorer=scorer))
    return results


def evaluate_retrieval(
    results: Sequence[Sequence[PathCandidate]],
    questions: Sequence[Question],
    variant: str = "semantic",
) -> RetrievalReport:
    """Gold-path recovery and answer hit rate, overall and per hop count."""
    if len(results) != len(questions):
        raise DataError(f"{len(results)} result lists for {len(questions)} questions")
    per_hop: Dict[int, List[Tuple[bool, bool]]] = {}
    outcomes: List[Tuple[bool, bool]] = []
    for candidates, q in zip(results, questions):
        recovered = any(c.edges == q.gold.edges for c in candidates)
        hit = any(c.terminal == q.gold.answer for c in candidates)
        outcomes.append((recovered, hit))
        per_hop.setdefault(q.gold.n_hops, []).append((recovered, hit))

    def rates(rows: List[Tuple[bool, bool]]) -> Tuple[float, float]:
        if not rows:
            return 0.0, 0.0
        return (
            sum(r for r, _ in rows) / len(rows),
            sum(h for _, h in rows) / len(rows),
        )

    recovery, answer_hit = rates(outcomes)
    breakdown = {}
    for hops, rows in sorted(per_hop.items()):
        hop_recovery, hop_hit = rates(rows)
        breakdown[f"{hops}-hop"] = {
            "n_questions": len(rows),
            "gold_path_recovery": hop_recovery,
            "answer_hit": hop_hit,
        }
    logger.info(
        f"Retrieval {variant}: recovery={recovery:.4f} answer_hit={answer_hit:.4f} "
        f"over {len(questions)} questions"
    )
    return RetrievalReport(variant, len(questions), recovery, answer_hit, breakdown)
