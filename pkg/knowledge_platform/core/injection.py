"""
Budgeted triplet selection for knowledge injection
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import BudgetShortfallError, DataError, MissingTemplateError, OracleError
from .graph import KnowledgeGraph, quota
from .homophily import entity_knowledgeability
from .oracle import DateMode, Labeler, ProbeFailure, TemplateTable, verbalize
from .tables import EntityScoreTable, TripletLabelTable

logger = logging.getLogger(__name__)


class QualityScope(str, Enum):
    FINETUNE = "finetune"  # anchors + selected
    SELECTED = "selected"


class Budget(BaseModel):
    total_triplets: int = Field(default=400, ge=1)
    anchor_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_quota(self) -> "Budget":
        if self.anchor_quota < 1:
            raise ValueError("anchor quota must be at least one triplet")
        return self

    @property
    def anchor_quota(self) -> int:
        return quota(self.anchor_fraction, self.total_triplets)


@dataclass
class AnchorSet:
    entities: List[int]
    triplets: List[int]
    labels: TripletLabelTable
    entity_scores: EntityScoreTable
    failures: List[ProbeFailure] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "entities": self.entities,
            "triplets": self.triplets,
            "labels": self.labels.to_dict(),
            "entity_scores": self.entity_scores.to_dict(),
            "failures": [vars(f) for f in self.failures],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AnchorSet":
        return cls(
            entities=[int(v) for v in data["entities"]],
            triplets=[int(i) for i in data["triplets"]],
            labels=TripletLabelTable.from_dict(data["labels"]),
            entity_scores=EntityScoreTable.from_dict(data["entity_scores"]),
            failures=[ProbeFailure(**f) for f in data.get("failures", [])],
        )


@dataclass
class SelectionPlan:
    anchors: AnchorSet
    selected: List[int]
    ranking: List[Tuple[int, float]]
    strategy: str  # gnn / mlp / random

    @property
    def finetune_triplets(self) -> List[int]:
        return list(self.anchors.triplets) + list(self.selected)

    def entities(self, g: KnowledgeGraph) -> Set[int]:
        used: Set[int] = set()
        for index in self.finetune_triplets:
            t = g.triplet(index)
            used.update((t.head, t.tail))
        return used

    def to_dict(self) -> Dict:
        return {
            "strategy": self.strategy,
            "total_triplets": len(self.anchors.triplets) + len(self.selected),
            "anchors": self.anchors.to_dict(),
            "selected": self.selected,
            "ranking": [[v, s] for v, s in self.ranking],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SelectionPlan":
        return cls(
            anchors=AnchorSet.from_dict(data["anchors"]),
            selected=[int(i) for i in data["selected"]],
            ranking=[(int(v), float(s)) for v, s in data["ranking"]],
            strategy=data["strategy"],
        )


def save_plan(plan: SelectionPlan, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_plan(path: Path) -> SelectionPlan:
    path = Path(path)
    if not path.exists():
        raise DataError(f"plan file not found: {path}")
    return SelectionPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))


@dataclass
class SelectionQualityReport:
    strategy: str
    scope: QualityScope
    n_selected: int
    n_unknown: int
    quality: float
    n_unparseable: int = 0
    n_failed: int = 0

    def to_dict(self) -> Dict:
        return {
            "strategy": self.strategy,
            "scope": QualityScope(self.scope).value,
            "n_selected": self.n_selected,
            "n_unknown": self.n_unknown,
            "quality": self.quality,
            "n_unparseable": self.n_unparseable,
            "n_failed": self.n_failed,
        }


def sample_anchors(g: KnowledgeGraph, budget: Budget, labeler: Labeler, seed: int) -> AnchorSet:
    """
    Entity-centric anchor sampling.

    Entities are visited in a seeded random order; each contributes its
    not-yet-taken incident triplets until the anchor quota is met. The last
    entity is clipped to a load-order prefix. Anchor scores are aggregated
    from the anchor labels and kept for the visited entities only.
    """
    target = budget.anchor_quota
    if g.num_triplets < target:
        raise BudgetShortfallError(
            f"graph has {g.num_triplets} triplets, anchor quota is {target}", g.num_triplets
        )
    order = np.random.default_rng(seed).permutation(g.num_entities)
    taken: Set[int] = set()
    triplets: List[int] = []
    entities: List[int] = []
    for v in order:
        fresh = [i for i in g.incident_indices(int(v)) if i not in taken]
        if not fresh:
            continue
        fresh = fresh[: target - len(triplets)]
        entities.append(int(v))
        triplets.extend(fresh)
        taken.update(fresh)
        if len(triplets) >= target:
            break

    result = labeler.label(g, triplets)
    scores = entity_knowledgeability(g, result.labels).restricted(entities)
    logger.info(
        f"Sampled {len(triplets)} anchor triplets over {len(entities)} entities "
        f"({len(result.errors)} probe failures)"
    )
    return AnchorSet(entities, triplets, result.labels, scores, list(result.errors))


def plan_selection(
    g: KnowledgeGraph,
    predictions: EntityScoreTable,
    anchors: AnchorSet,
    budget: Budget,
    strategy: str = "gnn",
) -> SelectionPlan:
    """
    Fill the rest of the budget from the least-known entities first.

    Entities are ranked by (predicted score, id) ascending; each contributes
    its non-anchor incident triplets, the last one clipped in load order.
    """
    remaining = budget.total_triplets - len(anchors.triplets)
    ranking = sorted(predictions.scores.items(), key=lambda item: (item[1], item[0]))
    excluded: Set[int] = set(anchors.triplets)
    selected: List[int] = []
    for v, _ in ranking:
        if len(selected) >= remaining:
            break
        fresh = [i for i in g.incident_indices(v) if i not in excluded]
        fresh = fresh[: remaining - len(selected)]
        selected.extend(fresh)
        excluded.update(fresh)

    if len(selected) < remaining:
        achievable = len(anchors.triplets) + len(selected)
        raise BudgetShortfallError(
            f"only {achievable} of {budget.total_triplets} budget triplets can be filled "
            f"(shortfall {remaining - len(selected)})",
            achievable,
        )
    logger.info(f"Planned {len(selected)} {strategy} triplets after {len(anchors.triplets)} anchors")
    return SelectionPlan(anchors, selected, [(v, float(s)) for v, s in ranking], strategy)


def random_plan(g: KnowledgeGraph, anchors: AnchorSet, budget: Budget, seed: int) -> SelectionPlan:
    """Uniform non-anchor triplets, sampled without replacement."""
    remaining = budget.total_triplets - len(anchors.triplets)
    anchor_set = set(anchors.triplets)
    candidates = [i for i in range(g.num_triplets) if i not in anchor_set]
    if len(candidates) < remaining:
        achievable = len(anchors.triplets) + len(candidates)
        raise BudgetShortfallError(
            f"only {achievable} of {budget.total_triplets} budget triplets can be filled", achievable
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=remaining, replace=False)
    selected = sorted(candidates[i] for i in chosen)
    return SelectionPlan(anchors, selected, [], "random")


def holdout_split(g: KnowledgeGraph, plan: SelectionPlan, fraction: float, seed: int) -> List[int]:
    """
    Sample ⌈fraction·|T|⌉ triplets sharing no entity with the plan, sorted
    by index.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    size = quota(fraction, g.num_triplets)
    used = plan.entities(g)
    candidates = [
        i for i, t in enumerate(g.triplets) if t.head not in used and t.tail not in used
    ]
    if len(candidates) < size:
        raise BudgetShortfallError(
            f"holdout needs {size} entity-disjoint triplets, only {len(candidates)} exist",
            len(candidates),
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=size, replace=False)
    holdout = sorted(candidates[i] for i in chosen)
    logger.info(f"Held out {len(holdout)} entity-disjoint triplets (fraction={fraction})")
    return holdout


def holdout_sweep(
    g: KnowledgeGraph, plan: SelectionPlan, fractions: Sequence[float], seed: int
) -> Dict[float, Dict]:
    """One holdout per fraction; shortfalls become error entries."""
    results: Dict[float, Dict] = {}
    for fraction in fractions:
        try:
            results[fraction] = {"triplets": holdout_split(g, plan, fraction, seed), "error": None}
        except BudgetShortfallError as e:
            logger.warning(f"Holdout fraction {fraction}: {e}")
            results[fraction] = {"triplets": [], "error": str(e), "achievable": e.achievable}
    return results


def selection_quality(
    g: KnowledgeGraph,
    plan: SelectionPlan,
    labeler: Labeler,
    scope: QualityScope = QualityScope.FINETUNE,
) -> SelectionQualityReport:
    """
    Fraction of the fine-tuning set the model does not know (label 0).
    Unparseable labels leave the denominator and are counted on their own.
    """
    scope = QualityScope(scope)
    indices = plan.finetune_triplets if scope == QualityScope.FINETUNE else list(plan.selected)
    if not indices:
        raise DataError("selection plan is empty")

    known = {i: plan.anchors.labels.get(i) for i in indices if i in plan.anchors.labels}
    to_probe = [i for i in indices if i not in known]
    failures: List[ProbeFailure] = []
    if to_probe:
        result = labeler.label(g, to_probe)
        known.update(result.labels.labels)
        failures = list(result.errors)
    # at most one failure per unlabeled triplet; a fresh failure replaces the anchor's
    missing = set(indices) - set(known) - {f.triplet_ref for f in failures}
    failures.extend(f for f in plan.anchors.failures if f.triplet_ref in missing)

    n_unparseable = sum(1 for f in failures if f.kind == "unparseable")
    n_failed = len(failures) - n_unparseable
    if not known:
        raise OracleError(f"no parseable labels among {len(indices)} selected triplets")
    n_unknown = sum(1 for value in known.values() if value == 0)
    report = SelectionQualityReport(
        strategy=plan.strategy,
        scope=scope,
        n_selected=len(known),
        n_unknown=n_unknown,
        quality=n_unknown / len(known),
        n_unparseable=n_unparseable,
        n_failed=n_failed,
    )
    logger.info(f"Selection quality ({plan.strategy}, {scope.value}): {report.quality:.4f}")
    return report


def export_finetune_dataset(
    g: KnowledgeGraph,
    plan: SelectionPlan,
    templates: TemplateTable,
    path: Path,
    date_mode: DateMode = DateMode.NONE,
) -> Path:
    """JSONL records of verbalized statements, anchors first then selected."""
    indices = plan.finetune_triplets
    if not indices:
        raise DataError("cannot export an empty plan")
    gaps = templates.missing([g.relation_label(g.triplet(i).relation) for i in indices])
    if gaps:
        raise MissingTemplateError(gaps[0])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    anchor_set = set(plan.anchors.triplets)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for index in indices:
            t = g.triplet(index)
            record = {
                "triplet_index": index,
                "role": "anchor" if index in anchor_set else "selected",
                "statement": verbalize(g, index, templates, date_mode).text,
                "head": g.entity_label(t.head),
                "relation": g.relation_label(t.relation),
                "tail": g.entity_label(t.tail),
                "label_if_known": plan.anchors.labels.get(index),
            }
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    logger.info(f"Exported {len(indices)} fine-tuning records to {path}")
    return path
