"""
Label and score tables passed between probing, aggregation and estimation
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional


@dataclass
class TripletLabelTable:
    """Binary knowledgeability label per triplet index."""
    labels: Dict[int, int] = field(default_factory=dict)
    sources: Dict[int, str] = field(default_factory=dict)  # llm / cache / synthetic

    def __post_init__(self):
        for index, value in self.labels.items():
            if value not in (0, 1):
                raise ValueError(f"label for triplet {index} must be 0 or 1, got {value!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, index: int) -> bool:
        return index in self.labels

    def get(self, index: int) -> Optional[int]:
        return self.labels.get(index)

    def subset(self, indices: Iterable[int]) -> "TripletLabelTable":
        keep = [i for i in indices if i in self.labels]
        return TripletLabelTable(
            labels={i: self.labels[i] for i in keep},
            sources={i: self.sources[i] for i in keep if i in self.sources},
        )

    def merged(self, other: "TripletLabelTable") -> "TripletLabelTable":
        labels = dict(self.labels)
        labels.update(other.labels)
        sources = dict(self.sources)
        sources.update(other.sources)
        return TripletLabelTable(labels=labels, sources=sources)

    def to_dict(self) -> Dict:
        return {
            "labels": {str(i): v for i, v in sorted(self.labels.items())},
            "sources": {str(i): s for i, s in sorted(self.sources.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TripletLabelTable":
        return cls(
            labels={int(i): int(v) for i, v in data.get("labels", {}).items()},
            sources={int(i): str(s) for i, s in data.get("sources", {}).items()},
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "TripletLabelTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EntityScoreTable:
    """
    Entity knowledgeability K(v).

    Observed tables (mean label over incident triplets) only hold entities
    with labeled support; predicted tables come from the estimator and
    carry support 0.
    """
    scores: Dict[int, float] = field(default_factory=dict)
    support: Dict[int, int] = field(default_factory=dict)
    predicted: bool = False

    def __len__(self) -> int:
        return len(self.scores)

    def __contains__(self, entity: int) -> bool:
        return entity in self.scores

    def get(self, entity: int, default: Optional[float] = None) -> Optional[float]:
        return self.scores.get(entity, default)

    def restricted(self, entities: Iterable[int]) -> "EntityScoreTable":
        keep = [v for v in entities if v in self.scores]
        return EntityScoreTable(
            scores={v: self.scores[v] for v in keep},
            support={v: self.support.get(v, 0) for v in keep},
            predicted=self.predicted,
        )

    def validate(self) -> None:
        for entity, score in self.scores.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score of entity {entity} outside [0, 1]: {score}")

    def to_dict(self) -> Dict:
        return {
            "predicted": self.predicted,
            "scores": {str(v): s for v, s in sorted(self.scores.items())},
            "support": {str(v): n for v, n in sorted(self.support.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EntityScoreTable":
        return cls(
            scores={int(v): float(s) for v, s in data.get("scores", {}).items()},
            support={int(v): int(n) for v, n in data.get("support", {}).items()},
            predicted=bool(data.get("predicted", False)),
        )
