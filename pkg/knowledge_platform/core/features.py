"""
Entity feature construction from text embeddings
"""
import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
from sklearn.feature_extraction.text import HashingVectorizer

from .errors import DataError, EmptyEmbeddingError, MissingEmbeddingError, ShapeMismatchError
from .graph import KnowledgeGraph

logger = logging.getLogger(__name__)


class ProviderKind(str, Enum):
    HASHED = "hashed"
    FILE = "file"


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        ...

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        ...


class HashedProvider:
    """
    Signed character-trigram feature hashing into ``dim`` buckets.
    Deterministic across processes; needs no model download.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise DataError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self._vectorizer = HashingVectorizer(
            n_features=dim,
            analyzer="char_wb",
            ngram_range=(3, 3),
            alternate_sign=True,
            lowercase=True,
            norm=None,
        )

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return self._vectorizer.transform(list(texts)).toarray()

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


class FileProvider:
    """Precomputed vectors keyed by label (TSV: label, v1 .. v_dim)."""

    def __init__(self, vectors: Dict[str, np.ndarray]):
        if not vectors:
            raise DataError("embedding file holds no vectors")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise ShapeMismatchError(f"embedding vectors have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self._vectors = {label: np.asarray(v, dtype=float) for label, v in vectors.items()}

    @classmethod
    def from_mapping(cls, vectors: Dict[str, Sequence[float]]) -> "FileProvider":
        return cls({label: np.asarray(v, dtype=float) for label, v in vectors.items()})

    @classmethod
    def from_path(cls, path: Path) -> "FileProvider":
        path = Path(path)
        if not path.exists():
            raise DataError(f"embedding file not found: {path}")
        df = pd.read_csv(
            path,
            sep="\t",
            header=None,
            dtype={0: str},
            keep_default_na=False,
            quoting=csv.QUOTE_NONE,
            float_precision="round_trip",
        )
        if df.shape[1] < 2:
            raise DataError(f"{path.name}: expected label<TAB>v1 .. v_dim")
        values = df.iloc[:, 1:].to_numpy(dtype=float)
        logger.info(f"Loaded {len(df)} embeddings of dim {values.shape[1]} from {path.name}")
        return cls(dict(zip(df.iloc[:, 0], values)))

    def __contains__(self, label: str) -> bool:
        return label in self._vectors

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise MissingEmbeddingError([text]) from None

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in texts if t not in self._vectors]
        if missing:
            raise MissingEmbeddingError(missing)
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return np.vstack([self._vectors[t] for t in texts])


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (num_entities, dim), unit rows

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ShapeMismatchError(f"feature matrix must be 2-D, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise DataError("feature matrix contains non-finite values")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


def normalize_rows(vectors: np.ndarray, labels: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    empty = [labels[i] for i in np.flatnonzero(norms == 0.0)]
    if empty:
        raise EmptyEmbeddingError(
            f"zero embedding for {len(empty)} labels: {', '.join(repr(x) for x in empty[:10])}"
        )
    return vectors / norms[:, None]


def build_features(
    g: KnowledgeGraph,
    provider: EmbeddingProvider,
    dim: Optional[int] = None,
) -> FeatureMatrix:
    """One unit-norm row per entity, in entity id order."""
    if dim is not None and dim != provider.dim:
        raise ShapeMismatchError(f"provider dim {provider.dim} does not match requested dim {dim}")
    labels = list(g.entity_labels)
    vectors = np.asarray(provider.embed_many(labels), dtype=float)
    if vectors.shape != (len(labels), provider.dim):
        raise ShapeMismatchError(f"provider returned shape {vectors.shape}")
    features = FeatureMatrix(normalize_rows(vectors, labels))
    logger.info(f"Built {len(features)} x {features.dim} feature matrix")
    return features


def make_provider(kind: ProviderKind, dim: int = 256, path: Optional[Path] = None) -> EmbeddingProvider:
    if ProviderKind(kind) == ProviderKind.FILE:
        if path is None:
            raise DataError("file embedding provider needs an embeddings path")
        return FileProvider.from_path(path)
    return HashedProvider(dim)
