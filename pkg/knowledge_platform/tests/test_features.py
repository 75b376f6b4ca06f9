import numpy as np
import pytest

from knowledge_platform.core.errors import (
    DataError,
    EmptyEmbeddingError,
    MissingEmbeddingError,
    ShapeMismatchError,
)
from knowledge_platform.core.features import (
    FileProvider,
    HashedProvider,
    ProviderKind,
    build_features,
    make_provider,
)
from knowledge_platform.core.graph import KnowledgeGraph, Triplet

from .conftest import make_graph


def test_hashed_provider_is_deterministic():
    provider = HashedProvider(64)
    assert np.array_equal(provider.embed("Albert Einstein"), provider.embed("Albert Einstein"))
    assert np.array_equal(HashedProvider(64).embed("Ulm"), provider.embed("Ulm"))


def test_rows_are_unit_norm():
    g = make_graph([(0, 1), (1, 2), (2, 3)])
    features = build_features(g, HashedProvider(32))
    assert features.rows.shape == (4, 32)
    assert np.allclose(np.linalg.norm(features.rows, axis=1), 1.0, atol=1e-9)


def test_file_provider_matches_normalized_values():
    g = make_graph([(0, 1), (1, 2)])
    vectors = {"e0": [3.0, 4.0], "e1": [0.0, 2.0], "e2": [1.0, 1.0]}
    features = build_features(g, FileProvider.from_mapping(vectors))
    expected = np.array([[0.6, 0.8], [0.0, 1.0], [1 / np.sqrt(2), 1 / np.sqrt(2)]])
    assert np.allclose(features.rows, expected, atol=1e-12)


def test_file_provider_missing_labels_listed():
    g = make_graph([(0, 1), (1, 2)])
    with pytest.raises(MissingEmbeddingError) as exc_info:
        build_features(g, FileProvider.from_mapping({"e0": [1.0, 0.0]}))
    assert exc_info.value.labels == ["e1", "e2"]


def test_zero_vector_rejected():
    g = make_graph([(0, 1)])
    with pytest.raises(EmptyEmbeddingError):
        build_features(g, FileProvider.from_mapping({"e0": [1.0, 0.0], "e1": [0.0, 0.0]}))


def test_hashed_empty_label_rejected():
    with pytest.raises(EmptyEmbeddingError):
        build_features(KnowledgeGraph(["Ulm", ""], ["r"], [Triplet(0, 0, 1)]), HashedProvider(16))


def test_mixed_dimensions_rejected():
    with pytest.raises(ShapeMismatchError):
        FileProvider.from_mapping({"a": [1.0], "b": [1.0, 2.0]})


def test_requested_dim_must_match():
    g = make_graph([(0, 1)])
    with pytest.raises(ShapeMismatchError):
        build_features(g, HashedProvider(16), dim=32)


def test_file_provider_from_path(tmp_path):
    path = tmp_path / "embeddings.tsv"
    path.write_text("New York\t1.5\t0\nNA\t0\t2\n", encoding="utf-8")
    provider = FileProvider.from_path(path)
    assert provider.dim == 2
    assert "NA" in provider
    assert np.array_equal(provider.embed("New York"), np.array([1.5, 0.0]))


def test_make_provider(tmp_path):
    assert isinstance(make_provider(ProviderKind.HASHED, dim=8), HashedProvider)
    with pytest.raises(DataError):
        make_provider(ProviderKind.FILE)
    path = tmp_path / "e.tsv"
    path.write_text("x\t1\t2\t3\n", encoding="utf-8")
    assert make_provider(ProviderKind.FILE, path=path).dim == 3
