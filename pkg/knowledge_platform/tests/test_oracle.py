import json

import httpx
import pytest

from knowledge_platform.core.errors import (
    DataError,
    MissingTemplateError,
    OracleError,
    OracleTransportError,
    UnparseableLabelError,
)
from knowledge_platform.core.graph import KnowledgeGraph, Triplet
from knowledge_platform.core.oracle import (
    SYSTEM_MESSAGE,
    DateMode,
    LabelCache,
    LabelSource,
    LLMLabeler,
    OracleClient,
    OracleConfig,
    RelationTemplate,
    Statement,
    TemplateTable,
    cache_key,
    load_templates,
    parse_label,
    probe_batch,
    probe_triplet,
    verbalize,
)


def oracle_config(**overrides) -> OracleConfig:
    values = {
        "endpoint": "http://oracle.test/v1/chat/completions",
        "api_key": "",
        "model_name": "test-model",
        "max_retries": 2,
        "parallelism": 4,
        "backoff_seconds": 0.0,
        "cache_path": None,
    }
    values.update(overrides)
    return OracleConfig(**values)


def completion(content: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


class RecordingBackend:
    """MockTransport handler answering from a function of the statement text."""

    def __init__(self, answer):
        self.answer = answer
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append(body)
        statement = body["messages"][-1]["content"]
        return self.answer(statement, len(self.requests))

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


def chain_graph(n: int) -> KnowledgeGraph:
    return KnowledgeGraph(
        [f"Person {i}" for i in range(n + 1)],
        ["son_of"],
        [Triplet(i, 0, i + 1) for i in range(n)],
    )


@pytest.fixture
def son_of() -> TemplateTable:
    return TemplateTable.from_mapping({"son_of": "{SUB} is the son of {OBJ}."})


# -- verbalization -------------------------------------------------------

def test_verbalize_fills_template(family_graph, family_templates):
    assert verbalize(family_graph, 0, family_templates).text == "X is the son of Y."


def test_verbalize_appends_date(family_graph, family_templates):
    statement = verbalize(family_graph, 1, family_templates, DateMode.APPEND_DATE)
    assert statement.text == "Trump made a visit to China on 2017-11-08."
    assert statement.text.endswith("on 2017-11-08.")
    assert statement.temporal


def test_verbalize_missing_timestamp(family_graph, family_templates):
    with pytest.raises(DataError):
        verbalize(family_graph, 0, family_templates, DateMode.APPEND_DATE)


def test_verbalize_missing_template(family_graph):
    templates = TemplateTable.from_mapping({"visit": "{SUB} made a visit to {OBJ}."})
    with pytest.raises(MissingTemplateError) as exc_info:
        verbalize(family_graph, 0, templates)
    assert exc_info.value.relation == "son_of"


def test_template_needs_both_placeholders():
    with pytest.raises(DataError):
        RelationTemplate("bad", "{SUB} is something.")


def test_template_values_are_not_reinterpreted():
    template = RelationTemplate("r", "{SUB} likes {OBJ}.")
    assert template.fill("{OBJ}", "tea") == "{OBJ} likes tea."


def test_load_templates(tmp_path):
    path = tmp_path / "templates.tsv"
    path.write_text("# relation\tpattern\nson_of\t{SUB} is the son of {OBJ}.\n", encoding="utf-8")
    templates = load_templates(path)
    assert len(templates) == 1
    assert "son_of" in templates
    assert templates.missing(["son_of", "visit"]) == ["visit"]


# -- label parsing -------------------------------------------------------

@pytest.mark.parametrize(
    "response, expected",
    [
        ("True", 1),
        (" false.", 0),
        ("TRUE, this is correct", 1),
        ("The statement is false.", 0),
        ("False\nalthough it could be true", 0),
        ("I am not sure", None),
        ("", None),
        ("untrue", None),
    ],
)
def test_parse_label(response, expected):
    assert parse_label(response) == expected


def test_cache_key_depends_on_model():
    assert cache_key("m1", "s") != cache_key("m2", "s")
    assert cache_key("m1", "s") == cache_key("m1", "s")


# -- single probe --------------------------------------------------------

@pytest.mark.asyncio
async def test_probe_sends_system_message():
    backend = RecordingBackend(lambda s, n: completion("True"))
    label = await probe_triplet(
        Statement("X is the son of Y.", 0), oracle_config(), LabelCache(), backend.transport
    )
    assert label.value == 1
    assert label.source == LabelSource.LLM
    messages = backend.requests[0]["messages"]
    assert messages[0] == {"role": "system", "content": SYSTEM_MESSAGE}
    assert messages[1]["content"] == "X is the son of Y."
    assert backend.requests[0]["temperature"] == 0


@pytest.mark.asyncio
async def test_probe_reasks_then_gives_up():
    backend = RecordingBackend(lambda s, n: completion("I am not sure"))
    with pytest.raises(UnparseableLabelError):
        await probe_triplet(Statement("X is the son of Y.", 0), oracle_config(), LabelCache(), backend.transport)
    assert len(backend.requests) == 3


@pytest.mark.asyncio
async def test_probe_recovers_on_reask():
    backend = RecordingBackend(lambda s, n: completion("hmm" if n == 1 else "false"))
    label = await probe_triplet(Statement("s", 0), oracle_config(), LabelCache(), backend.transport)
    assert label.value == 0
    assert len(backend.requests) == 2


@pytest.mark.asyncio
async def test_server_errors_are_retried():
    backend = RecordingBackend(lambda s, n: httpx.Response(503) if n < 3 else completion("True"))
    label = await probe_triplet(Statement("s", 0), oracle_config(), LabelCache(), backend.transport)
    assert label.value == 1
    assert len(backend.requests) == 3


@pytest.mark.asyncio
async def test_rate_limit_exhausts_retries():
    backend = RecordingBackend(lambda s, n: httpx.Response(429, text="slow down"))
    with pytest.raises(OracleTransportError) as exc_info:
        await probe_triplet(Statement("s", 0), oracle_config(max_retries=1), LabelCache(), backend.transport)
    assert exc_info.value.status_code == 429
    assert len(backend.requests) == 2


@pytest.mark.asyncio
async def test_client_errors_are_not_retried():
    backend = RecordingBackend(lambda s, n: httpx.Response(401, text="bad key"))
    with pytest.raises(OracleTransportError):
        await probe_triplet(Statement("s", 0), oracle_config(), LabelCache(), backend.transport)
    assert len(backend.requests) == 1


@pytest.mark.asyncio
async def test_transport_failure_is_retried():
    def answer(statement, n):
        if n == 1:
            raise httpx.ConnectError("connection refused")
        return completion("true")

    backend = RecordingBackend(answer)
    label = await probe_triplet(Statement("s", 0), oracle_config(), LabelCache(), backend.transport)
    assert label.value == 1


@pytest.mark.asyncio
async def test_authorization_header():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request.headers.get("Authorization"))
        return completion("True")

    await probe_triplet(
        Statement("s", 0), oracle_config(api_key="secret"), LabelCache(), httpx.MockTransport(handler)
    )
    assert seen == ["Bearer secret"]


def test_client_requires_endpoint():
    with pytest.raises(OracleError):
        OracleClient(oracle_config(endpoint=""))


# -- batches and cache ---------------------------------------------------

@pytest.mark.asyncio
async def test_batch_labels_every_triplet(son_of):
    g = chain_graph(6)
    backend = RecordingBackend(lambda s, n: completion("True" if s.startswith("Person 0") else "False"))
    result = await probe_batch(g, range(6), son_of, oracle_config(), cache=LabelCache(), transport=backend.transport)
    assert result.labels.labels == {0: 1, 1: 0, 2: 0, 3: 0, 4: 0, 5: 0}
    assert result.errors == []
    assert result.requests_sent == 6


@pytest.mark.asyncio
async def test_fully_cached_batch_sends_nothing(son_of):
    g = chain_graph(4)
    cfg = oracle_config()
    cache = LabelCache()
    for ref in range(4):
        cache.put(cache_key(cfg.model_name, verbalize(g, ref, son_of).text), cfg.model_name, 1)

    backend = RecordingBackend(lambda s, n: completion("False"))
    result = await probe_batch(g, range(4), son_of, cfg, cache=cache, transport=backend.transport)
    assert backend.requests == []
    assert result.requests_sent == 0
    assert set(result.labels.sources.values()) == {LabelSource.CACHE.value}
    assert result.labels.labels == {0: 1, 1: 1, 2: 1, 3: 1}


@pytest.mark.asyncio
async def test_duplicate_statements_share_a_request(son_of):
    g = KnowledgeGraph(["X", "Y"], ["son_of", "child_of"], [Triplet(0, 0, 1), Triplet(0, 1, 1), Triplet(0, 0, 1)])
    templates = TemplateTable.from_mapping({
        "son_of": "{SUB} is the son of {OBJ}.",
        "child_of": "{SUB} is the son of {OBJ}.",
    })
    backend = RecordingBackend(lambda s, n: completion("True"))
    result = await probe_batch(g, [0, 1, 2], templates, oracle_config(), cache=LabelCache(), transport=backend.transport)
    assert len(backend.requests) == 1
    assert result.labels.labels == {0: 1, 1: 1, 2: 1}


@pytest.mark.asyncio
async def test_partial_failure(son_of):
    g = chain_graph(10)
    backend = RecordingBackend(
        lambda s, n: completion("no idea" if s.startswith("Person 4 ") else "True")
    )
    result = await probe_batch(g, range(10), son_of, oracle_config(), cache=LabelCache(), transport=backend.transport)
    assert len(result.labels) == 9
    assert len(result.errors) == 1
    assert result.errors[0].triplet_ref == 4
    assert result.errors[0].kind == "unparseable"
    assert result.summary()["failures_by_kind"] == {"unparseable": 1}


@pytest.mark.asyncio
async def test_cache_persists_across_runs(tmp_path, son_of):
    g = chain_graph(3)
    path = tmp_path / "labels.jsonl"
    backend = RecordingBackend(lambda s, n: completion("True"))
    await probe_batch(g, range(3), son_of, oracle_config(), cache=LabelCache(path), transport=backend.transport)
    assert len(path.read_text().splitlines()) == 3

    reopened = LabelCache(path)
    assert len(reopened) == 3
    second = RecordingBackend(lambda s, n: completion("False"))
    result = await probe_batch(g, range(3), son_of, oracle_config(), cache=reopened, transport=second.transport)
    assert second.requests == []
    assert result.labels.labels == {0: 1, 1: 1, 2: 1}


def test_cache_skips_torn_line(tmp_path):
    path = tmp_path / "labels.jsonl"
    path.write_text('{"key": "k1", "label": 1, "model": "m"}\n{"key": "k2", "lab', encoding="utf-8")
    cache = LabelCache(path)
    assert cache.get("k1") == 1
    assert cache.get("k2") is None


def test_llm_labeler_runs_synchronously(son_of):
    g = chain_graph(3)
    backend = RecordingBackend(lambda s, n: completion("False"))
    labeler = LLMLabeler(oracle_config(), son_of, cache=LabelCache(), transport=backend.transport)
    result = labeler.label(g, [0, 2])
    assert labeler.kind == "llm"
    assert result.labels.labels == {0: 0, 2: 0}
