"""
Triplet verbalization and LLM knowledge probing with a persistent label cache
"""
import asyncio
import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence

import httpx
from pydantic import BaseModel, Field

from ..config import settings
from .errors import (
    DataError,
    MissingTemplateError,
    OracleError,
    OracleTransportError,
    UnparseableLabelError,
)
from .graph import KnowledgeGraph
from .tables import TripletLabelTable

logger = logging.getLogger(__name__)

SYSTEM_MESSAGE = "Evaluate the statement based on your knowledge and respond with True or False."

_LABEL_TOKEN = re.compile(r"\b(true|false)\b", re.IGNORECASE)
_PLACEHOLDER = re.compile(r"\{(SUB|OBJ)\}")


class DateMode(str, Enum):
    NONE = "none"
    APPEND_DATE = "append_date"


class LabelSource(str, Enum):
    LLM = "llm"
    CACHE = "cache"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class RelationTemplate:
    """Relation -> pattern such as '{SUB} is the son of {OBJ}.'"""
    relation: str
    pattern: str

    def __post_init__(self):
        for placeholder in ("{SUB}", "{OBJ}"):
            if self.pattern.count(placeholder) != 1:
                raise DataError(
                    f"template for '{self.relation}' must contain {placeholder} exactly once"
                )

    def fill(self, subject: str, obj: str) -> str:
        values = {"SUB": subject, "OBJ": obj}
        return _PLACEHOLDER.sub(lambda m: values[m.group(1)], self.pattern)


class TemplateTable:
    """Templates keyed by relation label."""

    def __init__(self, templates: Sequence[RelationTemplate] = ()):
        self._templates: Dict[str, RelationTemplate] = {t.relation: t for t in templates}

    def __len__(self) -> int:
        return len(self._templates)

    def __contains__(self, relation: str) -> bool:
        return relation in self._templates

    def get(self, relation: str) -> RelationTemplate:
        try:
            return self._templates[relation]
        except KeyError:
            raise MissingTemplateError(relation) from None

    def missing(self, relations: Sequence[str]) -> List[str]:
        return sorted({r for r in relations if r not in self._templates})

    @classmethod
    def from_mapping(cls, patterns: Dict[str, str]) -> "TemplateTable":
        return cls([RelationTemplate(r, p) for r, p in patterns.items()])


def load_templates(path: Path) -> TemplateTable:
    """Read a relation<TAB>pattern file."""
    templates = []
    text = Path(path).read_text(encoding="utf-8")
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{Path(path).name} line {line_number}: expected relation<TAB>pattern")
        templates.append(RelationTemplate(parts[0], parts[1]))
    logger.info(f"Loaded {len(templates)} relation templates from {Path(path).name}")
    return TemplateTable(templates)


@dataclass(frozen=True)
class Statement:
    text: str
    triplet_ref: int
    temporal: bool = False


@dataclass(frozen=True)
class TripletLabel:
    triplet_ref: int
    value: int
    source: LabelSource


def verbalize(
    g: KnowledgeGraph,
    triplet_ref: int,
    templates: TemplateTable,
    date_mode: DateMode = DateMode.NONE,
) -> Statement:
    """Fill the relation template with head as {SUB} and tail as {OBJ}."""
    triplet = g.triplet(triplet_ref)
    template = templates.get(g.relation_label(triplet.relation))
    text = template.fill(g.entity_label(triplet.head), g.entity_label(triplet.tail))
    temporal = DateMode(date_mode) == DateMode.APPEND_DATE
    if temporal:
        if triplet.timestamp is None:
            raise DataError(f"triplet {triplet_ref} has no timestamp for append_date")
        text = f"{text.rstrip().rstrip('.')} on {triplet.timestamp.isoformat()}."
    if not text.strip():
        raise DataError(f"empty statement for triplet {triplet_ref}")
    return Statement(text=text, triplet_ref=triplet_ref, temporal=temporal)


def parse_label(response: str) -> Optional[int]:
    """First true/false token on the first line, case-insensitive."""
    lines = response.strip().splitlines()
    if not lines:
        return None
    match = _LABEL_TOKEN.search(lines[0])
    if match is None:
        return None
    return 1 if match.group(1).lower() == "true" else 0


def cache_key(model_name: str, statement_text: str) -> str:
    return hashlib.sha256(f"{model_name}\x1f{statement_text}".encode("utf-8")).hexdigest()


class OracleConfig(BaseModel):
    """LLM backend settings; defaults come from the environment."""
    endpoint: str = Field(default_factory=lambda: settings.ORACLE_ENDPOINT)
    api_key: str = Field(default_factory=lambda: settings.ORACLE_API_KEY, repr=False)
    model_name: str = Field(default_factory=lambda: settings.ORACLE_MODEL)
    system_message: str = SYSTEM_MESSAGE
    max_retries: int = Field(default_factory=lambda: settings.ORACLE_MAX_RETRIES, ge=0)
    parallelism: int = Field(default_factory=lambda: settings.ORACLE_PARALLELISM, ge=1)
    timeout: float = Field(default_factory=lambda: settings.ORACLE_TIMEOUT, gt=0)
    backoff_seconds: float = Field(default_factory=lambda: settings.ORACLE_BACKOFF_SECONDS, ge=0)
    cache_path: Optional[Path] = Field(default_factory=lambda: settings.ORACLE_CACHE_PATH)


class LabelCache:
    """
    Append-only JSONL cache of (key, model, label, timestamp) records.
    Reloaded on open; appends are serialized by a lock. Identical keys carry
    identical labels, so the last record wins.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self._labels: Dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    self._labels[record["key"]] = int(record["label"])
                except (ValueError, KeyError):
                    # a torn final line after a crash
                    logger.warning(f"Skipping corrupt cache record at {self.path.name}:{line_number}")
        logger.info(f"Loaded {len(self._labels)} cached labels from {self.path}")

    def __len__(self) -> int:
        return len(self._labels)

    def get(self, key: str) -> Optional[int]:
        return self._labels.get(key)

    def put(self, key: str, model_name: str, label: int) -> None:
        with self._lock:
            self._labels[key] = label
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            record = {
                "key": key,
                "model": model_name,
                "label": label,
                "timestamp": datetime.now(timezone.utc).isoformat(),
            }
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
                f.flush()


class OracleClient:
    """
    Chat-completion client that turns a statement into a True/False label.
    Transport failures, 429 and 5xx are retried with exponential backoff;
    unparseable answers are re-asked up to ``max_retries`` times.
    """

    def __init__(
        self,
        cfg: OracleConfig,
        cache: Optional[LabelCache] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        if not cfg.endpoint:
            raise OracleError("no oracle endpoint configured (set ORACLE_ENDPOINT)")
        self.cfg = cfg
        self.cache = cache if cache is not None else LabelCache(cfg.cache_path)
        self.requests_sent = 0
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._client = httpx.AsyncClient(
            headers=headers,
            timeout=httpx.Timeout(cfg.timeout),
            transport=transport,
        )

    async def __aenter__(self) -> "OracleClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._client.aclose()

    def _body(self, statement_text: str) -> Dict:
        return {
            "model": self.cfg.model_name,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": self.cfg.system_message},
                {"role": "user", "content": statement_text},
            ],
        }

    async def _sleep_before_retry(self, attempt: int) -> None:
        if self.cfg.backoff_seconds > 0:
            await asyncio.sleep(self.cfg.backoff_seconds * (2 ** attempt))

    async def complete(self, statement_text: str) -> str:
        """One chat completion, retried on transport and server errors."""
        last_error: Optional[OracleTransportError] = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                self.requests_sent += 1
                response = await self._client.post(self.cfg.endpoint, json=self._body(statement_text))
            except httpx.HTTPError as e:
                last_error = OracleTransportError(f"request failed: {e}")
                logger.warning(f"Oracle request failed on attempt {attempt + 1}: {e}")
            else:
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = OracleTransportError(
                        f"HTTP {response.status_code}: {response.text[:200]}",
                        status_code=response.status_code,
                    )
                    logger.warning(
                        f"Oracle returned {response.status_code} on attempt "
                        f"{attempt + 1}/{self.cfg.max_retries + 1}"
                    )
                elif response.status_code >= 400:
                    raise OracleTransportError(
                        f"HTTP {response.status_code}: {response.text[:200]}",
                        status_code=response.status_code,
                    )
                else:
                    try:
                        data = response.json()
                        return data["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise OracleTransportError(f"malformed completion body: {response.text[:200]}")
            if attempt < self.cfg.max_retries:
                await self._sleep_before_retry(attempt)
        raise last_error

    async def probe(self, statement: Statement) -> TripletLabel:
        key = cache_key(self.cfg.model_name, statement.text)
        cached = self.cache.get(key)
        if cached is not None:
            return TripletLabel(statement.triplet_ref, cached, LabelSource.CACHE)

        response = ""
        for attempt in range(self.cfg.max_retries + 1):
            response = await self.complete(statement.text)
            value = parse_label(response)
            if value is not None:
                self.cache.put(key, self.cfg.model_name, value)
                return TripletLabel(statement.triplet_ref, value, LabelSource.LLM)
            logger.warning(f"Unparseable oracle answer on attempt {attempt + 1}: {response[:80]!r}")
        raise UnparseableLabelError(statement.text, response)


async def probe_triplet(
    statement: Statement,
    cfg: OracleConfig,
    cache: Optional[LabelCache] = None,
    transport: Optional[httpx.AsyncBaseTransport] = None,
) -> TripletLabel:
    async with OracleClient(cfg, cache=cache, transport=transport) as client:
        return await client.probe(statement)


@dataclass
class ProbeFailure:
    triplet_ref: int
    error: str
    kind: str  # unparseable / transport


@dataclass
class ProbeBatchResult:
    labels: TripletLabelTable
    errors: List[ProbeFailure] = field(default_factory=list)
    requests_sent: int = 0

    def summary(self) -> Dict:
        counts: Dict[str, int] = {}
        for source in self.labels.sources.values():
            counts[source] = counts.get(source, 0) + 1
        failures: Dict[str, int] = {}
        for failure in self.errors:
            failures[failure.kind] = failures.get(failure.kind, 0) + 1
        return {
            "labeled": len(self.labels),
            "by_source": dict(sorted(counts.items())),
            "failed": len(self.errors),
            "failures_by_kind": dict(sorted(failures.items())),
            "requests_sent": self.requests_sent,
        }


async def probe_batch(
    g: KnowledgeGraph,
    triplet_refs: Sequence[int],
    templates: TemplateTable,
    cfg: OracleConfig,
    date_mode: DateMode = DateMode.NONE,
    cache: Optional[LabelCache] = None,
    transport: Optional[httpx.AsyncBaseTransport] = None,
) -> ProbeBatchResult:
    """
    Label triplets through the backend with at most ``cfg.parallelism``
    requests in flight. Identical statements share one request; cached
    statements are never re-sent. Failures are reported per triplet.
    """
    statements = [verbalize(g, ref, templates, date_mode) for ref in triplet_refs]

    async with OracleClient(cfg, cache=cache, transport=transport) as client:
        semaphore = asyncio.Semaphore(cfg.parallelism)
        unique: Dict[str, Statement] = {}
        for statement in statements:
            unique.setdefault(cache_key(cfg.model_name, statement.text), statement)

        async def bounded(statement: Statement) -> TripletLabel:
            async with semaphore:
                return await client.probe(statement)

        keys = list(unique)
        outcomes = await asyncio.gather(
            *(bounded(unique[key]) for key in keys), return_exceptions=True
        )
        by_key = dict(zip(keys, outcomes))
        requests_sent = client.requests_sent

    labels: Dict[int, int] = {}
    sources: Dict[int, str] = {}
    errors: List[ProbeFailure] = []
    for statement in statements:
        outcome = by_key[cache_key(cfg.model_name, statement.text)]
        if isinstance(outcome, TripletLabel):
            labels[statement.triplet_ref] = outcome.value
            sources[statement.triplet_ref] = outcome.source.value
        elif isinstance(outcome, UnparseableLabelError):
            errors.append(ProbeFailure(statement.triplet_ref, str(outcome), "unparseable"))
        elif isinstance(outcome, OracleError):
            errors.append(ProbeFailure(statement.triplet_ref, str(outcome), "transport"))
        else:
            raise outcome

    logger.info(
        f"Probed {len(statements)} triplets: {len(labels)} labeled, {len(errors)} failed, "
        f"{requests_sent} upstream requests"
    )
    return ProbeBatchResult(TripletLabelTable(labels, sources), errors, requests_sent)


class Labeler(Protocol):
    """Anything that can label triplets of a graph (LLM or synthetic)."""

    kind: str

    def label(self, g: KnowledgeGraph, triplet_refs: Sequence[int]) -> ProbeBatchResult:
        ...


class LLMLabeler:
    """Synchronous facade over probe_batch for the pipeline stages."""

    kind = "llm"

    def __init__(
        self,
        cfg: OracleConfig,
        templates: TemplateTable,
        date_mode: DateMode = DateMode.NONE,
        cache: Optional[LabelCache] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.cfg = cfg
        self.templates = templates
        self.date_mode = DateMode(date_mode)
        self.cache = cache if cache is not None else LabelCache(cfg.cache_path)
        self.transport = transport

    def label(self, g: KnowledgeGraph, triplet_refs: Sequence[int]) -> ProbeBatchResult:
        return asyncio.run(
            probe_batch(
                g, triplet_refs, self.templates, self.cfg, self.date_mode,
                cache=self.cache, transport=self.transport,
            )
        )
