"""
Exception hierarchy shared by the core modules, the CLI and the API.

Every error carries the process exit code the CLI reports for it:
1 usage/configuration, 2 data, 3 oracle.
"""
from typing import List, Optional


class KnowledgePlatformError(Exception):
    """Base exception for the platform."""

    exit_code: int = 2


class ConfigError(KnowledgePlatformError):
    """Invalid run configuration or command-line usage."""

    exit_code = 1


class DataError(KnowledgePlatformError):
    """Input data or derived artifacts violate a precondition."""

    exit_code = 2


class GraphParseError(DataError):
    """A graph file line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class GraphError(DataError):
    """Invalid entity id or graph operation argument."""


class MissingTemplateError(DataError):
    """No verbalization template for a relation."""

    def __init__(self, relation: str):
        self.relation = relation
        super().__init__(f"no template for relation '{relation}'")


class MissingEmbeddingError(DataError):
    """Embedding provider cannot resolve some labels."""

    def __init__(self, labels: List[str]):
        self.labels = list(labels)
        preview = ", ".join(repr(label) for label in self.labels[:10])
        more = f" (+{len(self.labels) - 10} more)" if len(self.labels) > 10 else ""
        super().__init__(f"missing embeddings for {len(self.labels)} labels: {preview}{more}")


class EmptyEmbeddingError(DataError):
    """Embedding collapsed to the zero vector."""


class ShapeMismatchError(DataError):
    """Feature matrix does not fit the model or the graph."""


class StatisticsError(DataError):
    """A statistic is undefined for the given input."""


class NoHomophilyError(StatisticsError):
    """No node has both a score and a scored neighbor."""


class DegenerateVarianceError(StatisticsError):
    """Zero variance makes a test statistic undefined."""


class TrainingDivergedError(DataError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class BudgetShortfallError(DataError):
    """Not enough candidate triplets to fill a budget or a split."""

    def __init__(self, message: str, achievable: int):
        self.achievable = achievable
        super().__init__(message)


class InsufficientPathsError(DataError):
    """Question generation could not find enough simple paths."""


class OracleError(KnowledgePlatformError):
    """Knowledge probing failed."""

    exit_code = 3


class UnparseableLabelError(OracleError):
    """The backend never answered with True/False."""

    def __init__(self, statement: str, response: str):
        self.statement = statement
        self.response = response
        super().__init__(f"unparseable response {response[:80]!r} for statement {statement[:80]!r}")


class OracleTransportError(OracleError):
    """The backend could not be reached or kept failing."""

    def __init__(self, message: str, status_code: Optional[int] = None):
        self.status_code = status_code
        super().__init__(message)


class StageError(KnowledgePlatformError):
    """A pipeline stage failed; partial artifacts are kept."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
        super().__init__(f"stage '{stage}' failed: {cause}")
