"""
Run configuration and the staged experiment pipeline.

Every stage reads what it needs from the run directory and writes its own
artifacts there, so any stage can be re-run on its own once its inputs
exist.
"""
import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from . import __version__
from .config import settings
from .core.errors import ConfigError, DataError, KnowledgePlatformError, OracleError, StageError
from .core.estimator import (
    RegressorKind,
    TrainConfig,
    mean_absolute_error,
    predict,
    sample_training_scores,
    save_model,
    train,
)
from .core.features import FeatureMatrix, HashedProvider, ProviderKind, build_features, make_provider
from .core.graph import GraphFormat, KnowledgeGraph, export_scores_csv, load_graph
from .core.homophily import (
    HomophilyReport,
    degree_matched_baseline,
    entity_knowledgeability,
    node_homophily,
    sparsification_robustness,
)
from .core.injection import (
    AnchorSet,
    Budget,
    QualityScope,
    export_finetune_dataset,
    holdout_split,
    holdout_sweep,
    load_plan,
    plan_selection,
    random_plan,
    sample_anchors,
    save_plan,
    selection_quality,
)
from .core.oracle import DateMode, LLMLabeler, Labeler, OracleConfig, TemplateTable, load_templates
from .core.planted import PlantedOracle, PlantedOracleConfig, SyntheticDatasetConfig, generate_synthetic, write_synthetic
from .core.retrieval import (
    RetrievalConfig,
    RetrievalMode,
    SemanticScorer,
    evaluate_retrieval,
    generate_questions,
    question_entities,
    read_questions,
    retrieve_all,
    write_questions,
)
from .core.tables import EntityScoreTable, TripletLabelTable
from .reporting import read_json, render_histogram_svg, sha256_file, summarize, write_json

logger = logging.getLogger(__name__)


# -- configuration -------------------------------------------------------------

class OracleKind(str, Enum):
    LLM = "llm"
    PLANTED = "planted"


class DatasetConfig(BaseModel):
    """A graph file with templates, or a generated synthetic dataset."""
    path: Optional[Path] = None
    format: GraphFormat = GraphFormat.TSV
    templates: Optional[Path] = None
    embeddings: Optional[Path] = None
    synthetic: Optional[SyntheticDatasetConfig] = None
    use_cache: bool = False

    @model_validator(mode="after")
    def check_source(self) -> "DatasetConfig":
        if self.path is None and self.synthetic is None:
            self.synthetic = SyntheticDatasetConfig()
        if self.path is not None:
            if self.templates is None:
                raise ValueError("a graph file needs a templates file")
            for name in ("path", "templates", "embeddings"):
                value = getattr(self, name)
                if value is not None and not Path(value).exists():
                    raise ValueError(f"dataset {name} does not exist: {value}")
        return self


class OracleSettings(BaseModel):
    kind: OracleKind = OracleKind.PLANTED
    llm: OracleConfig = Field(default_factory=OracleConfig)
    planted: PlantedOracleConfig = Field(default_factory=PlantedOracleConfig)
    date_mode: DateMode = DateMode.NONE
    probe_sample: Optional[int] = Field(default=None, ge=1)


class FeaturesConfig(BaseModel):
    provider: ProviderKind = ProviderKind.FILE
    dim: int = Field(default=256, ge=1)  # hashed provider only
    text_dim: int = Field(default=256, ge=1)  # retrieval text embeddings


class BudgetConfig(BaseModel):
    total_triplets: int = Field(default=400, ge=1)
    anchor_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    holdout_fraction: float = Field(default=0.02, gt=0.0, lt=1.0)
    quality_scope: QualityScope = QualityScope.FINETUNE
    holdout_sweep: List[float] = Field(default_factory=lambda: [0.01, 0.02, 0.05, 0.10, 0.20])

    def budget(self) -> Budget:
        return Budget(total_triplets=self.total_triplets, anchor_fraction=self.anchor_fraction)


class HomophilyConfig(BaseModel):
    bins: int = Field(default=settings.HISTOGRAM_BINS, ge=1)
    trials: int = Field(default=100, ge=2)
    n_jobs: int = 1
    sparsify_fractions: List[float] = Field(default_factory=lambda: [0.75, 0.5])


class RetrievalRunConfig(BaseModel):
    questions_per_hop: int = Field(default=100, ge=1)
    hops: List[int] = Field(default_factory=lambda: [2, 3])
    search: RetrievalConfig = Field(default_factory=RetrievalConfig)
    variants: List[str] = Field(default_factory=lambda: ["baseline", "m-bs", "g-bs"])
    train_fraction: float = Field(default=0.4, gt=0.0, le=1.0)
    use_gold_start: bool = True
    max_knowledge: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    sweep_fractions: List[float] = Field(default_factory=lambda: [0.01, 0.02, 0.05, 0.10, 0.20, 0.40])


SEED_OFFSETS = {
    "probe": 1,
    "baseline": 2,
    "sparsify": 3,
    "anchors": 4,
    "random_plan": 5,
    "holdout": 6,
    "questions": 7,
    "retrieval_split": 8,
}


class SeedConfig(BaseModel):
    """Base seed; each random process derives its own seed from it."""
    base: int = 0

    def stage(self, name: str) -> int:
        return self.base * 1000 + SEED_OFFSETS[name]

    def all(self) -> Dict[str, int]:
        return {name: self.stage(name) for name in sorted(SEED_OFFSETS)}


class RunConfig(BaseModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    oracle: OracleSettings = Field(default_factory=OracleSettings)
    features: FeaturesConfig = Field(default_factory=FeaturesConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    budget: BudgetConfig = Field(default_factory=BudgetConfig)
    homophily: HomophilyConfig = Field(default_factory=HomophilyConfig)
    retrieval: RetrievalRunConfig = Field(default_factory=RetrievalRunConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    output_dir: Path = Field(default_factory=lambda: settings.ARTIFACTS_DIR / "default")

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"invalid config {path.name}: {e}") from None

    @classmethod
    def build(cls, data: Dict) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid config: {e}") from None

    def public_dict(self) -> Dict:
        """Config as JSON-safe data, without secrets or the output location."""
        return self.model_dump(mode="json", exclude={"oracle": {"llm": {"api_key"}}, "output_dir": True})

    def config_hash(self) -> str:
        canonical = json.dumps(self.public_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- artifacts -------------------------------------------------------------------

LABELS = "labels.json"
PROBE_LOG = "probe_log.json"
ENTITY_SCORES_CSV = "entity_scores.csv"
ENTITY_SCORES = "entity_scores.json"
HOMOPHILY_REPORT = "homophily_report.json"
HISTOGRAM = "homophily_histogram.svg"
BASELINE_REPORT = "baseline_report.json"
ROBUSTNESS_REPORT = "robustness_report.json"
ANCHORS = "anchors.json"
QUALITY_REPORT = "quality_report.json"
HOLDOUT = "holdout.json"
FINETUNE_DATASET = "finetune_dataset.jsonl"
QUESTIONS = "questions.jsonl"
RETRIEVAL_REPORT = "retrieval_report.json"
REPORT = "report.json"
MANIFEST = "manifest.json"
SWEEP_DIR = "sweep"
DATASET_DIR = "dataset"

ESTIMATOR_KINDS = (RegressorKind.GNN, RegressorKind.MLP)
PLAN_STRATEGIES = ("gnn", "mlp", "random")
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "joblib", "matplotlib", "pydantic", "httpx")


def model_file(kind: RegressorKind) -> str:
    return f"model_{kind.value}.joblib"


def train_report_file(kind: RegressorKind) -> str:
    return f"train_report_{kind.value}.json"


def predictions_file(kind: RegressorKind) -> str:
    return f"predictions_{kind.value}.json"


def plan_file(strategy: str) -> str:
    return f"plan_{strategy}.json"


def _fraction_tag(fraction: float) -> str:
    return f"{round(fraction * 100, 6):g}pct"


class PipelineRunner:
    """Owns the run directory and executes stages against it."""

    def __init__(self, cfg: RunConfig, labeler: Optional[Labeler] = None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._labeler = labeler

    # -- shared inputs ---------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def _require(self, name: str, stage: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise DataError(f"{name} not found in {self.out}; run the '{stage}' stage first")
        return path

    @cached_property
    def dataset_files(self) -> Dict[str, Optional[Path]]:
        ds = self.cfg.dataset
        if ds.path is not None:
            return {"graph": ds.path, "templates": ds.templates, "embeddings": ds.embeddings}
        files = write_synthetic(generate_synthetic(ds.synthetic), self.path(DATASET_DIR))
        return {"graph": files["graph"], "templates": files["templates"], "embeddings": files["embeddings"]}

    @cached_property
    def graph(self) -> KnowledgeGraph:
        ds = self.cfg.dataset
        fmt = ds.format
        if ds.path is None and ds.synthetic.temporal:
            fmt = GraphFormat.TSV_TEMPORAL
        return load_graph(self.dataset_files["graph"], fmt, use_cache=ds.use_cache)

    @cached_property
    def templates(self) -> TemplateTable:
        return load_templates(self.dataset_files["templates"])

    @cached_property
    def features(self) -> FeatureMatrix:
        fc = self.cfg.features
        provider = make_provider(fc.provider, fc.dim, self.dataset_files["embeddings"])
        return build_features(self.graph, provider)

    @cached_property
    def text_provider(self) -> HashedProvider:
        return HashedProvider(self.cfg.features.text_dim)

    @property
    def labeler(self) -> Labeler:
        if self._labeler is None:
            oc = self.cfg.oracle
            if oc.kind == OracleKind.PLANTED:
                self._labeler = PlantedOracle(self.graph, oc.planted)
            else:
                self._labeler = LLMLabeler(oc.llm, self.templates, oc.date_mode)
        return self._labeler

    def labels(self) -> TripletLabelTable:
        return TripletLabelTable.load(self._require(LABELS, "probe"))

    def entity_scores(self) -> EntityScoreTable:
        return EntityScoreTable.from_dict(read_json(self._require(ENTITY_SCORES, "aggregate")))

    def anchors(self) -> AnchorSet:
        return AnchorSet.from_dict(read_json(self._require(ANCHORS, "train")))

    def predictions(self, kind: RegressorKind) -> EntityScoreTable:
        return EntityScoreTable.from_dict(read_json(self._require(predictions_file(kind), "train")))

    # -- stages ----------------------------------------------------------

    def probe(self) -> Dict:
        g = self.graph
        refs = list(range(g.num_triplets))
        sample = self.cfg.oracle.probe_sample
        if sample is not None and sample < g.num_triplets:
            rng = np.random.default_rng(self.cfg.seeds.stage("probe"))
            refs = sorted(int(i) for i in rng.choice(g.num_triplets, size=sample, replace=False))
        result = self.labeler.label(g, refs)
        result.labels.save(self.path(LABELS))
        log = {
            "oracle_kind": self.labeler.kind,
            "date_mode": self.cfg.oracle.date_mode.value,
            "requested": len(refs),
            "summary": result.summary(),
            "errors": [vars(e) for e in result.errors],
        }
        write_json(log, self.path(PROBE_LOG))
        if result.errors and not len(result.labels):
            raise OracleError(f"all {len(result.errors)} probes failed: {result.summary()['failures_by_kind']}")
        if result.errors:
            logger.warning(f"{len(result.errors)} of {len(refs)} probes failed; see {PROBE_LOG}")
        return log

    def aggregate(self) -> EntityScoreTable:
        scores = entity_knowledgeability(self.graph, self.labels())
        write_json(scores.to_dict(), self.path(ENTITY_SCORES))
        export_scores_csv(self.graph, scores, self.path(ENTITY_SCORES_CSV))
        return scores

    def homophily(self) -> HomophilyReport:
        report = node_homophily(self.graph, self.entity_scores(), bins=self.cfg.homophily.bins)
        write_json(report.to_dict(), self.path(HOMOPHILY_REPORT))
        render_histogram_svg(report, self.path(HISTOGRAM))
        return report

    def baseline(self) -> Dict:
        hc = self.cfg.homophily
        report = degree_matched_baseline(
            self.graph,
            self.entity_scores(),
            trials=hc.trials,
            seed=self.cfg.seeds.stage("baseline"),
            n_jobs=hc.n_jobs,
        )
        data = report.to_dict()
        write_json(data, self.path(BASELINE_REPORT))
        return data

    def sparsify(self) -> Dict:
        report = sparsification_robustness(
            self.graph,
            self.labeler,
            self.cfg.homophily.sparsify_fractions,
            seed=self.cfg.seeds.stage("sparsify"),
            full_labels=self.labels(),
        )
        data = report.to_dict()
        write_json(data, self.path(ROBUSTNESS_REPORT))
        return data

    def train(self) -> Dict[str, Dict]:
        """Sample and label anchors, then fit both estimator kinds on them."""
        g = self.graph
        anchors = sample_anchors(g, self.cfg.budget.budget(), self.labeler, self.cfg.seeds.stage("anchors"))
        write_json(anchors.to_dict(), self.path(ANCHORS))
        if not len(anchors.entity_scores):
            raise DataError("anchor sampling produced no scored entities")

        anchor_entities = set(anchors.entities)
        targets = [v for v in range(g.num_entities) if v not in anchor_entities]
        observed = None
        if self.path(ENTITY_SCORES).exists():
            observed = self.entity_scores().restricted(targets)

        reports = {}
        for kind in ESTIMATOR_KINDS:
            model, report = train(kind, g, self.features, anchors.entity_scores.scores, self.cfg.train)
            save_model(model, self.path(model_file(kind)))
            predictions = predict(model, g, self.features, targets)
            write_json(predictions.to_dict(), self.path(predictions_file(kind)))
            data = report.to_dict()
            if observed is not None and len(observed):
                data["heldout_mae"] = mean_absolute_error(predictions, observed)
            write_json(data, self.path(train_report_file(kind)))
            reports[kind.value] = data
        return reports

    def select(self) -> Dict[str, List[int]]:
        g = self.graph
        budget = self.cfg.budget.budget()
        anchors = self.anchors()
        plans = {}
        for kind in ESTIMATOR_KINDS:
            plans[kind.value] = plan_selection(g, self.predictions(kind), anchors, budget, strategy=kind.value)
        plans["random"] = random_plan(g, anchors, budget, self.cfg.seeds.stage("random_plan"))
        for strategy, plan in plans.items():
            save_plan(plan, self.path(plan_file(strategy)))
        return {strategy: plan.selected for strategy, plan in plans.items()}

    def quality(self) -> Dict[str, Dict]:
        reports = {}
        for strategy in PLAN_STRATEGIES:
            plan = load_plan(self._require(plan_file(strategy), "select"))
            report = selection_quality(self.graph, plan, self.labeler, self.cfg.budget.quality_scope)
            reports[strategy] = report.to_dict()
        write_json(reports, self.path(QUALITY_REPORT))
        return reports

    def holdout(self, sweep: bool = False) -> Dict:
        plan = load_plan(self._require(plan_file("gnn"), "select"))
        seed = self.cfg.seeds.stage("holdout")
        fraction = self.cfg.budget.holdout_fraction
        triplets = holdout_split(self.graph, plan, fraction, seed)
        data = {"fraction": fraction, "seed": seed, "size": len(triplets), "triplets": triplets}
        write_json(data, self.path(HOLDOUT))
        if sweep:
            results = holdout_sweep(self.graph, plan, self.cfg.budget.holdout_sweep, seed)
            for swept, result in results.items():
                write_json(
                    {"fraction": swept, "seed": seed, **result},
                    self.path(SWEEP_DIR) / f"holdout_{_fraction_tag(swept)}.json",
                )
        return data

    def export(self) -> Path:
        plan = load_plan(self._require(plan_file("gnn"), "select"))
        return export_finetune_dataset(
            self.graph, plan, self.templates, self.path(FINETUNE_DATASET), self.cfg.oracle.date_mode
        )

    def questions(self) -> int:
        rc = self.cfg.retrieval
        k_scores = self.entity_scores() if rc.max_knowledge is not None else None
        questions = generate_questions(
            self.graph,
            self.templates,
            rc.questions_per_hop,
            self.cfg.seeds.stage("questions"),
            hops=rc.hops,
            max_knowledge=rc.max_knowledge,
            k_scores=k_scores,
        )
        write_questions(questions, self.path(QUESTIONS))
        return len(questions)

    def _retrieval_estimates(self, fraction: float, excluded: List[int]) -> Tuple[Dict[str, EntityScoreTable], int]:
        """Train both estimators on a fraction of the scored, non-question entities."""
        g = self.graph
        train_scores = sample_training_scores(
            self.entity_scores(), fraction, self.cfg.seeds.stage("retrieval_split"), excluded
        )
        estimates = {}
        for kind in ESTIMATOR_KINDS:
            model, _ = train(kind, g, self.features, train_scores, self.cfg.train)
            estimates[kind.value] = predict(model, g, self.features, range(g.num_entities))
        return estimates, len(train_scores)

    def _run_variants(self, questions, estimates: Dict[str, EntityScoreTable]) -> Dict[str, Dict]:
        rc = self.cfg.retrieval
        g = self.graph
        scorer = SemanticScorer(g, self.text_provider, rc.search.raw_cosine)
        variants = {
            "baseline": (RetrievalMode.SEMANTIC, None),
            "m-bs": (RetrievalMode.KNOWLEDGE_AWARE, estimates.get("mlp")),
            "g-bs": (RetrievalMode.KNOWLEDGE_AWARE, estimates.get("gnn")),
        }
        reports = {}
        for name in rc.variants:
            if name not in variants:
                raise ConfigError(f"unknown retrieval variant '{name}'")
            mode, k_scores = variants[name]
            search = rc.search.model_copy(update={"mode": mode})
            results = retrieve_all(g, questions, search, scorer, k_scores, rc.use_gold_start)
            reports[name] = evaluate_retrieval(results, questions, variant=name).to_dict()
        return reports

    def retrieve(self, sweep: bool = False) -> Dict:
        rc = self.cfg.retrieval
        questions = read_questions(self._require(QUESTIONS, "questions"))
        excluded = question_entities(questions)
        estimates, n_train = self._retrieval_estimates(rc.train_fraction, excluded)
        data = {
            "search": rc.search.model_dump(mode="json"),
            "train_fraction": rc.train_fraction,
            "n_train_entities": n_train,
            "n_questions": len(questions),
            "variants": self._run_variants(questions, estimates),
        }
        write_json(data, self.path(RETRIEVAL_REPORT))
        if sweep:
            for fraction in rc.sweep_fractions:
                swept, n_swept = self._retrieval_estimates(fraction, excluded)
                write_json(
                    {
                        "train_fraction": fraction,
                        "n_train_entities": n_swept,
                        "variants": self._run_variants(questions, swept),
                    },
                    self.path(SWEEP_DIR) / f"retrieval_{_fraction_tag(fraction)}.json",
                )
        return data

    def report(self) -> Dict:
        sources = {
            "homophily": HOMOPHILY_REPORT,
            "baseline": BASELINE_REPORT,
            "robustness": ROBUSTNESS_REPORT,
            "quality": QUALITY_REPORT,
            "retrieval": RETRIEVAL_REPORT,
        }
        reports = {key: read_json(self.path(name)) for key, name in sources.items() if self.path(name).exists()}
        data = {"oracle_kind": self.cfg.oracle.kind.value, "summary": summarize(reports)}
        if self.path(HOLDOUT).exists():
            data["holdout_size"] = read_json(self.path(HOLDOUT))["size"]
        write_json(data, self.path(REPORT))
        return data

    # -- orchestration -----------------------------------------------------

    def run_stage(self, name: str, action: Callable, *args, **kwargs):
        logger.info(f"=== stage {name} ===")
        try:
            return action(*args, **kwargs)
        except KnowledgePlatformError as e:
            logger.error(f"Stage {name} failed: {e}", exc_info=True)
            raise StageError(name, e) from e

    def run_all(self, sweep: bool = False) -> Dict:
        stages: List[Tuple[str, Callable, Dict]] = [
            ("probe", self.probe, {}),
            ("aggregate", self.aggregate, {}),
            ("homophily", self.homophily, {}),
            ("baseline", self.baseline, {}),
            ("sparsify", self.sparsify, {}),
            ("train", self.train, {}),
            ("select", self.select, {}),
            ("quality", self.quality, {}),
            ("holdout", self.holdout, {"sweep": sweep}),
            ("export", self.export, {}),
            ("questions", self.questions, {}),
            ("retrieve", self.retrieve, {"sweep": sweep}),
            ("report", self.report, {}),
        ]
        for name, action, kwargs in stages:
            self.run_stage(name, action, **kwargs)
        return self.write_manifest()

    def write_manifest(self) -> Dict:
        artifacts = {
            str(p.relative_to(self.out).as_posix()): sha256_file(p)
            for p in sorted(self.out.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }
        versions = {"knowledge_platform": __version__, "python": platform.python_version()}
        for package in VERSIONED_PACKAGES:
            try:
                versions[package] = metadata.version(package)
            except metadata.PackageNotFoundError:
                versions[package] = None
        manifest = {
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.public_dict(),
            "seeds": self.cfg.seeds.all(),
            "oracle_kind": self.cfg.oracle.kind.value,
            "versions": versions,
            "artifacts": artifacts,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        write_json(manifest, self.path(MANIFEST))
        logger.info(f"Wrote manifest with {len(artifacts)} artifacts to {self.out}")
        return manifest
