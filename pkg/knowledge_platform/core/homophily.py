"""
Entity knowledgeability aggregation and knowledge homophily statistics
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from ..config import settings
from .errors import DegenerateVarianceError, GraphError, NoHomophilyError, StatisticsError
from .graph import KnowledgeGraph, sparsify
from .oracle import Labeler
from .tables import EntityScoreTable, TripletLabelTable

logger = logging.getLogger(__name__)


class CorrelationMethod(str, Enum):
    PEARSON = "pearson"
    SPEARMAN = "spearman"


@dataclass
class HomophilyReport:
    per_node: Dict[int, float]
    graph_mean: float
    histogram: List[int]
    bin_edges: List[float]

    @property
    def n_nodes(self) -> int:
        return len(self.per_node)

    def to_dict(self) -> Dict:
        return {
            "graph_mean": self.graph_mean,
            "n_nodes": self.n_nodes,
            "histogram": self.histogram,
            "bin_edges": self.bin_edges,
            "reference_citeseer": settings.CITESEER_HOMOPHILY,
            "per_node": {str(v): h for v, h in sorted(self.per_node.items())},
        }


@dataclass
class BaselineReport:
    true_mean: float
    trial_means: List[float]
    z: float
    p_two_tailed: float
    ci99: Tuple[float, float]
    seed: int

    @property
    def trials(self) -> int:
        return len(self.trial_means)

    @property
    def significant(self) -> bool:
        return self.p_two_tailed < 0.01 and self.true_mean > self.ci99[1]

    def to_dict(self) -> Dict:
        return {
            "true_mean": self.true_mean,
            "baseline_mean": float(np.mean(self.trial_means)),
            "baseline_std": float(np.std(self.trial_means, ddof=1)),
            "trials": self.trials,
            "seed": self.seed,
            "z": self.z,
            "p_two_tailed": self.p_two_tailed,
            "ci99": list(self.ci99),
            "significant": self.significant,
            "trial_means": self.trial_means,
        }


@dataclass
class RobustnessRow:
    retain_fraction: float
    pearson: Optional[float] = None
    spearman: Optional[float] = None
    n_common_entities: int = 0
    error: Optional[str] = None


@dataclass
class RobustnessReport:
    per_fraction: Dict[float, RobustnessRow] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "per_fraction": [
                {
                    "retain_fraction": row.retain_fraction,
                    "pearson": row.pearson,
                    "spearman": row.spearman,
                    "n_common_entities": row.n_common_entities,
                    "error": row.error,
                }
                for _, row in sorted(self.per_fraction.items(), reverse=True)
            ]
        }


def entity_knowledgeability(g: KnowledgeGraph, labels: TripletLabelTable) -> EntityScoreTable:
    """
    K(v): mean label over the labeled triplets incident to v.
    Entities without labeled incident triplets are left out.
    """
    totals: Dict[int, int] = {}
    counts: Dict[int, int] = {}
    for index, value in labels.labels.items():
        triplet = g.triplet(index)
        endpoints = (triplet.head,) if triplet.is_self_loop else (triplet.head, triplet.tail)
        for v in endpoints:
            totals[v] = totals.get(v, 0) + value
            counts[v] = counts.get(v, 0) + 1
    scores = {v: totals[v] / counts[v] for v in sorted(counts)}
    logger.info(f"Aggregated {len(labels)} triplet labels into {len(scores)} entity scores")
    return EntityScoreTable(scores=scores, support={v: counts[v] for v in sorted(counts)})


def _scored_neighbors(g: KnowledgeGraph, v: int, scores: EntityScoreTable) -> List[int]:
    return [u for u in sorted(g.neighbors(v)) if u in scores]


def node_homophily(
    g: KnowledgeGraph,
    scores: EntityScoreTable,
    bins: int = settings.HISTOGRAM_BINS,
) -> HomophilyReport:
    """
    H(v) = 1 - mean |K(v) - K(u)| over scored neighbors u.

    Nodes without a score of their own or without scored neighbors are
    excluded. The histogram spans [0, 1] in ``bins`` equal bins.
    """
    if bins < 1:
        raise StatisticsError(f"bins must be positive, got {bins}")
    per_node: Dict[int, float] = {}
    for v in sorted(scores.scores):
        peers = _scored_neighbors(g, v, scores)
        if not peers:
            continue
        k_v = scores.scores[v]
        total = 0.0
        for u in peers:
            total += abs(k_v - scores.scores[u])
        per_node[v] = 1.0 - total / len(peers)

    if not per_node:
        raise NoHomophilyError("no computable homophily: no scored node has a scored neighbor")

    values = list(per_node.values())
    graph_mean = sum(values) / len(values)
    counts, edges = np.histogram(np.asarray(values), bins=bins, range=(0.0, 1.0))
    logger.info(f"Knowledge homophily over {len(per_node)} nodes: mean={graph_mean:.4f}")
    return HomophilyReport(
        per_node=per_node,
        graph_mean=graph_mean,
        histogram=[int(c) for c in counts],
        bin_edges=[float(e) for e in edges],
    )


def _baseline_trial(
    seed: int,
    trial: int,
    k_values: np.ndarray,
    node_positions: np.ndarray,
    group_sizes: np.ndarray,
) -> float:
    # one independent stream per (seed, trial) so parallel runs match serial ones
    rng = np.random.default_rng([seed, trial])
    pool = len(k_values) - 1
    node_means = np.empty(len(node_positions))
    for i, (position, size) in enumerate(zip(node_positions, group_sizes)):
        peers = rng.choice(pool, size=size, replace=False)
        peers[peers >= position] += 1  # skip v itself
        node_means[i] = 1.0 - np.abs(k_values[position] - k_values[peers]).mean()
    return float(node_means.mean())


def degree_matched_baseline(
    g: KnowledgeGraph,
    scores: EntityScoreTable,
    trials: int = 100,
    seed: int = 0,
    n_jobs: int = 1,
    report: Optional[HomophilyReport] = None,
) -> BaselineReport:
    """
    Compare the true mean homophily with random peer groups.

    Each qualifying node v gets a peer group of as many scored entities as it
    has scored neighbors, drawn without replacement from all scored entities
    except v. The spread of the per-trial means drives a two-tailed z-test and
    a 99% interval.

    Args:
        g: Knowledge graph
        scores: Observed entity knowledgeability
        trials: Number of random peer-group trials (>= 2)
        seed: Base seed; trial t draws from default_rng([seed, t])
        n_jobs: joblib workers for the trials
        report: Precomputed node_homophily report for the same scores

    Returns:
        BaselineReport
    """
    if trials < 2:
        raise StatisticsError(f"baseline needs at least 2 trials, got {trials}")
    if len(scores) < 2:
        raise StatisticsError("baseline needs at least 2 scored entities")
    if report is None:
        report = node_homophily(g, scores)

    scored = sorted(scores.scores)
    position_of = {v: i for i, v in enumerate(scored)}
    k_values = np.array([scores.scores[v] for v in scored], dtype=float)
    nodes = sorted(report.per_node)
    node_positions = np.array([position_of[v] for v in nodes], dtype=np.int64)
    group_sizes = np.array(
        [min(len(_scored_neighbors(g, v, scores)), len(scored) - 1) for v in nodes],
        dtype=np.int64,
    )

    trial_means = Parallel(n_jobs=n_jobs)(
        delayed(_baseline_trial)(seed, trial, k_values, node_positions, group_sizes)
        for trial in range(trials)
    )
    trial_means = [float(m) for m in trial_means]

    mean = float(np.mean(trial_means))
    std = float(np.std(trial_means, ddof=1))
    if std == 0.0 or not np.isfinite(std):
        raise DegenerateVarianceError("baseline trial means have zero variance; z-test undefined")

    z = (report.graph_mean - mean) / std
    p_value = float(2.0 * stats.norm.sf(abs(z)))
    half_width = settings.Z_CRITICAL_99 * std
    logger.info(
        f"Degree-matched baseline ({trials} trials): true={report.graph_mean:.4f} "
        f"baseline={mean:.4f} z={z:.2f} p={p_value:.3g}"
    )
    return BaselineReport(
        true_mean=report.graph_mean,
        trial_means=trial_means,
        z=float(z),
        p_two_tailed=p_value,
        ci99=(mean - half_width, mean + half_width),
        seed=seed,
    )


def correlation(
    xs: Sequence[float],
    ys: Sequence[float],
    method: CorrelationMethod = CorrelationMethod.PEARSON,
) -> float:
    """Pearson, or Spearman as Pearson over average ranks."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"correlation needs equal-length sequences, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise StatisticsError(f"correlation needs at least 3 points, got {len(x)}")
    if CorrelationMethod(method) == CorrelationMethod.SPEARMAN:
        x = stats.rankdata(x, method="average")
        y = stats.rankdata(y, method="average")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateVarianceError("correlation undefined for zero-variance input")
    r = stats.pearsonr(x, y)[0]
    return float(np.clip(r, -1.0, 1.0))


def sparsification_robustness(
    g: KnowledgeGraph,
    labeler: Labeler,
    fractions: Sequence[float],
    seed: int,
    full_labels: Optional[TripletLabelTable] = None,
) -> RobustnessReport:
    """
    Correlate full-graph entity scores with scores on sparsified graphs.

    Labels already known for the full graph are reused for the retained
    triplets; only the remainder goes to the labeler. A fraction with fewer
    than three commonly scored entities yields an error row.
    """
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise GraphError(f"retain fraction must lie in (0, 1], got {fraction}")

    if full_labels is None:
        full_labels = labeler.label(g, list(range(g.num_triplets))).labels
    full_scores = entity_knowledgeability(g, full_labels)
    index_of_root = {root: i for i, root in enumerate(g.origin)}

    report = RobustnessReport()
    for fraction in fractions:
        sparse = sparsify(g, fraction, seed)
        labels: Dict[int, int] = {}
        missing: List[int] = []
        for i, root in enumerate(sparse.origin):
            full_index = index_of_root.get(root)
            if full_index is not None and full_index in full_labels:
                labels[i] = full_labels.labels[full_index]
            else:
                missing.append(i)
        if missing:
            labels.update(labeler.label(sparse, missing).labels.labels)
        sparse_scores = entity_knowledgeability(sparse, TripletLabelTable(labels))

        common = sorted(set(full_scores.scores) & set(sparse_scores.scores))
        row = RobustnessRow(retain_fraction=fraction, n_common_entities=len(common))
        if len(common) < 3:
            row.error = f"only {len(common)} entities scored in both graphs"
        else:
            xs = [full_scores.scores[v] for v in common]
            ys = [sparse_scores.scores[v] for v in common]
            try:
                row.pearson = correlation(xs, ys, CorrelationMethod.PEARSON)
                row.spearman = correlation(xs, ys, CorrelationMethod.SPEARMAN)
            except StatisticsError as e:
                row.error = str(e)
        if row.error:
            logger.warning(f"Sparsification {fraction:.2f}: {row.error}")
        else:
            logger.info(
                f"Sparsification {fraction:.2f}: pearson={row.pearson:.4f} "
                f"spearman={row.spearman:.4f} over {len(common)} entities"
            )
        report.per_fraction[fraction] = row
    return report
