"""
Report writers: canonical JSON and the homophily histogram SVG
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import settings
from .core.homophily import HomophilyReport

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "knowledge-homophily"


def write_json(data: Any, path: Path) -> Path:
    """Sorted keys, two-space indent, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def render_histogram_svg(
    report: HomophilyReport,
    path: Path,
    reference: float = settings.CITESEER_HOMOPHILY,
    title: str = "Knowledge homophily",
) -> Path:
    """
    Bar chart of the H(v) histogram with the graph mean and the Citeseer
    reference line. Output is byte-stable for identical reports.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = report.bin_edges
    widths = [hi - lo for lo, hi in zip(edges[:-1], edges[1:])]

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        ax.bar(edges[:-1], report.histogram, width=widths, align="edge", color="#4c72b0", edgecolor="white")
        ax.axvline(report.graph_mean, color="#dd8452", linestyle="-", label=f"mean H = {report.graph_mean:.3f}")
        ax.axvline(reference, color="#55a868", linestyle="--", label=f"Citeseer benchmark ({reference:.2f})")
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("node knowledge homophily H(v)")
        ax.set_ylabel("number of entities")
        ax.set_title(f"{title} ({report.n_nodes} entities)")
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info(f"Wrote histogram to {path}")
    return path


def summarize(reports: Dict[str, Dict]) -> Dict:
    """Headline numbers of a run, keyed by stage."""
    summary: Dict[str, Any] = {}
    homophily = reports.get("homophily")
    if homophily:
        summary["homophily_mean"] = homophily["graph_mean"]
        summary["homophily_nodes"] = homophily["n_nodes"]
    baseline = reports.get("baseline")
    if baseline:
        summary["baseline"] = {
            k: baseline[k] for k in ("baseline_mean", "z", "p_two_tailed", "ci99", "significant", "trials")
        }
    robustness = reports.get("robustness")
    if robustness:
        summary["robustness"] = robustness["per_fraction"]
    quality = reports.get("quality")
    if quality:
        summary["selection_quality"] = {name: row["quality"] for name, row in sorted(quality.items())}
    retrieval = reports.get("retrieval")
    if retrieval:
        summary["retrieval"] = {
            name: {"gold_path_recovery": row["gold_path_recovery"], "answer_hit": row["answer_hit"]}
            for name, row in sorted(retrieval.get("variants", {}).items())
        }
    return summary
