"""
API endpoints for pipeline run artifacts
"""
import json
import logging
from pathlib import Path
from typing import Dict

from fastapi import APIRouter, HTTPException, Query
from fastapi.responses import Response

from ..config import settings
from ..core.graph import read_scores_csv

logger = logging.getLogger(__name__)
router = APIRouter()

REPORTS = {
    "homophily": "homophily_report.json",
    "baseline": "baseline_report.json",
    "robustness": "robustness_report.json",
    "quality": "quality_report.json",
    "retrieval": "retrieval_report.json",
    "holdout": "holdout.json",
    "probe_log": "probe_log.json",
    "train_gnn": "train_report_gnn.json",
    "train_mlp": "train_report_mlp.json",
    "summary": "report.json",
}


def _run_dir(run_id: str) -> Path:
    if not run_id or run_id in (".", "..") or "/" in run_id or "\\" in run_id:
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found")
    run_dir = settings.ARTIFACTS_DIR / run_id
    if not run_dir.is_dir():
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found")
    return run_dir


def _read_json(path: Path) -> Dict:
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"{path.name} not found")
    return json.loads(path.read_text(encoding="utf-8"))


@router.get("")
async def list_runs() -> Dict:
    """List run directories and whether they completed."""
    try:
        root = settings.ARTIFACTS_DIR
        runs = []
        if root.exists():
            for run_dir in sorted(p for p in root.iterdir() if p.is_dir()):
                runs.append({"run_id": run_dir.name, "complete": (run_dir / "manifest.json").exists()})
        return {"runs": runs, "count": len(runs)}
    except Exception as e:
        logger.error(f"Error listing runs: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/{run_id}/manifest")
async def get_manifest(run_id: str) -> Dict:
    """Config hash, seeds, versions and artifact digests of a finished run."""
    return _read_json(_run_dir(run_id) / "manifest.json")


@router.get("/{run_id}/reports/{name}")
async def get_report(run_id: str, name: str) -> Dict:
    """One of the named JSON reports of a run."""
    if name not in REPORTS:
        raise HTTPException(status_code=404, detail=f"Unknown report '{name}'")
    return _read_json(_run_dir(run_id) / REPORTS[name])


@router.get("/{run_id}/scores")
async def get_entity_scores(
    run_id: str,
    limit: int = Query(100, ge=1, le=10000, description="Rows per page"),
    offset: int = Query(0, ge=0, description="Rows to skip"),
    order: str = Query("entity_id", pattern="^(entity_id|k_score|degree)$", description="Sort column"),
) -> Dict:
    """Paginated entity knowledgeability scores."""
    path = _run_dir(run_id) / "entity_scores.csv"
    if not path.exists():
        raise HTTPException(status_code=404, detail="No entity scores for this run")
    try:
        scores_df = read_scores_csv(path).sort_values([order, "entity_id"], kind="mergesort")
        page = scores_df.iloc[offset:offset + limit]
        return {
            "run_id": run_id,
            "total": len(scores_df),
            "offset": offset,
            "limit": limit,
            "scores": page.to_dict("records"),
        }
    except Exception as e:
        logger.error(f"Error reading scores for {run_id}: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/{run_id}/histogram")
async def get_histogram(run_id: str) -> Response:
    """Homophily histogram as SVG."""
    path = _run_dir(run_id) / "homophily_histogram.svg"
    if not path.exists():
        raise HTTPException(status_code=404, detail="No histogram for this run")
    return Response(content=path.read_bytes(), media_type="image/svg+xml")
