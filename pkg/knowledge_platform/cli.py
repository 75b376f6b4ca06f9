"""
Command-line front-end: one subcommand per pipeline stage
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .config import settings
from .core.errors import KnowledgePlatformError
from .core.planted import SyntheticDatasetConfig, generate_synthetic, write_synthetic
from .pipeline import PipelineRunner, RunConfig

logger = logging.getLogger(__name__)

MODE_VARIANTS = {
    "semantic": ["baseline"],
    "knowledge_aware": ["m-bs", "g-bs"],
    "all": ["baseline", "m-bs", "g-bs"],
}


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1; 2 is reserved for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON file")
    common.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="base seed for every random stage")
    common.add_argument(
        "--log-level",
        default=settings.LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity",
    )
    return common


def _retrieval_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, help="knowledge weighting factor in [0, 1]")
    parser.add_argument("--beam-width", type=int, help="paths kept per level")
    parser.add_argument("--exhaustive", action="store_true", help="keep every path (no beam cut)")
    parser.add_argument("--mode", choices=sorted(MODE_VARIANTS), help="which searches to run")
    parser.add_argument("--hops", type=int, choices=[2, 3], help="only questions with this many hops")


def build_parser() -> ArgumentParser:
    common = _common_options()
    parser = ArgumentParser(
        prog="knowledge_platform",
        description="Knowledge homophily analysis, estimation, selection and retrieval",
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    probe = commands.add_parser("probe", parents=[common], help="label triplets through the oracle")
    probe.add_argument("--sample", type=int, help="probe a seeded random sample of N triplets")

    commands.add_parser("aggregate", parents=[common], help="aggregate labels into entity scores")
    commands.add_parser("homophily", parents=[common], help="node homophily report and histogram")
    commands.add_parser("baseline", parents=[common], help="degree-matched random baseline z-test")
    commands.add_parser("sparsify", parents=[common], help="sparsification robustness correlations")
    commands.add_parser("train", parents=[common], help="sample anchors and train gnn/mlp estimators")
    commands.add_parser("select", parents=[common], help="plan gnn, mlp and random selections")

    holdout = commands.add_parser("holdout", parents=[common], help="entity-disjoint held-out split")
    holdout.add_argument("--sweep", action="store_true", help="also write the holdout-size sweep")

    quality = commands.add_parser("quality", parents=[common], help="selection quality of every plan")
    quality.add_argument("--scope", choices=["finetune", "selected"], help="triplets counted in quality")

    commands.add_parser("export", parents=[common], help="write the fine-tuning dataset")

    questions = commands.add_parser("questions", parents=[common], help="generate multi-hop questions")
    questions.add_argument("--per-hop", type=int, help="questions per hop count")
    questions.add_argument("--hops", type=int, choices=[2, 3], help="only this hop count")

    retrieve = commands.add_parser("retrieve", parents=[common], help="run the retrieval benchmark")
    _retrieval_options(retrieve)
    retrieve.add_argument("--sweep", action="store_true", help="also sweep the estimator training budget")

    commands.add_parser("report", parents=[common], help="collect headline numbers into report.json")

    pipeline = commands.add_parser("pipeline", parents=[common], help="run every stage and write a manifest")
    pipeline.add_argument("--sample", type=int, help="probe a seeded random sample of N triplets")
    pipeline.add_argument("--sweep", action="store_true", help="run the holdout and budget sweeps")
    _retrieval_options(pipeline)

    synth = commands.add_parser("synth", parents=[common], help="write the synthetic dataset files")
    synth.add_argument("--entities", type=int, help="number of entities")
    synth.add_argument("--temporal", action="store_true", help="attach timestamps to triplets")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    data = cfg.model_dump()
    if args.out is not None:
        data["output_dir"] = args.out
    if args.seed is not None:
        data["seeds"]["base"] = args.seed
    if getattr(args, "sample", None) is not None:
        data["oracle"]["probe_sample"] = args.sample
    if getattr(args, "scope", None) is not None:
        data["budget"]["quality_scope"] = args.scope
    if getattr(args, "per_hop", None) is not None:
        data["retrieval"]["questions_per_hop"] = args.per_hop
    if getattr(args, "hops", None) is not None:
        data["retrieval"]["hops"] = [args.hops]
    if getattr(args, "alpha", None) is not None:
        data["retrieval"]["search"]["alpha"] = args.alpha
    if getattr(args, "beam_width", None) is not None:
        data["retrieval"]["search"]["beam_width"] = args.beam_width
    if getattr(args, "exhaustive", False):
        data["retrieval"]["search"]["beam_width"] = None
    if getattr(args, "mode", None) is not None:
        data["retrieval"]["variants"] = MODE_VARIANTS[args.mode]
    return RunConfig.build(data)


def _synth(cfg: RunConfig, args: argparse.Namespace) -> Dict:
    data = (cfg.dataset.synthetic or SyntheticDatasetConfig()).model_dump()
    if args.entities is not None:
        data["n_entities"] = args.entities
    if args.temporal:
        data["temporal"] = True
    if args.seed is not None:
        data["seed"] = args.seed
    files = write_synthetic(generate_synthetic(SyntheticDatasetConfig(**data)), cfg.output_dir)
    return {name: str(path) for name, path in files.items()}


COMMANDS: Dict[str, Callable[[PipelineRunner, argparse.Namespace], object]] = {
    "probe": lambda r, a: r.probe()["summary"],
    "aggregate": lambda r, a: {"scored_entities": len(r.aggregate())},
    "homophily": lambda r, a: {"graph_mean": r.homophily().graph_mean},
    "baseline": lambda r, a: {k: v for k, v in r.baseline().items() if k != "trial_means"},
    "sparsify": lambda r, a: r.sparsify(),
    "train": lambda r, a: {k: v["final_train_mse"] for k, v in r.train().items()},
    "select": lambda r, a: {k: len(v) for k, v in r.select().items()},
    "holdout": lambda r, a: {"size": r.holdout(sweep=a.sweep)["size"]},
    "quality": lambda r, a: {k: v["quality"] for k, v in r.quality().items()},
    "export": lambda r, a: {"path": str(r.export())},
    "questions": lambda r, a: {"questions": r.questions()},
    "retrieve": lambda r, a: r.retrieve(sweep=a.sweep)["variants"],
    "report": lambda r, a: r.report()["summary"],
    "pipeline": lambda r, a: {"config_hash": r.run_all(sweep=a.sweep)["config_hash"]},
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    try:
        cfg = load_config(args)
        if args.command == "synth":
            result = _synth(cfg, args)
        else:
            result = COMMANDS[args.command](PipelineRunner(cfg), args)
    except KnowledgePlatformError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.log_level == "DEBUG")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0
