"""Command-line experiment runner.

Exit codes: 0 success, 2 invalid configuration, 3 run failure.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from config import settings
from core.errors import ConfigError
from models.schemas import ExperimentConfig, RunSummary
from services.experiment_service import ExperimentService
from utils import setup_logging

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN_FAILED = 3

STRATEGIES = ["fedavg", "fedprox", "isfa"]


def _experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="Run seed")
    parser.add_argument("--rounds", type=int, default=None, help="Communication rounds T")
    parser.add_argument("--strategy", choices=STRATEGIES, default=None, help="Aggregation strategy")
    parser.add_argument("--gamma", type=float, default=None, help="ISFA sharpness")
    parser.add_argument("--clip-norm", type=float, default=None, help="DP clipping norm C (enables DP)")
    parser.add_argument("--noise-multiplier", type=float, default=None, help="DP noise multiplier (enables DP)")
    parser.add_argument("--dp", action=argparse.BooleanOptionalAction, default=None, help="Force client-level DP on or off")
    parser.add_argument("--secure-agg", action=argparse.BooleanOptionalAction, default=None, help="Pairwise-masked uploads")
    parser.add_argument("--client-fraction", type=float, default=None, help="Client fraction p")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--log-level", default=None, help="Logging level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtalk", description="Federated talking-head diffusion simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    _experiment_flags(commands.add_parser("run", help="Run one experiment"))
    compare = commands.add_parser("compare", help="Compare strategies on a matched protocol")
    _experiment_flags(compare)
    compare.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=STRATEGIES, help="Strategies to run")
    _experiment_flags(commands.add_parser("ablate", help="Run the five ablation variants"))

    serve = commands.add_parser("serve", help="Start the HTTP API")
    serve.add_argument("--host", default=settings.HOST)
    serve.add_argument("--port", type=int, default=settings.PORT)
    serve.add_argument("--log-level", default=None, help="Logging level")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Map CLI flags onto nested config overrides; unset flags are left out."""
    federation: Dict[str, Any] = {}
    dp: Dict[str, Any] = {}
    for flag, key in (("rounds", "rounds"), ("strategy", "strategy"), ("gamma", "gamma"),
                      ("client_fraction", "client_fraction"), ("secure_agg", "secure_agg")):
        value = getattr(args, flag)
        if value is not None:
            federation[key] = value
    if args.clip_norm is not None:
        dp["clip_norm"] = args.clip_norm
    if args.noise_multiplier is not None:
        dp["noise_multiplier"] = args.noise_multiplier
    if args.dp is not None:
        dp["enabled"] = args.dp
    elif dp:
        dp["enabled"] = True
    if dp:
        federation["dp"] = dp

    overrides: Dict[str, Any] = {}
    if federation:
        overrides["federation"] = federation
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    return overrides


def _exit_code(summaries: List[RunSummary]) -> int:
    return EXIT_OK if all(s.status == "ok" for s in summaries) else EXIT_RUN_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    if args.command == "serve":
        import uvicorn

        uvicorn.run("app:app", host=args.host, port=args.port, reload=settings.DEBUG)
        return EXIT_OK

    try:
        config = ExperimentConfig.load(args.config, overrides_from_args(args))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    service = ExperimentService()
    if args.command == "run":
        summaries = [service.run(config)]
    elif args.command == "compare":
        summaries = service.compare(config, args.strategies)
    else:
        summaries = service.ablate(config)

    for summary in summaries:
        logger.info(
            "name=%s status=%s best_round=%s val_loss=%s", summary.name, summary.status, summary.best_round, summary.val_loss
        )
    return _exit_code(summaries)


if __name__ == "__main__":
    sys.exit(main())
