"""
CALNet - Command Line Application
Trains base policies and attribute modules, assembles them zero-shot and
compares against from-scratch baselines
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Import custom modules
from config.settings import CASCADE_DEFAULTS, EVAL_EPISODES, EXIT_CONFIG_ERROR, EXIT_OK
from src.errors import CalnetError, ConfigurationError
from src.experiment_config import load_environment, load_terminal_level
from src.harness import exit_code_for, inspect_checkpoint, run, run_evaluation


class CalnetApp:
    """
    Main command-line application class
    Parses arguments and hands each command to the harness
    """

    def __init__(self):
        """Initialize the argument parser"""
        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="calnet",
            description="Cascade attribute learning: modular attribute policies on 2D control tasks",
        )
        parser.add_argument("--verbose", action="store_true", help="enable debug logging")
        commands = parser.add_subparsers(dest="command", required=True)

        run_cmd = commands.add_parser("run", help="run an experiment file")
        run_cmd.add_argument("config", help="YAML experiment file")

        eval_cmd = commands.add_parser("eval", help="evaluate a stack assembled from checkpoints")
        eval_cmd.add_argument("--stack", nargs="+", required=True,
                              help="base (or stack) checkpoint followed by module checkpoints")
        eval_cmd.add_argument("--env", required=True, help="YAML file with an environment section")
        eval_cmd.add_argument("--episodes", type=int, default=EVAL_EPISODES)
        eval_cmd.add_argument("--seed", type=int, default=0)
        eval_cmd.add_argument("--level", type=float, default=None,
                              help="initial-state random level (the file's curriculum.terminal_level by default)")
        eval_cmd.add_argument("--out", default=None, help="CSV file for the evaluation report")
        eval_cmd.add_argument("--strict-fingerprint", action="store_true",
                              default=CASCADE_DEFAULTS["strict_fingerprint"],
                              help="fail instead of warn when a module was trained on another base")
        eval_cmd.add_argument("--finetune", action="store_true",
                              help="fine-tune the assembled stack (not implemented)")

        compare_cmd = commands.add_parser("compare", help="run a compare_baseline experiment file")
        compare_cmd.add_argument("config", help="YAML experiment file")

        inspect_cmd = commands.add_parser("inspect", help="print checkpoint metadata")
        inspect_cmd.add_argument("checkpoint")
        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Main application entry point; returns the process exit code"""
        args = self.parser.parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)

        try:
            if args.command == "run":
                return run(args.config)
            if args.command == "compare":
                return run(args.config, expected_kind="compare_baseline")
            if args.command == "eval":
                return self._evaluate(args)
            return self._inspect(args)
        except (CalnetError, OSError) as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            return exit_code_for(exc)

    def _evaluate(self, args) -> int:
        if args.finetune:
            raise ConfigurationError("--finetune: fine-tuning assembled stacks is not implemented")
        if args.episodes < 0:
            raise ConfigurationError("--episodes: must be non-negative")
        env = load_environment(args.env)
        report = run_evaluation(
            args.stack, env, args.episodes, args.seed, args.out, args.level, args.strict_fingerprint,
            terminal_level=load_terminal_level(args.env),
        )
        print(
            f"eval: {len(args.stack)} checkpoint(s), success rate {report.success_rate:.3f} "
            f"over {report.episodes} episode(s), mean return {report.mean_return:.3f}"
        )
        return EXIT_OK

    def _inspect(self, args) -> int:
        print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
        return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Application entry point"""
    try:
        return CalnetApp().run(argv)
    except SystemExit as exc:
        # argparse usage errors
        return EXIT_CONFIG_ERROR if exc.code not in (0, None) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
