"""Command-line interface: one subcommand per pipeline stage plus ``run``.

Exit status: 0 success, 1 stage failure, 2 failed check, 3 bad config.
"""

import argparse
import logging
import sys
from typing import NamedTuple, Optional, Tuple

from aligndistil_lab import config as cfgmod
from aligndistil_lab.errors import CheckFailure, ConfigError, LabError
from aligndistil_lab.harness import ExperimentSpec, run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CHECK = 2
EXIT_CONFIG = 3

SINGLE_STAGE_COMMANDS = (
    "gen-data",
    "train-rm",
    "train-dpo",
    "train-reverse-dpo",
    "verify",
    "eval-reward-acc",
    "convergence-bench",
    "ablation",
)

TEACHER_MODES = {
    "constant": "constant_extrapolate",
    "adaptive": "adaptive_extrapolate",
    "combine": "rlhf_combine",
}


class Colors:
    """ANSI colour helpers for terminal messages."""

    RESET = "\033[0m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    CYAN = "\033[36m"

    @classmethod
    def _wrap(cls, code, text):
        return f"{code}{text}{cls.RESET}"

    @classmethod
    def error(cls, text):
        return cls._wrap(cls.RED, text)

    @classmethod
    def warning(cls, text):
        return cls._wrap(cls.YELLOW, text)

    @classmethod
    def success(cls, text):
        return cls._wrap(cls.GREEN, text)

    @classmethod
    def highlight(cls, text):
        return cls._wrap(cls.CYAN, text)

    @classmethod
    def bold(cls, text):
        return cls._wrap(cls.BOLD, text)

    @classmethod
    def dim(cls, text):
        return cls._wrap(cls.DIM, text)


class Progress:
    """Single-line progress indicator on stderr."""

    def __init__(self, stream=None):
        self.stream = stream
        self.active = False
        self.width = 0

    def _write(self, message):
        stream = self.stream or sys.stderr
        padding = " " * max(0, self.width - len(message))
        stream.write(f"\r{Colors.dim(message)}{padding}")
        stream.flush()
        self.width = len(message)

    def start(self, message):
        self.active = True
        self._write(message)

    def update(self, message):
        if self.active:
            self._write(message)

    def stop(self):
        if self.active:
            stream = self.stream or sys.stderr
            stream.write("\r" + " " * self.width + "\r")
            stream.flush()
        self.active = False
        self.width = 0


progress = Progress()


class RunConfig(NamedTuple):
    command: str
    stages: Optional[Tuple[str, ...]]
    config_path: Optional[str]
    overrides: Tuple[Tuple[str, object], ...]
    verbose: bool
    show_progress: bool


class _ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with the config-error status."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(Colors.error(f"Error: {message}") + "\n")
        sys.exit(EXIT_CONFIG)


def _add_common(parser):
    parser.add_argument(
        "-c", "--config", help="experiment JSON document to start from"
    )
    parser.add_argument("-o", "--output-dir", help="artifact directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--beta0", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--r", type=float)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--weight", type=float)
    parser.add_argument("--label-noise", type=float)
    parser.add_argument("--instances", type=int)
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    parser.add_argument(
        "--no-progress", action="store_true", help="hide the progress line"
    )


def build_parser():
    parser = _ArgumentParser(
        prog="aligndistil-lab",
        description=(
            "Desk-scale lab for token-level distillation against an "
            "extrapolated DPO teacher."
        ),
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in SINGLE_STAGE_COMMANDS:
        _add_common(commands.add_parser(name, help=f"run stage {name}"))
    align = commands.add_parser("align", help="AlignDistil training")
    align.add_argument("--mode", choices=["on", "off"], default="on")
    align.add_argument(
        "--teacher", choices=sorted(TEACHER_MODES), default="adaptive"
    )
    _add_common(align)
    baseline = commands.add_parser("baseline", help="baseline training")
    baseline.add_argument(
        "--kind", choices=["sentence", "token"], required=True
    )
    _add_common(baseline)
    run = commands.add_parser("run", help="run every stage of the config")
    run.add_argument(
        "--stages", help="comma-separated subset of stages, in order"
    )
    _add_common(run)
    return parser


def parse_and_validate_args(argv=None):
    """Parse ``argv`` into a RunConfig; exits with status 3 on bad input."""
    parser = build_parser()
    args = parser.parse_args(argv)

    overrides = []
    for flag, dotted in cfgmod.FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((dotted, value))

    if args.command == "align":
        stages = (f"align-{args.mode}",)
        overrides.append(("teacher.mode", TEACHER_MODES[args.teacher]))
    elif args.command == "baseline":
        stages = (f"baseline-{args.kind}",)
    elif args.command == "run":
        stages = None
        if args.stages:
            stages = tuple(s.strip() for s in args.stages.split(","))
            unknown = [s for s in stages if s not in cfgmod.STAGES]
            if unknown:
                parser.error(f"unknown stages: {', '.join(unknown)}")
    else:
        stages = (args.command,)

    return RunConfig(
        command=args.command,
        stages=stages,
        config_path=args.config,
        overrides=tuple(overrides),
        verbose=args.verbose,
        show_progress=not args.no_progress,
    )


def build_spec(config):
    overrides = dict(config.overrides)
    if config.stages is not None:
        overrides["stages"] = list(config.stages)
    return ExperimentSpec.load(config.config_path, overrides)


def run(config):
    """Execute the stages selected by ``config``; return the manifest."""
    spec = build_spec(config)
    on_progress = progress.update if config.show_progress else None
    if config.show_progress:
        progress.start(f"Starting {spec.name}...")
    try:
        manifest = run_experiment(spec, on_progress=on_progress)
    finally:
        progress.stop()
    print(
        Colors.success("Done: ")
        + ", ".join(spec.stages)
        + " -> "
        + Colors.highlight(str(manifest))
    )
    return manifest


def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None):
    config = parse_and_validate_args(argv)
    configure_logging(config.verbose)
    try:
        run(config)
    except ConfigError as exc:
        print(Colors.error(f"Config error: {exc}"), file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    except CheckFailure as exc:
        print(Colors.error(f"Check failed: {exc}"), file=sys.stderr)
        if exc.report is not None:
            print(Colors.dim(str(exc.report)), file=sys.stderr)
        sys.exit(EXIT_CHECK)
    except LabError as exc:
        print(Colors.error(f"Error: {exc}"), file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    except KeyboardInterrupt:
        print(Colors.warning("\nInterrupted"), file=sys.stderr)
        sys.exit(130)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
