import argparse
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Any, Sequence

import harness
from codec import CodecError
from config import ConfigError, build_config, get_log_level
from neural_model import DivergenceError, MinMode, SentinelError
from prototypes import SelectionStrategy
from run_log import RunLogHandler

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

EXPERIMENT_VERBS = ("baseline", "train", "sweep", "grid")


def _experiment_args(p: argparse.ArgumentParser) -> None:
    # every default is None so unset flags fall through to env / config file
    p.add_argument("--train", dest="train_path", help="UCR *_TRAIN.tsv file")
    p.add_argument("--test", dest="test_path", help="UCR *_TEST.tsv file")
    p.add_argument("--dataset-name")
    p.add_argument("--per-class", type=int, help="prototypes per class")
    p.add_argument("--ratio", dest="shorten_ratio", type=float, help="prototype length / M")
    p.add_argument("--strategy", choices=[str(s) for s in SelectionStrategy])
    p.add_argument("--selection-seed", type=int)
    p.add_argument("--train-seed", type=int)
    p.add_argument("--subsample-seed", type=int)
    p.add_argument("--tau-mode", choices=["calibrated", "fixed"])
    p.add_argument("--tau", type=float)
    p.add_argument("--sentinel", type=float)
    p.add_argument("--calibration-size", type=int)
    p.add_argument("--min-mode", choices=[str(m) for m in MinMode])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int, help="0 disables early stopping")
    p.add_argument("--grad-clip", type=float, help="0 disables clipping")
    p.add_argument("--rates", type=float, nargs="+", help="training subsample rates")
    p.add_argument("--repeats", type=int)
    p.add_argument("--no-normalize", dest="normalize", action="store_const", const=False)
    p.add_argument("--output-dir")
    p.add_argument("--n-jobs", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpnet", description="Prototype DTW as a trainable recurrent classifier"
    )
    parser.add_argument("--log-level", default=None, help="overrides WARPNET_LOG_LEVEL")
    parser.add_argument("--config", default=None, help="TOML file; wins over flags")
    sub = parser.add_subparsers(dest="verb", required=True)

    helps = {
        "baseline": "1-NN DTW on the test split",
        "train": "train and evaluate one model",
        "sweep": "train over every subsample rate and repeat",
        "grid": "search prototypes per class x shortening ratio",
    }
    for verb in EXPERIMENT_VERBS:
        _experiment_args(sub.add_parser(verb, help=helps[verb]))

    p = sub.add_parser("explain", help="dump one prediction as JSON")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--min-mode", choices=[str(m) for m in MinMode], default=MinMode.DIRECT)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")

    p = sub.add_parser("shorten", help="shorten every series of a UCR file")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("dtw", help="DTW between two series")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--index-b", type=int, default=0)
    p.add_argument("--variant", choices=["full", "downdiag", "rolling", "brute"], default="full")
    p.add_argument("--normalize", action="store_true")
    return parser


def setup_logging(level: str, output_dir: Path | None) -> None:
    sh = logging.StreamHandler()
    sh_fmtr = logging.Formatter('[{levelname:<4.4}:{name:<10.10}] {message}', style='{')
    sh.setFormatter(sh_fmtr)
    handlers: list[logging.Handler] = [sh]
    if output_dir is not None:
        rl = RunLogHandler(output_dir)
        rl_fmtr = logging.Formatter('{asctime} {levelname:<4.4} {name}: {message}', style='{')
        rl.setFormatter(rl_fmtr)
        handlers.append(rl)
    logging.basicConfig(level=level, handlers=handlers, force=True)


def run(args: argparse.Namespace) -> Any:
    if args.verb in EXPERIMENT_VERBS:
        cli = {k: v for k, v in vars(args).items() if k not in ("verb", "log_level", "config")}
        config = build_config(cli, args.config)
        setup_logging(args.log_level or get_log_level(), config.output_dir)
        if args.verb == "baseline":
            return [r.to_json() for r in harness.run_baseline(config)]
        if args.verb == "train":
            return harness.cmd_train(config).to_json()
        if args.verb == "sweep":
            return [r.to_json() for r in harness.cmd_sweep(config)]
        _, best = harness.cmd_grid(config)
        return best.to_json()

    setup_logging(args.log_level or get_log_level(), None)
    if args.verb == "explain":
        dump = harness.cmd_explain(
            args.model, args.data, args.index, args.out, args.normalize, MinMode(args.min_mode)
        )
        return json.dumps({"predicted": dump["predicted"], "out": str(args.out)})
    if args.verb == "shorten":
        change = harness.cmd_shorten(args.data, args.ratio, args.out, args.normalize)
        return json.dumps({"out": str(args.out), "median_relative_change": change})
    if args.verb == "dtw":
        return json.dumps(
            harness.cmd_dtw(
                args.a, args.index_a, args.b, args.index_b, args.variant, args.normalize
            )
        )
    raise ConfigError(f"Unknown command {args.verb!r}")


def main(argv: Sequence[str] | None = None) -> int:

    # Handle signals
    def sigterm_handler(_signo: Any, _stack_frame: Any) -> None:
        raise KeyboardInterrupt
    signal.signal(signal.SIGTERM, sigterm_handler)

    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        result = run(args)
    except (ConfigError, SentinelError) as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DivergenceError as e:
        logging.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except (CodecError, OSError, IndexError, ValueError) as e:
        logging.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA

    for line in result if isinstance(result, list) else [result]:
        print(line)
    return EXIT_OK


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logging.info('Exiting...')
        logging.shutdown()
        sys.exit(130)
