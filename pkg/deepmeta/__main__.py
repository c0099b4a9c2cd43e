"""
deepmeta - concept-level meta-learning experiments.
Main entry point for the command-line interface.
"""

import sys
import argparse
from dataclasses import replace
from pathlib import Path
from typing import Optional
from loguru import logger

from deepmeta import formats
from deepmeta.config import META_LEARNERS, MODES, ExperimentConfig
from deepmeta.episodes import build_datasets, save_dataset, save_split, synthetic_benchmark
from deepmeta.errors import ConfigError, DeepMetaError, FormatError
from deepmeta.evaluation import (
    DEFAULT_LAMBDAS,
    lambda_sweep,
    meta_test,
    method_label,
    model_from_stores,
    results_row,
    write_results,
    write_sweep,
)
from deepmeta.gradcheck import run_suite
from deepmeta.trainer import run_training, write_training_log

RESOLVED_CONFIG = "config.yaml"
BEST_SUFFIX = ".best"


def setup_logging(verbose: bool = False, log_file: Optional[Path] = None):
    """Setup logging configuration."""
    logger.remove()
    level = "DEBUG" if verbose else "INFO"
    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>",
        level=level,
    )
    if log_file is not None:
        logger.add(
            log_file,
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}",
            level="DEBUG",
        )


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for overrides whose default lives in the config."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    formatter = HelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c", "--config",
        type=Path,
        default=None,
        help="Experiment configuration (.toml or .yaml); built-in defaults when omitted",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")
    common.add_argument("--log-file", type=Path, default=None, help="Also write the log to this file")
    common.add_argument("--seed", type=int, default=None, help="Override the root seed")
    common.add_argument("--workers", type=int, default=None, help="Worker processes for evaluation")

    parser = argparse.ArgumentParser(
        prog="deepmeta",
        description="deepmeta - meta-learning with a jointly trained concept generator",
        formatter_class=formatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = sub.add_parser("gen-data", parents=[common], formatter_class=formatter,
                         help="Write the synthetic benchmark as DMLD files")
    gen.add_argument("--out", type=Path, default=Path("data"), help="Output directory")

    train = sub.add_parser("train", parents=[common], formatter_class=formatter, help="Run training")
    train.add_argument("--mode", choices=MODES, default=None, help="Override train.mode (default: deml)")
    train.add_argument("--meta-learner", choices=META_LEARNERS, default=None, help="Override train.meta_learner (default: metasgd)")
    train.add_argument("--lambda", dest="lam", type=float, default=None, help="Override train.lambda (default: 1.0 for deml, 0 otherwise)")
    train.add_argument("--iterations", type=int, default=None, help="Override train.iterations (default: 2000)")
    train.add_argument("--k-shot", type=int, default=None, help="Override episodes.k_shot (default: 1)")
    train.add_argument("--out", type=Path, default=None, help="Override output.dir")

    evaluate = sub.add_parser("eval", parents=[common], formatter_class=formatter,
                              help="Meta-test one or more checkpoints")
    evaluate.add_argument("--checkpoint", type=Path, nargs="+", default=None,
                          help="Checkpoints to evaluate (default: the run's .best checkpoint, else output.checkpoint)")
    evaluate.add_argument("--final", action="store_true", help="Default to the final rather than the best checkpoint")
    evaluate.add_argument("--tasks", type=int, default=600, help="Meta-test tasks per checkpoint")
    evaluate.add_argument("--append", action="store_true", help="Append to an existing results CSV")

    sweep = sub.add_parser("sweep-lambda", parents=[common], formatter_class=formatter,
                           help="Train and evaluate one model per lambda")
    sweep.add_argument("--lambdas", type=float, nargs="+", default=list(DEFAULT_LAMBDAS), help="Lambda values")
    sweep.add_argument("--tasks", type=int, default=600, help="Meta-test tasks per lambda")
    sweep.add_argument("--iterations", type=int, default=None, help="Override train.iterations (default: 2000)")

    baseline = sub.add_parser("baseline", parents=[common], formatter_class=formatter,
                              help="Nearest-centroid evaluation of a generator checkpoint")
    baseline.add_argument("--checkpoint", type=Path, nargs="+", default=None,
                          help="Checkpoints whose generator is evaluated (default: as for eval)")
    baseline.add_argument("--final", action="store_true", help="Default to the final rather than the best checkpoint")
    baseline.add_argument("--tasks", type=int, default=600, help="Meta-test tasks per checkpoint")
    baseline.add_argument("--append", action="store_true", help="Append to an existing results CSV")

    check = sub.add_parser("gradcheck", parents=[common], formatter_class=formatter,
                           help="Finite-difference check of every backward rule")
    check.add_argument("--no-second-order", action="store_true", help="Skip the meta-learner second-order cases")
    return parser


def load_config(args) -> ExperimentConfig:
    """Configuration from file or defaults, with command-line overrides applied."""
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
        logger.info(f"Loaded configuration from {args.config}")
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers

    train = config.train
    for attr, key in (("mode", "mode"), ("meta_learner", "meta_learner"), ("lam", "lam"), ("iterations", "iterations")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(train, key, value)
    if getattr(args, "k_shot", None) is not None:
        config.episodes.k_shot = args.k_shot
    if getattr(args, "out", None) is not None and args.command == "train":
        config.output.dir = args.out
    if getattr(args, "tasks", 1) < 1:
        raise ConfigError("must be at least 1", key="--tasks")
    config.validate()
    return config


def default_checkpoint(config: ExperimentConfig, final: bool = False) -> Path:
    """The best-validation checkpoint of the configured run when it exists."""
    checkpoint = config.output.dir / config.output.checkpoint
    best = checkpoint.with_name(checkpoint.name + BEST_SUFFIX)
    if not final and best.exists():
        return best
    return checkpoint


def checkpoint_config(path: Path, fallback: ExperimentConfig) -> ExperimentConfig:
    """The resolved config saved next to a checkpoint, else ``fallback``."""
    saved = Path(path).parent / RESOLVED_CONFIG
    if saved.exists():
        config = ExperimentConfig.load(saved, check_paths=False)
        return replace(config, seed=fallback.seed, workers=fallback.workers, data=fallback.data)
    return fallback


def cmd_gen_data(config: ExperimentConfig, args) -> int:
    meta, split, concept = synthetic_benchmark(config)
    save_dataset(meta, args.out / "meta.dmld")
    save_dataset(concept, args.out / "concept.dmld")
    save_split(split, args.out / "split.txt")
    print(f"meta:    {args.out / 'meta.dmld'} ({meta.num_examples} examples, {len(meta.classes)} classes)")
    print(f"concept: {args.out / 'concept.dmld'} ({concept.num_examples} examples, {len(concept.classes)} classes)")
    print(f"split:   {args.out / 'split.txt'}")
    return 0


def cmd_train(config: ExperimentConfig, args) -> int:
    out = config.output.dir
    datasets = build_datasets(config)
    result = run_training(config, datasets)
    config.save(out / RESOLVED_CONFIG)
    checkpoint = out / config.output.checkpoint
    formats.save_checkpoint(result.stores, checkpoint)
    if result.best_stores is not None:
        formats.save_checkpoint(result.best_stores, checkpoint.with_name(checkpoint.name + BEST_SUFFIX))
    write_training_log(result.log, out / config.output.training_log)
    if result.best_val_acc is not None:
        print(f"best validation accuracy: {result.best_val_acc:.4f} (iteration {result.best_iter})")
    if result.concept_acc is not None:
        print(f"concept recognition accuracy: {result.concept_acc:.4f}")
    return 0


def _evaluate(config: ExperimentConfig, args, knn: bool) -> int:
    datasets = build_datasets(config)
    episodes = config.episodes
    dist = datasets.distribution("test", episodes.n_way, episodes.k_shot, episodes.test_queries)
    paths = args.checkpoint or [default_checkpoint(config, final=args.final)]
    rows = []
    for path in paths:
        if not Path(path).exists():
            raise FormatError(f"checkpoint {path} does not exist")
        run_config = checkpoint_config(path, config)
        stores = formats.load_checkpoint(path)
        model = model_from_stores(run_config, stores, datasets.meta.input_dim, knn=knn)
        report = meta_test(model, dist, args.tasks, config.seed, workers=config.workers)
        label = method_label(run_config, knn=knn)
        rows.append(results_row(label, config.data.name, episodes.n_way, episodes.k_shot, report))
        print(f"{label:<28} {report.mean_accuracy * 100:6.2f} ± {report.ci95_halfwidth * 100:.2f}  ({path})")
    write_results(rows, config.output.dir / config.output.results, append=args.append)
    return 0


def cmd_eval(config: ExperimentConfig, args) -> int:
    return _evaluate(config, args, knn=False)


def cmd_baseline(config: ExperimentConfig, args) -> int:
    return _evaluate(config, args, knn=True)


def cmd_sweep(config: ExperimentConfig, args) -> int:
    datasets = build_datasets(config)
    rows = lambda_sweep(config, args.lambdas, datasets, num_tasks=args.tasks)
    write_sweep(rows, config.output.dir / config.output.sweep)
    print(f"{'lambda':>8} {'fewshot':>8} {'ci95':>8} {'concept':>8}")
    for row in rows:
        print(f"{row['lambda']:8.3f} {row['fewshot_acc']:8.4f} {row['fewshot_ci']:8.4f} {row['disc_acc']:8.4f}")
    return 0


def cmd_gradcheck(config: ExperimentConfig, args) -> int:
    results = run_suite(config.seed, second_order=not args.no_second_order)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<32} {result.max_error:.3e}  (< {result.tolerance:.0e})  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
        return 1
    logger.info(f"All {len(results)} gradient checks passed")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-lambda": cmd_sweep,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    """Main application entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.verbose, args.log_file)

    try:
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 1
    except DeepMetaError as e:
        logger.error(f"Error: {e}")
        if args.verbose:
            logger.exception(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
