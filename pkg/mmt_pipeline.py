#!/usr/bin/env python3

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import pandas as pd

from config import GeneratorConfig, TrainConfig, load_config, split_overrides
from errors import MeshTranslatorError
from gradcheck import run_gradcheck
from metrics_report import MetricsReporter
from results_database import DEFAULT_DB_PATH, ResultsLoader
from synthetic_data import default_rig, make_dataset
from trainer import ablate, evaluate, export_obj, load_checkpoint, train

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO", log_file: Optional[str] = "mmt_pipeline.log") -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class MeshTranslatorPipeline:
    """Runs one CLI subcommand and records its results."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.command = args.command
        self.reporter = MetricsReporter()

    def _train_config(self) -> TrainConfig:
        config = load_config(self.args.config, TrainConfig)
        overrides = split_overrides(tuple(self.args.set or ()))
        return config.with_overrides(**overrides) if overrides else config

    def _generator_config(self) -> GeneratorConfig:
        if self.args.config:
            config = load_config(self.args.config, GeneratorConfig)
        else:
            config = GeneratorConfig()
        overrides = split_overrides(tuple(self.args.set or ()))
        return config.with_overrides(**overrides) if overrides else config

    def _loader(self) -> ResultsLoader:
        return ResultsLoader(self.args.results_db)

    def gen_data(self) -> None:
        config = self._generator_config()
        make_dataset(self.args.n, default_rig(config), self.args.seed, self.args.out, config)

    def train(self) -> None:
        config = self._train_config()
        result = train(config, self.args.data, self.args.out, self.args.test_data)
        with self._loader() as loader:
            loader.load("training_runs", pd.DataFrame([{
                "run_id": str(Path(self.args.out).resolve()),
                "dataset": str(self.args.data),
                "config_text": config.to_text(),
                "epochs": result.epochs,
                "steps": result.steps,
                "final_loss": result.final_loss,
                "checkpoint": str(result.checkpoint),
            }]))
        logger.info(f"Checkpoint: {result.checkpoint}; metrics log: {result.metrics_log}")

    def evaluate(self) -> None:
        table = evaluate(self.args.ckpt, self.args.data, self.args.views)
        text = self.reporter.to_csv(self.reporter.with_mean_row(table), self.args.out)
        if self.args.out is None:
            sys.stdout.write(text)
        n_views = self.args.views or load_checkpoint(self.args.ckpt).config.n_views
        rows = table.assign(run_id=str(Path(self.args.ckpt).resolve()), dataset=str(self.args.data),
                            n_views=n_views)
        with self._loader() as loader:
            loader.load("evaluations", rows)

    def ablate(self) -> None:
        config = self._train_config()
        table = ablate(config, self.args.data, self.args.axis, self.args.out, self.args.test_data)
        sys.stdout.write(self.reporter.to_csv(table))
        with self._loader() as loader:
            loader.load("ablation_results", table)

    def gradcheck(self) -> bool:
        report = run_gradcheck(self._train_config())
        print(report.to_text())
        return report.passed

    def export_obj(self) -> None:
        pred_path, gt_path = export_obj(self.args.ckpt, self.args.data, self.args.index, self.args.out)
        print(pred_path)
        print(gt_path)

    def summary(self) -> None:
        with self._loader() as loader:
            counts = loader.get_table_counts()
        print("\n" + "=" * 50)
        print("RESULTS SUMMARY")
        print("=" * 50)
        for table, count in counts.items():
            print(f"{table}: {count:,} rows")
        print("=" * 50)

    def run(self) -> bool:
        """Execute the subcommand; failures are logged and reported as one JSON line on stderr."""
        handlers = {
            "gen-data": self.gen_data,
            "train": self.train,
            "eval": self.evaluate,
            "ablate": self.ablate,
            "gradcheck": self.gradcheck,
            "export-obj": self.export_obj,
            "summary": self.summary,
        }
        try:
            logger.info(f"Starting {self.command}")
            outcome = handlers[self.command]()
            return outcome is not False
        except (MeshTranslatorError, OSError) as e:
            logger.error(f"{self.command} failed: {e}")
            error = {"error": type(e).__name__, "message": str(e), "command": self.command}
            sys.stderr.write(json.dumps(error, sort_keys=True) + "\n")
            return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Multi-view mesh translator - synthetic data, training, evaluation and ablations')
    parser.add_argument(
        '--log-level',
        '-l',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        default='INFO',
        help='Set logging level (default: INFO)'
    )
    parser.add_argument(
        '--results-db',
        default=DEFAULT_DB_PATH,
        help=f'Path to the DuckDB results database (default: {DEFAULT_DB_PATH})'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='Generate a synthetic multi-view dataset')
    p.add_argument('--n', type=int, required=True, help='Number of samples')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='Dataset file to write')
    p.add_argument('--config', help='Generator config file (key = value)')
    p.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a config key')

    p = sub.add_parser('train', help='Train a model')
    p.add_argument('--config', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True, help='Output directory for checkpoint and metrics log')
    p.add_argument('--test-data', help='Separate evaluation dataset (default: hold out a fraction)')
    p.add_argument('--set', action='append', metavar='KEY=VALUE')

    p = sub.add_parser('eval', help='Evaluate a checkpoint')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--views', type=int, help='Number of views (default: as trained)')
    p.add_argument('--out', help='Write the metrics CSV here instead of stdout')

    p = sub.add_parser('ablate', help='Train and compare one model per setting of an axis')
    p.add_argument('--axis', required=True, choices=['views', 'fusion', 'alignment', 'smooth'])
    p.add_argument('--config', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', default='ablations', help='Directory for the per-setting runs')
    p.add_argument('--test-data')
    p.add_argument('--set', action='append', metavar='KEY=VALUE')

    p = sub.add_parser('gradcheck', help='Finite-difference gradient checks')
    p.add_argument('--config', required=True)
    p.add_argument('--set', action='append', metavar='KEY=VALUE')

    p = sub.add_parser('export-obj', help='Export predicted and ground-truth meshes as OBJ')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--index', type=int, required=True)
    p.add_argument('--out', required=True, help='Output directory')

    sub.add_parser('summary', help='Show row counts of the results database')
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    """Main entry point for the mesh translator pipeline."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    pipeline = MeshTranslatorPipeline(args)
    start_time = datetime.now()
    success = pipeline.run()
    logger.info(f"{args.command} finished in {datetime.now() - start_time}")

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
