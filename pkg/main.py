import argparse
import logging
import sys
from pathlib import Path

from config import Config, ExperimentConfig, load_experiment_config
from errors import ConfigError, WasserpathError
from experiments.lookback import run_lookback_bias
from experiments.marginal import run_marginal_rate
from experiments.pathwise import run_pathwise_rate
from experiments.runner import ExperimentContext
from experiments.strong import run_strong_rate
from experiments.verify import CHECK_HEADER, OT_HEADER, check_rows, run_ot_check, run_verify
from export.report import ReportWriter

logging.basicConfig(
    level=getattr(logging, Config().log_level.upper(), logging.INFO),
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
    handlers=[logging.StreamHandler()],
)
logger = logging.getLogger(__name__)

SUBCOMMANDS = ("strong-rate", "marginal-rate", "pathwise-rate", "lookback-bias", "verify",
               "ot-check")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


class ExperimentRunner:
    """Runs one subcommand from a validated config and writes its outputs."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.runtime = Config()
        self.out_dir = Path(config.output.dir or self.runtime.output_dir)
        self.writer = ReportWriter(self.out_dir)
        self.context = ExperimentContext.from_config(config, on_progress=self._on_progress)

    def _on_progress(self, current: int, total: int, status: str):
        step = max(1, total // 10)
        if current == total or current % step == 0:
            logger.info("%s", status)

    def run(self, subcommand: str) -> bool:
        """Run ``subcommand``; returns whether every acceptance check passed."""
        ctx = self.context
        if subcommand == "verify":
            report = run_verify(ctx)
            self.writer.write_json(report)
            self.writer.write_rows(CHECK_HEADER, check_rows(report))
        elif subcommand == "ot-check":
            report, rows = run_ot_check(ctx)
            self.writer.write_json(report)
            self.writer.write_rows(OT_HEADER, rows)
        else:
            if subcommand == "strong-rate":
                report = run_strong_rate(ctx)
            elif subcommand == "marginal-rate":
                dump = self.config.output.dump_laws
                report = run_marginal_rate(ctx, dump_laws=Path(dump) / "laws" if dump else None)
            elif subcommand == "pathwise-rate":
                report = run_pathwise_rate(ctx, out_dir=self.out_dir)
            elif subcommand == "lookback-bias":
                report = run_lookback_bias(ctx)
            else:
                raise ValueError(f"unknown subcommand {subcommand!r}")
            self.writer.write_rate_report(report)
            if report.fit is not None:
                logger.info("Fitted slope %.4f (95%% CI %.4f..%.4f, R² %.4f)", report.fit.slope,
                            *report.fit.slope_ci, report.fit.r_squared)
        for check in report.checks:
            if not check.passed:
                logger.warning("Check failed: %s (%s)", check.name, check.threshold)
        return report.passed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wasserpath",
        description="Euler-scheme Wasserstein rate experiments for one-dimensional SDEs",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=None, help="worker threads")
    parser.add_argument("--dump-laws", default=None, help="directory for laws/*.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_experiment_config(args.config).with_overrides(**{
            "seed": args.seed,
            "workers": args.workers,
            "output.dir": args.out,
            "output.dump_laws": args.dump_laws,
        })
        runner = ExperimentRunner(config)
    except (WasserpathError, OSError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG

    logger.info("Running %s with config %s (hash %s)", args.subcommand, args.config,
                config.config_hash()[:12])
    try:
        passed = runner.run(args.subcommand)
    except (ConfigError, ValueError) as e:
        # settings that validate but do not fit together, e.g. m > N
        logger.error("%s rejected its settings: %s", args.subcommand, e)
        return EXIT_CONFIG
    except WasserpathError as e:
        logger.error("%s failed: %s", args.subcommand, e)
        return EXIT_FAILED
    if not passed:
        logger.error("%s finished with failed checks", args.subcommand)
        return EXIT_FAILED
    logger.info("%s finished; outputs in %s", args.subcommand, runner.out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
