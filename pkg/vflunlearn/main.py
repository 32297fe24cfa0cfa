import os

import click
from dotenv import load_dotenv

from vflunlearn import harness
from vflunlearn.config import load_config
from vflunlearn.exceptions import ConfigError, NumericError, VFLError
from vflunlearn.logger import Logger

EXIT_INPUT = 2
EXIT_NUMERIC = 3


@click.group()
def cli():
    """Vertical federated unlearning experiments."""
    load_dotenv()


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
def run(config_path: str):
    """Run the experiment arm described by CONFIG_PATH."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_INPUT)

    try:
        summary = harness.run(cfg)
    except NumericError as exc:
        dump = os.path.join(cfg.run_dir, "trajectory.json")
        click.echo(f"numeric failure: {exc}\ntrajectory written to {dump}", err=True)
        raise SystemExit(EXIT_NUMERIC)
    except (VFLError, OSError) as exc:
        Logger.harness.error(f"Run failed: {exc}")
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_INPUT)

    final = summary.get("final")
    if final:
        click.echo(
            f"{summary['arm']}: clean={final['clean_acc']:.4f} backdoor={final['backdoor_acc']}"
        )
    click.echo(f"artifacts in {cfg.run_dir}")


@cli.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
def plots(directory: str):
    """Write SVG accuracy charts for the run(s) under DIRECTORY."""
    try:
        written = harness.emit_plots(harness.find_run_dirs(directory), output_dir=directory)
    except VFLError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_INPUT)
    for path in written:
        click.echo(path)


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True)
def timing(run_dirs):
    """Tabulate model construction times from finished RUN_DIRS."""
    try:
        report = harness.time_report(run_dirs)
    except VFLError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(EXIT_INPUT)
    click.echo(report.to_string(index=False))
    try:
        checks = harness.check_speedups(report)
    except VFLError:
        return
    for name, passed in checks.items():
        click.echo(f"{name}: {'yes' if passed else 'no'}")


if __name__ == "__main__":
    cli()
