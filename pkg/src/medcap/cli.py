"""Command line entry point: one subcommand per pipeline stage plus run-all.

Every subcommand takes --config (YAML run configuration), --run-dir (artifact
directory, created on demand), and --force (rerun even if the stage is up to
date). Progress goes to stderr as log lines; artifacts go to the run
directory only.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

from .config import load_config
from .errors import MedcapError
from .pipeline import STAGES, run_pipeline

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    level_name = os.environ.get("MEDCAP_LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _invoke(stage_names: list[str] | None, config_path: Path, run_dir: Path, force: bool) -> None:
    try:
        config = load_config(config_path)
        outcome = run_pipeline(config, run_dir, stages=stage_names, force=force)
    except MedcapError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}")
    for stage, status in outcome.items():
        click.echo(f"{stage}: {status}", err=True)


def _stage_command(group: click.Group, name: str, help_text: str) -> None:
    @group.command(name=name, help=help_text)
    @click.option("--config", "config_path", required=True, type=click.Path(path_type=Path), help="Run configuration YAML.")
    @click.option("--run-dir", "run_dir", required=True, type=click.Path(path_type=Path), help="Artifact directory for this run.")
    @click.option("--force", is_flag=True, default=False, help="Rerun the stage even if it is up to date.")
    def command(config_path: Path, run_dir: Path, force: bool) -> None:
        _invoke([name], config_path, run_dir, force)


@click.group()
@click.version_option(package_name="medcap")
def main() -> None:
    """Distillation corpus builder and caption evaluation pipeline."""
    _setup_logging()


_STAGE_HELP = {
    "ingest": "Read dataset listings into a validated image manifest.",
    "distill": "Query the teacher model and retain verified captions per class quota.",
    "split": "Assign retained samples to train/validation/test splits.",
    "emit-corpus": "Write instruction-format conversation files for train and validation.",
    "predict": "Caption the test split with each candidate model.",
    "eval-cls": "Score candidate label concordance against ground truth.",
    "eval-rag": "Score candidate captions for faithfulness, relevancy, and correctness.",
    "report": "Assemble the comparison report (json, csv, text).",
}

for _stage in STAGES:
    _stage_command(main, _stage.name, _STAGE_HELP[_stage.name])


@main.command(name="run-all", help="Run every stage in order, skipping stages that are up to date.")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path), help="Run configuration YAML.")
@click.option("--run-dir", "run_dir", required=True, type=click.Path(path_type=Path), help="Artifact directory for this run.")
@click.option("--force", is_flag=True, default=False, help="Rerun every stage even if up to date.")
def run_all(config_path: Path, run_dir: Path, force: bool) -> None:
    _invoke(None, config_path, run_dir, force)


if __name__ == "__main__":
    main()
