"""Command-line entry point: per-stage commands plus ``run`` and ``synth``."""

from __future__ import annotations

import logging
import sys

import click

from .config import load_config
from .errors import KareError
from .pipeline import STAGES, run_pipeline, synth_inputs


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load(config_path: str, seed: int | None):
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
    return config


_RETRIEVAL_FLAGS = (
    ("--alpha", "alpha", float),
    ("--beta", "beta", float),
    ("--lambda1", "lambda1", float),
    ("--lambda2", "lambda2", float),
    ("--lambda3", "lambda3", float),
    ("--n-summaries", "max_summaries", int),
)


def retrieval_options(command):
    """Expose the relevance parameters as flags overriding the config file."""
    for flag, attr, cast in reversed(_RETRIEVAL_FLAGS):
        command = click.option(
            flag, f"retrieval_{attr}", type=cast, default=None,
            help=f"Override retrieval.{attr}.",
        )(command)
    return command


def _apply_retrieval_overrides(config, kwargs) -> None:
    for _, attr, _ in _RETRIEVAL_FLAGS:
        value = kwargs.pop(f"retrieval_{attr}", None)
        if value is not None:
            setattr(config.retrieval, attr, value)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Knowledge-graph community indexing and dynamic retrieval pipeline."""
    _configure_logging(verbose)


def _stage_command(stage: str):
    @main.command(name=stage, help=f"Run the {stage} stage.")
    @click.option("--config", "config_path", required=True, type=click.Path())
    @click.option("--seed", type=int, default=None, help="Override the global seed.")
    @click.option("--force", is_flag=True, help="Recompute even if up to date.")
    @retrieval_options
    def command(config_path: str, seed: int | None, force: bool, **kwargs) -> None:
        try:
            config = _load(config_path, seed)
            _apply_retrieval_overrides(config, kwargs)
            report = run_pipeline(config, force=force, only=[stage])
        except KareError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        click.echo(f"{stage}: {report.statuses[stage]}")

    return command


for _stage in STAGES:
    _stage_command(_stage)


@main.command(name="run", help="Run every pipeline stage in order.")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--force", is_flag=True, help="Recompute even if up to date.")
@retrieval_options
def run_all(config_path: str, seed: int | None, force: bool, **kwargs) -> None:
    try:
        config = _load(config_path, seed)
        _apply_retrieval_overrides(config, kwargs)
        report = run_pipeline(config, force=force)
    except KareError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for stage, status in report.statuses.items():
        click.echo(f"{stage}: {status}")
    click.echo(f"manifest hash: {report.manifest_hash}")


@main.command(name="synth", help="Generate synthetic pipeline inputs.")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the global seed.")
def synth(config_path: str, seed: int | None) -> None:
    try:
        config = _load(config_path, seed)
        outputs = synth_inputs(config)
    except KareError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for name, path in outputs.items():
        click.echo(f"{name}: {path}")


if __name__ == "__main__":
    main()
