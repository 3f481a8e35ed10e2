"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 stage-1 collapse, 4 missing or unreadable artifacts.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from . import pipeline, synthgen
from .pipeline import ArtifactError, CollapseError, ConfigError, RunLayout, TrainConfig

EXIT_CONFIG = 2
EXIT_COLLAPSE = 3
EXIT_ARTIFACTS = 4


@dataclass
class Context:
    config: TrainConfig
    layout: RunLayout


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class _Group(click.Group):
    """Maps the package's error types to exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ConfigError as err:
            _fail(f"invalid configuration: {err}", EXIT_CONFIG)
        except CollapseError as err:
            _fail(str(err), EXIT_COLLAPSE)
        except ArtifactError as err:
            _fail(str(err), EXIT_ARTIFACTS)


@click.group(cls=_Group)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON run configuration.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
              help="Master seed; also seeds dataset generation.")
@click.option("--out", type=click.Path(file_okay=False), default="run", show_default=True,
              help="Run directory.")
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
@click.pass_context
def main(ctx, config_path, seed, out, verbose):
    """Concept discovery and concept-balanced classifier training."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    config = TrainConfig.load(config_path) if config_path else TrainConfig().validate()
    if seed is not None:
        config = config.with_seed(seed)
    ctx.obj = Context(config, RunLayout(out))


def _echo_json(doc) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


@main.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), default=None,
              help="Dataset spec JSON; defaults to the config's dataset section.")
@click.pass_obj
def gen(obj: Context, spec_path):
    """Generate the synthetic dataset into <out>/data."""
    spec = obj.config.dataset
    if spec_path:
        try:
            spec = synthgen.DatasetSpec.from_dict(json.loads(Path(spec_path).read_text()))
            spec.validate()
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as err:
            raise ConfigError(f"{spec_path}: {err}") from err
    obj.config.dataset = spec
    dataset = pipeline.generate(obj.config, obj.layout)
    click.echo(f"wrote {len(dataset)} samples to {obj.layout.data}")


@main.command()
@click.pass_obj
def discover(obj: Context):
    """Stage 1: train slots and the concept dictionary."""
    dataset = pipeline.load_data(obj.config, obj.layout)
    model = pipeline.train_stage1(obj.config, dataset, obj.layout)
    last = model.history_[-1]
    click.echo(f"stage 1 done: loss {last['loss']:.4f}, {last['codes_in_use']} codes in use")


@main.command()
@click.pass_obj
def assign(obj: Context):
    """Export per-sample concept assignments for every split."""
    dataset = pipeline.load_data(obj.config, obj.layout)
    model = pipeline.load_stage1(obj.config, obj.layout, dataset.spec.patch_size)
    records = pipeline.export_assignments(model, dataset, obj.layout)
    for name, recs in records.items():
        click.echo(f"{name}: {len(recs)} records")


@main.command(name="balance")
@click.pass_obj
def balance_cmd(obj: Context):
    """Build the concept cluster table; print silhouette and lambda."""
    dataset = pipeline.load_data(obj.config, obj.layout)
    model = pipeline.load_stage1(obj.config, obj.layout, dataset.spec.patch_size)
    records = pipeline.read_assignments(obj.layout, "train")
    doc = pipeline.balance(obj.config, model, dataset, records, obj.layout)
    score = "undefined" if doc["silhouette"] is None else f"{doc['silhouette']:.4f}"
    click.echo(f"silhouette {score}, lambda {doc['lambda']}, {len(doc['clusters'])} active clusters")


@main.command()
@click.option("--sampler", type=click.Choice(pipeline.SAMPLERS), default="cobalt", show_default=True)
@click.option("--early-stop", type=click.Choice(pipeline.EARLY_STOPS), default=None,
              help="Checkpoint selection; defaults to the config's early_stop.")
@click.pass_obj
def train(obj: Context, sampler, early_stop):
    """Stage 2: train the classifier."""
    dataset = pipeline.load_data(obj.config, obj.layout)
    clf = pipeline.train_stage2(obj.config, dataset, obj.layout, sampler, early_stop)
    click.echo(f"stage 2 ({sampler}) done: kept epoch {clf.best_epoch_}")


@main.command(name="eval")
@click.option("--run", "run_name", default=None, help="Run name under <out>/runs; default all.")
@click.option("--grouping", type=click.Choice(pipeline.GROUPINGS), default="ground_truth", show_default=True)
@click.pass_obj
def eval_cmd(obj: Context, run_name, grouping):
    """Evaluate stored classifiers on the test split."""
    dataset = pipeline.load_data(obj.config, obj.layout)
    runs = obj.layout.runs
    dirs = [runs / run_name] if run_name else sorted(p for p in runs.glob("*") if p.is_dir())
    if not dirs:
        raise ArtifactError(f"missing artifacts: no runs under {runs}")
    for run_dir in dirs:
        try:
            doc = pipeline.evaluate_run(obj.config, dataset, obj.layout, run_dir, grouping)
        except ValueError as err:
            raise ArtifactError(f"{run_dir}: {err}") from err
        click.echo(f"{run_dir.name}: average {doc['average']:.4f}, worst-group {doc['worst']:.4f}")


@main.command()
@click.option("--no-plots", is_flag=True)
@click.pass_obj
def report(obj: Context, no_plots):
    """Summarize evaluated runs and draw plots into <out>/report."""
    summary = pipeline.report(obj.layout, plots=not no_plots)
    click.echo((obj.layout.report / "summary.md").read_text(), nl=False)
    if not summary["deltas"]:
        click.echo("(no cobalt/ERM pair to compare)")


@main.command()
@click.pass_obj
def run(obj: Context):
    """Every step end to end."""
    summary = pipeline.run_pipeline(obj.config, obj.layout.root)
    _echo_json(summary)


if __name__ == "__main__":
    main()
