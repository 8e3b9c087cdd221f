"""Command-line entry points.

Every command runs inside an application context whose config was built by
:func:`cardioquant.app.create_app`, writes ``resolved_config.json`` next to
its outputs and reports failures as a single ``CODE: message`` line.
"""
from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path
from typing import Any

import click
from flask import current_app

from cardioquant.app import create_app
from cardioquant.dataset import Subject, load_dataset, write_dataset
from cardioquant.errors import handle_errors
from cardioquant.evaluation import (
    cross_validate,
    evaluate_subjects,
    read_metrics,
    render_summary,
    write_evaluation,
)
from cardioquant.filesystem import prepare_output_dir
from cardioquant.geometry import (
    GeometryError,
    MaskSequence,
    quantify_sequence,
    write_index_csv,
)
from cardioquant.gradcheck import (
    ensure_passed,
    render_table,
    run_gradcheck_suite,
    write_gradcheck,
)
from cardioquant.imaging import preprocess_sequence
from cardioquant.networks import forward_segmentation
from cardioquant.phantom import generate_cohort
from cardioquant.settings import (
    ConfigError,
    eval_settings,
    gradcheck_settings,
    phantom_ranges,
    pipeline_config,
    preprocess_settings,
    write_resolved_config,
)
from cardioquant.training import (
    STRATEGIES,
    load_models,
    save_models,
    train,
    write_training_log,
)

OUT_DIR = click.Path(file_okay=False, path_type=Path)
EXISTING_DIR = click.Path(exists=True, file_okay=False, path_type=Path)


def _apply(**values: Any):
    """Copy the flags that were given into the app config."""
    for key, value in values.items():
        if value is not None:
            current_app.config[key] = value


def _dataset() -> list[Subject]:
    path = current_app.config["RUN_DATASET"]
    if not path:
        msg = "No dataset given (use --dataset or run.dataset)"
        raise ConfigError(msg)
    return load_dataset(path)


@click.group()
@click.option(
    "--config",
    "config_file",
    type=click.Path(dir_okay=False, path_type=Path),
    help="TOML config file or a resolved_config.json snapshot.",
)
@click.option("--seed", type=int, help="Root seed of every random stream.")
@click.pass_context
@handle_errors
def cli(ctx: click.Context, config_file: Path | None, seed: int | None):
    """Left-ventricle quantification from cine sequences."""
    overrides = {} if seed is None else {"RUN_SEED": seed}
    app = create_app(ctx.obj, config_file, overrides)
    ctx.with_resource(app.app_context())


@cli.command()
@click.option("--out", "out_dir", required=True, type=OUT_DIR)
@click.option("--subjects", type=click.IntRange(min=1))
@click.option("--force", is_flag=True, help="Write into a non-empty --out.")
@handle_errors
def phantom(out_dir: Path, subjects: int | None, force: bool):
    """Render a synthetic phantom dataset."""
    _apply(PHANTOM_SUBJECTS=subjects)
    config = current_app.config
    ranges = phantom_ranges(config)
    out = prepare_output_dir(out_dir, force)
    samples = generate_cohort(
        int(config["PHANTOM_SUBJECTS"]),
        int(config["RUN_SEED"]),
        ranges,
    )
    write_dataset(out, [Subject.from_phantom(sample) for sample in samples])
    write_resolved_config(out, config)
    current_app.logger.info(
        "Wrote %d phantom subjects to %s",
        len(samples),
        out,
    )


@cli.command("train")
@click.option("--strategy", type=click.Choice(STRATEGIES))
@click.option("--dataset", type=EXISTING_DIR)
@click.option("--out", "out_dir", required=True, type=OUT_DIR)
@click.option("--force", is_flag=True, help="Write into a non-empty --out.")
@handle_errors
def train_command(
    strategy: str | None,
    dataset: Path | None,
    out_dir: Path,
    force: bool,
):
    """Train G and D on a dataset and write checkpoints."""
    _apply(
        TRAIN_STRATEGY=strategy,
        RUN_DATASET=None if dataset is None else str(dataset),
    )
    config = current_app.config
    pipeline = pipeline_config(config)
    subjects = _dataset()
    out = prepare_output_dir(out_dir, force)
    current_app.logger.info(
        "Training %s on %d subjects",
        pipeline.train.strategy,
        len(subjects),
    )
    result = train(subjects, pipeline)
    paths = save_models(out, result)
    write_training_log(out / "train_log.csv", result.log)
    write_resolved_config(out, config)
    current_app.logger.info(
        "Wrote checkpoints %s",
        ", ".join(path.name for path in paths),
    )


@cli.command("eval")
@click.option("--folds", type=click.IntRange(min=1))
@click.option("--strategy", type=click.Choice(STRATEGIES))
@click.option("--dataset", type=EXISTING_DIR)
@click.option(
    "--checkpoint",
    "checkpoints",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Evaluate trained checkpoints instead of running k folds.",
)
@click.option("--out", "out_dir", required=True, type=OUT_DIR)
@click.option("--force", is_flag=True, help="Write into a non-empty --out.")
@handle_errors
def eval_command(
    folds: int | None,
    strategy: str | None,
    dataset: Path | None,
    checkpoints: Sequence[Path],
    out_dir: Path,
    force: bool,
):
    """Run the k-fold protocol (or score checkpoints) and write reports."""
    _apply(
        EVAL_FOLDS=folds,
        TRAIN_STRATEGY=strategy,
        RUN_DATASET=None if dataset is None else str(dataset),
    )
    config = current_app.config
    pipeline = pipeline_config(config)
    settings = eval_settings(config)
    subjects = _dataset()
    out = prepare_output_dir(out_dir, force)
    if checkpoints:
        predictions = evaluate_subjects(
            load_models(checkpoints),
            subjects,
            pipeline.preprocess,
            settings,
        )
        metrics = write_evaluation(out, predictions)
    else:
        metrics = cross_validate(subjects, pipeline, settings, out)
    write_resolved_config(out, config)
    click.echo(render_summary(metrics), nl=False)


@cli.command()
@click.option(
    "--checkpoint",
    "checkpoints",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Segment the images with these checkpoints.",
)
@click.option(
    "--from-masks",
    is_flag=True,
    help="Quantify the dataset's stored masks instead of segmenting.",
)
@click.option("--dataset", type=EXISTING_DIR)
@click.option("--out", "out_dir", required=True, type=OUT_DIR)
@click.option("--force", is_flag=True, help="Write into a non-empty --out.")
@handle_errors
def quantify(
    checkpoints: Sequence[Path],
    from_masks: bool,
    dataset: Path | None,
    out_dir: Path,
    force: bool,
):
    """Compute indices.csv per subject with the geometry oracle."""
    if bool(checkpoints) == from_masks:
        msg = "Give either --checkpoint or --from-masks"
        raise ConfigError(msg)
    _apply(RUN_DATASET=None if dataset is None else str(dataset))
    config = current_app.config
    preprocess = preprocess_settings(config)
    segmenter = None if from_masks else load_models(checkpoints).segmenter
    subjects = _dataset()
    out = prepare_output_dir(out_dir, force)
    written = 0
    failed = []
    for subject in subjects:
        if segmenter is None:
            labels = subject.masks.labels
        else:
            images = preprocess_sequence(subject.sequence, preprocess).frames
            labels = forward_segmentation(segmenter, images).hard_labels
        try:
            indices = quantify_sequence(
                MaskSequence(labels, subject.pixel_spacing),
                cca=bool(config["QUANTIFY_CCA"]),
                connectivity=int(config["QUANTIFY_CONNECTIVITY"]),
            )
        except GeometryError as err:
            current_app.logger.warning(
                "Skipping %s: %s",
                subject.subject_id,
                err,
            )
            failed.append(f"{subject.subject_id} (frame {err.frame})")
            continue
        subject_dir = out / subject.subject_id
        subject_dir.mkdir(exist_ok=True)
        write_index_csv(subject_dir / "indices.csv", indices)
        written += 1
    write_resolved_config(out, config)
    current_app.logger.info(
        "Quantified %d of %d subjects",
        written,
        len(subjects),
    )
    if failed:
        msg = (
            f"Could not quantify {len(failed)} of {len(subjects)} subjects: "
            + ", ".join(failed)
        )
        raise GeometryError(msg)


@cli.command()
@click.option("--out", "out_dir", type=OUT_DIR)
@click.option("--force", is_flag=True, help="Write into a non-empty --out.")
@handle_errors
def gradcheck(out_dir: Path | None, force: bool):
    """Compare autodiff with finite differences for every operation."""
    config = current_app.config
    settings = gradcheck_settings(config)
    out = None if out_dir is None else prepare_output_dir(out_dir, force)
    rows = run_gradcheck_suite(settings)
    click.echo(render_table(rows), nl=False)
    if out is not None:
        write_gradcheck(out / "gradcheck.csv", rows)
        write_resolved_config(out, config)
    ensure_passed(rows)


@cli.command()
@click.argument("run_dir", type=EXISTING_DIR)
@handle_errors
def report(run_dir: Path):
    """Re-render the text summary of an evaluation run."""
    click.echo(render_summary(read_metrics(run_dir)), nl=False)
