"""Unit tests of the training loops and model persistence."""

import math
from dataclasses import replace

import numpy as np
import pytest

from cardioquant.evaluation import (
    EvalSettings,
    build_report,
    evaluate_subjects,
)
from cardioquant.filesystem import read_csv
from cardioquant.losses import LossWeights
from cardioquant.networks import (
    DrUnetConfig,
    build_drunet,
    build_stmt,
    forward_multitask,
)
from cardioquant.optim import AdamState
from cardioquant.training import (
    LOG_HEADER,
    TrainingError,
    TrainSettings,
    fit_stats,
    image_side,
    joint_step,
    load_models,
    prepare_samples,
    save_models,
    train,
    write_training_log,
)


def _with_train(config, **changes):
    return replace(config, train=replace(config.train, **changes))


def test_multistage_log_rows(tiny_pipeline, subjects):
    """Stage one logs Dice, stage two logs the multi-task terms."""
    result = train(subjects, tiny_pipeline)
    assert result.strategy == "multistage"
    assert [row.epoch for row in result.log] == [1, 2, 3, 4]
    first, last = result.log[0], result.log[-1]
    assert first.seg_loss is not None
    assert first.mse_loss is None
    assert last.seg_loss is None
    assert math.isclose(
        last.total_loss,
        last.mse_loss + 4.0 * last.bce_loss,
        rel_tol=1e-5,
    )
    assert all(row.wall_seconds is None for row in result.log)


def test_end_to_end_log_rows(tiny_pipeline, subjects):
    """Joint training logs every loss term per epoch."""
    config = _with_train(tiny_pipeline, strategy="end2end")
    result = train(subjects, config)
    assert result.strategy == "end2end"
    assert len(result.log) == 2
    for row in result.log:
        assert None not in (row.seg_loss, row.mse_loss, row.bce_loss)
        assert math.isclose(
            row.total_loss,
            10.0 * row.seg_loss + row.mse_loss + row.bce_loss,
            rel_tol=1e-5,
        )


def test_training_is_deterministic(tiny_pipeline, subjects):
    """Equal seeds give identical losses and weights."""
    first = train(subjects, tiny_pipeline, seed=7)
    second = train(subjects, tiny_pipeline, seed=7)
    assert [r.as_row() for r in first.log] == [r.as_row() for r in second.log]
    for name, value in first.models.quantifier.state_dict().items():
        np.testing.assert_array_equal(
            value,
            second.models.quantifier.state_dict()[name],
        )


def test_segmenter_is_frozen_in_stage_two(tiny_pipeline, subjects):
    """Training D leaves every parameter of G untouched."""
    without = train(subjects, _with_train(tiny_pipeline, stmt_epochs=0))
    with_stage = train(subjects, tiny_pipeline)
    for name, value in without.models.segmenter.state_dict().items():
        np.testing.assert_array_equal(
            value,
            with_stage.models.segmenter.state_dict()[name],
        )


def test_stats_are_float32_exact(subjects):
    """Statistics survive a round trip through float32."""
    stats = fit_stats(subjects, 32)
    np.testing.assert_array_equal(
        stats.mean,
        stats.mean.astype(np.float32).astype(np.float64),
    )


def test_image_side_requires_square_images(subjects, ring_subject):
    """All subjects must share one square size."""
    assert image_side(subjects) == 32
    narrow = replace(
        ring_subject.masks,
        labels=ring_subject.masks.labels[:, :, :16],
    )
    with pytest.raises(TrainingError):
        image_side([replace(ring_subject, masks=narrow)])


def test_training_needs_subjects(tiny_pipeline):
    """An empty training set is refused."""
    with pytest.raises(TrainingError):
        train([], tiny_pipeline)


def test_invalid_strategy():
    """Unknown strategies are refused up front."""
    with pytest.raises(TrainingError, match="strategy"):
        TrainSettings(strategy="adversarial")


def test_save_and_load_multistage(tmp_path, tiny_pipeline, subjects):
    """Two checkpoints rebuild G, D and the normalisation statistics."""
    result = train(subjects, tiny_pipeline)
    paths = save_models(tmp_path, result)
    assert [p.name for p in paths] == ["segmenter.cqt", "quantifier.cqt"]
    models = load_models(paths)
    assert models.image_side == 32
    np.testing.assert_array_equal(models.stats.mean, result.models.stats.mean)
    masks = np.zeros((8, 32, 32, 2))
    masks[:, 10:20, 10:20, 0] = 1.0
    np.testing.assert_allclose(
        forward_multitask(models.quantifier, masks)[0],
        forward_multitask(result.models.quantifier, masks)[0],
        atol=1e-5,
    )


def test_save_end_to_end_writes_one_checkpoint(
    tmp_path,
    tiny_pipeline,
    subjects,
):
    """Joint runs keep both networks in one file."""
    config = _with_train(tiny_pipeline, strategy="end2end", joint_epochs=1)
    paths = save_models(tmp_path, train(subjects, config))
    assert [p.name for p in paths] == ["joint.cqt"]
    models = load_models(paths)
    assert models.quantifier is not None


def test_load_without_segmenter(tmp_path, tiny_pipeline, subjects):
    """A quantifier checkpoint alone cannot run the pipeline."""
    paths = save_models(tmp_path, train(subjects, tiny_pipeline))
    with pytest.raises(TrainingError, match="segmenter"):
        load_models(paths[1:])


def test_training_log_csv(tmp_path, tiny_pipeline, subjects):
    """The log file has the documented header and one row per epoch."""
    result = train(subjects, tiny_pipeline)
    path = tmp_path / "train_log.csv"
    write_training_log(path, result.log)
    rows = read_csv(path)
    assert tuple(rows[0]) == LOG_HEADER
    assert len(rows) == len(result.log)


def test_joint_step_reaches_first_segmenter_layer(tiny_pipeline, subjects):
    """Without the Dice term, D's losses alone still move G's first layer."""
    rng = np.random.default_rng(0)
    segmenter = build_drunet(tiny_pipeline.drunet, rng)
    quantifier = build_stmt(tiny_pipeline.stmt, rng)
    sample = prepare_samples(
        subjects[:1],
        fit_stats(subjects, 32),
        32,
        tiny_pipeline.preprocess,
    )[0]
    before = segmenter.state_dict()["enc0.conv1.weight"].copy()
    segmenter.train()
    quantifier.train()
    joint_step(
        segmenter,
        quantifier,
        sample,
        LossWeights(end_to_end=(0.0, 1.0, 1.0)),
        (AdamState(lr=1e-3), AdamState(lr=1e-3)),
    )
    after = segmenter.state_dict()["enc0.conv1.weight"]
    assert np.any(after != before)


def test_dice_only_joint_run_matches_stage_one(tiny_pipeline, subjects):
    """Zero weights on MSE and BCE give the stage-one Dice trajectory."""
    dice_only = replace(
        _with_train(tiny_pipeline, strategy="end2end", joint_epochs=1),
        weights=LossWeights(end_to_end=(1.0, 0.0, 0.0)),
    )
    joint = train(subjects, dice_only, seed=4)
    staged = train(subjects, _with_train(tiny_pipeline, seg_epochs=1), seed=4)
    assert joint.log[0].seg_loss == pytest.approx(
        staged.log[0].seg_loss,
        rel=1e-6,
    )


def test_end_to_end_loss_decreases(tiny_pipeline, subjects):
    """Twenty joint epochs on phantoms lower the total loss."""
    config = _with_train(tiny_pipeline, strategy="end2end", joint_epochs=20)
    log = train(subjects, config).log
    assert len(log) == 20
    assert log[-1].total_loss < log[0].total_loss


def _overfit_config(pipeline, strategy):
    drunet = DrUnetConfig(
        base_filters=16,
        depth=2,
        dilations=(1, 2, 4, 8),
        input_size=32,
    )
    return replace(
        _with_train(
            pipeline,
            strategy=strategy,
            seg_epochs=300,
            stmt_epochs=300,
            joint_epochs=300,
        ),
        drunet=drunet,
    )


def _training_dice(result, subjects, pipeline):
    predictions = evaluate_subjects(
        result.models,
        subjects,
        pipeline.preprocess,
        EvalSettings(),
    )
    return build_report(predictions).dice


@pytest.mark.slow()
def test_multistage_overfits_phantoms(tiny_pipeline, subjects):
    """A 16-filter G fits four phantom subjects."""
    config = _overfit_config(tiny_pipeline, "multistage")
    dice = _training_dice(train(subjects, config), subjects, config)
    assert dice["cavity"] > 0.95
    assert dice["myocardium"] > 0.85


@pytest.mark.slow()
def test_end_to_end_matches_multistage_dice(tiny_pipeline, subjects):
    """Joint training segments the cavity about as well as staged training."""
    staged = _overfit_config(tiny_pipeline, "multistage")
    joint = _overfit_config(tiny_pipeline, "end2end")
    staged_dice = _training_dice(train(subjects, staged), subjects, staged)
    joint_dice = _training_dice(train(subjects, joint), subjects, joint)
    assert abs(joint_dice["cavity"] - staged_dice["cavity"]) < 0.03
