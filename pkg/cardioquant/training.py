"""Multi-stage and end-to-end training of the quantification pipeline."""
from __future__ import annotations

import logging
import math
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cardioquant.dataset import Subject, augment_dataset
from cardioquant.filesystem import write_csv
from cardioquant.geometry import (
    NormalizationStats,
    compute_normalization_stats,
    normalize_targets,
    scale_targets,
    stack_indices,
)
from cardioquant.imaging import (
    AugmentSettings,
    PreprocessSettings,
    preprocess_sequence,
)
from cardioquant.losses import (
    LossWeights,
    bce_loss,
    end_to_end_loss,
    mse_loss,
    multitask_loss,
    soft_dice_loss,
)
from cardioquant.networks import (
    DrUnet,
    DrUnetConfig,
    SpatioTemporalNet,
    StmtConfig,
    build_drunet,
    build_stmt,
    forward_segmentation,
    frame_probabilities,
    hard_masks,
    load_checkpoint,
    multitask_input,
    save_checkpoint,
    segmentation_input,
)
from cardioquant.optim import AdamState, adam_step
from cardioquant.tensor import ComputationGraph, Tensor, backward, sigmoid

logger = logging.getLogger(__name__)

STRATEGIES = ("multistage", "end2end")
PRECISIONS = {"float32": np.float32, "float64": np.float64}
LOG_HEADER = (
    "epoch",
    "seg_loss",
    "mse_loss",
    "bce_loss",
    "total_loss",
    "wall_seconds",
)
SEGMENTER = "segmenter"
QUANTIFIER = "quantifier"
CHECKPOINT_FILES = {
    "multistage": ("segmenter.cqt", "quantifier.cqt"),
    "end2end": ("joint.cqt",),
}


@dataclass(frozen=True)
class TrainSettings:
    """Optimisation schedule of one training run.

    Attributes
    ----------
    strategy
        ``"multistage"`` (G, then D on G's hard masks) or ``"end2end"``.

    seg_epochs, stmt_epochs
        Epochs of the two multi-stage stages.

    joint_epochs
        Epochs of end-to-end training.

    seg_lr, stmt_lr
        Adam learning rates of G and D (used by both strategies).

    augment_factor
        Training set expansion by random transforms; 1 disables it.

    wall_time
        Record elapsed seconds in the log; disable for byte-identical logs.

    precision
        ``"float32"`` or ``"float64"`` parameters.

    seed
        Root seed of every random stream of the run.
    """

    strategy: str = "multistage"
    seg_epochs: int = 300
    stmt_epochs: int = 300
    joint_epochs: int = 300
    seg_lr: float = 1e-4
    stmt_lr: float = 4e-3
    augment_factor: int = 1
    wall_time: bool = True
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        """Validate the schedule."""
        if self.strategy not in STRATEGIES:
            msg = (
                f"strategy must be one of {STRATEGIES}, "
                f"got {self.strategy!r}"
            )
            raise TrainingError(msg)
        if self.precision not in PRECISIONS:
            msg = f"precision must be one of {tuple(PRECISIONS)}"
            raise TrainingError(msg)
        if min(self.seg_epochs, self.stmt_epochs, self.joint_epochs) < 0:
            msg = "Epoch counts must be >= 0"
            raise TrainingError(msg)
        if self.augment_factor < 1:
            msg = "augment_factor must be >= 1"
            raise TrainingError(msg)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a training or evaluation run is parameterised by."""

    drunet: DrUnetConfig = field(default_factory=DrUnetConfig)
    stmt: StmtConfig = field(default_factory=StmtConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainSettings = field(default_factory=TrainSettings)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    augment: AugmentSettings = field(default_factory=AugmentSettings)


@dataclass
class RandomStreams:
    """Independent generators for every random decision of a run."""

    segmenter_init: np.random.Generator
    quantifier_init: np.random.Generator
    augmentation: np.random.Generator
    order: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int | np.random.SeedSequence) -> RandomStreams:
        sequence = (
            seed
            if isinstance(seed, np.random.SeedSequence)
            else np.random.SeedSequence(seed)
        )
        return cls(*(np.random.default_rng(s) for s in sequence.spawn(4)))


@dataclass
class TrainingSample:
    """One subject arranged for the networks."""

    subject_id: str
    images: np.ndarray
    onehot: np.ndarray
    targets: np.ndarray
    phases: np.ndarray
    pixel_spacing: float


@dataclass
class PipelineModels:
    """Trained networks plus what is needed to read their outputs."""

    segmenter: DrUnet
    quantifier: SpatioTemporalNet | None = None
    stats: NormalizationStats | None = None
    image_side: int = 80

    def extras(self) -> dict[str, np.ndarray]:
        """Normalisation tensors stored next to the quantifier."""
        if self.stats is None:
            return {}
        return {
            "stats/mean": self.stats.mean,
            "stats/std": self.stats.std,
            "scaling/image_side": np.array(self.image_side),
        }


@dataclass
class LogRow:
    """Losses of one epoch; unused losses stay ``None``."""

    epoch: int
    seg_loss: float | None = None
    mse_loss: float | None = None
    bce_loss: float | None = None
    total_loss: float | None = None
    wall_seconds: float | None = None

    def as_row(self) -> tuple:
        return (
            self.epoch,
            self.seg_loss,
            self.mse_loss,
            self.bce_loss,
            self.total_loss,
            self.wall_seconds,
        )


@dataclass
class TrainingResult:
    """Models and per-epoch log of one run."""

    models: PipelineModels
    log: list[LogRow]
    strategy: str


def image_side(subjects: Sequence[Subject]) -> int:
    """Common square image side of a set of subjects."""
    sides = {subject.masks.labels.shape[-1] for subject in subjects}
    heights = {subject.masks.labels.shape[-2] for subject in subjects}
    if len(sides) != 1 or sides != heights:
        msg = "Subjects must share one square image size"
        raise TrainingError(msg)
    return sides.pop()


def scaled_targets(subject: Subject, side: int) -> np.ndarray:
    """Image-relative (but not yet z-scored) index matrix of a subject."""
    values, _ = stack_indices(subject.indices)
    return scale_targets(values, subject.pixel_spacing, side)


def fit_stats(subjects: Sequence[Subject], side: int) -> NormalizationStats:
    """Z-score statistics over every frame of the training subjects.

    Values are rounded to float32 so statistics restored from a checkpoint
    equal the ones used in training.
    """
    matrix = np.concatenate([scaled_targets(s, side) for s in subjects])
    stats = compute_normalization_stats(matrix)
    return NormalizationStats(
        mean=stats.mean.astype(np.float32).astype(np.float64),
        std=stats.std.astype(np.float32).astype(np.float64),
    )


def prepare_samples(
    subjects: Sequence[Subject],
    stats: NormalizationStats,
    side: int,
    preprocess: PreprocessSettings,
) -> list[TrainingSample]:
    """Preprocess images and normalise targets of every subject."""
    samples = []
    for subject in subjects:
        _, phases = stack_indices(subject.indices)
        samples.append(
            TrainingSample(
                subject_id=subject.subject_id,
                images=preprocess_sequence(
                    subject.sequence,
                    preprocess,
                ).frames,
                onehot=hard_masks(subject.masks.labels),
                targets=normalize_targets(
                    scaled_targets(subject, side),
                    stats,
                ),
                phases=phases,
                pixel_spacing=subject.pixel_spacing,
            ),
        )
    return samples


def _named_grads(params, grads) -> dict[str, np.ndarray]:
    return {name: grads[param] for name, param in params.items()}


def _check_finite(value: float, epoch: int, what: str):
    if not math.isfinite(value):
        msg = f"{what} loss diverged (value {value}) at epoch {epoch}"
        raise TrainingError(msg)


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed(self) -> float | None:
        return time.perf_counter() - self.start if self.enabled else None


def _multitask_terms(
    quantifier: SpatioTemporalNet,
    masks: Tensor,
    sample: TrainingSample,
) -> tuple[Tensor, Tensor]:
    indices, logits = quantifier(multitask_input(masks))
    mse = mse_loss(indices[0], sample.targets)
    bce = bce_loss(sigmoid(logits[0]), sample.phases)
    return mse, bce


def segmentation_step(
    segmenter: DrUnet,
    sample: TrainingSample,
    weights: LossWeights,
    adam: AdamState,
) -> float:
    """One Adam step of G on the Dice objective; returns the loss."""
    params = segmenter.parameters()
    with ComputationGraph() as graph:
        probs = frame_probabilities(
            segmenter,
            segmenter(segmentation_input(segmenter, sample.images)),
        )
        loss = soft_dice_loss(probs, sample.onehot, weights, class_axis=1)
    grads = backward(graph, loss, params.values())
    adam_step(params, _named_grads(params, grads), adam)
    return loss.item()


def quantifier_step(
    quantifier: SpatioTemporalNet,
    masks: np.ndarray,
    sample: TrainingSample,
    weights: LossWeights,
    adam: AdamState,
) -> tuple[float, float, float]:
    """One Adam step of D on the multi-task objective.

    Returns ``(mse, bce, total)``.
    """
    params = quantifier.parameters()
    dtype = next(iter(params.values())).dtype
    with ComputationGraph() as graph:
        mse, bce = _multitask_terms(
            quantifier,
            Tensor(masks, dtype=dtype),
            sample,
        )
        total = multitask_loss(mse, bce, weights)
    grads = backward(graph, total, params.values())
    adam_step(params, _named_grads(params, grads), adam)
    return mse.item(), bce.item(), total.item()


def joint_step(
    segmenter: DrUnet,
    quantifier: SpatioTemporalNet,
    sample: TrainingSample,
    weights: LossWeights,
    adams: tuple[AdamState, AdamState],
) -> tuple[float, float, float, float]:
    """One step of both networks on the end-to-end objective.

    D consumes G's soft cavity and myocardium probabilities so gradients
    reach G through the mask pathway. Returns ``(dice, mse, bce, total)``.
    """
    seg_params = segmenter.parameters()
    quant_params = quantifier.parameters()
    with ComputationGraph() as graph:
        probs = frame_probabilities(
            segmenter,
            segmenter(segmentation_input(segmenter, sample.images)),
        )
        dice = soft_dice_loss(probs, sample.onehot, weights, class_axis=1)
        mse, bce = _multitask_terms(quantifier, probs[:, 1:], sample)
        total = end_to_end_loss(dice, mse, bce, weights)
    grads = backward(
        graph,
        total,
        [*seg_params.values(), *quant_params.values()],
    )
    adam_step(seg_params, _named_grads(seg_params, grads), adams[0])
    adam_step(quant_params, _named_grads(quant_params, grads), adams[1])
    return dice.item(), mse.item(), bce.item(), total.item()


def segmenter_masks(segmenter: DrUnet, images: np.ndarray) -> np.ndarray:
    """Hard cavity/myocardium channels ``(T, 2, H, W)`` predicted by G."""
    labels = forward_segmentation(segmenter, images).hard_labels
    return hard_masks(labels)[:, 1:]


def _epochs(
    count: int,
    start: int,
    samples: Sequence[TrainingSample],
    rng: np.random.Generator,
    step: Callable[[TrainingSample], tuple[float, ...]],
    row: Callable[[int, np.ndarray], LogRow],
    clock: _Clock,
    stage: str,
) -> list[LogRow]:
    rows = []
    for epoch in range(start, start + count):
        losses = np.array(
            [step(samples[i]) for i in rng.permutation(len(samples))],
        ).mean(axis=0)
        for value in np.atleast_1d(losses):
            _check_finite(float(value), epoch, stage)
        log_row = row(epoch, np.atleast_1d(losses))
        log_row.wall_seconds = clock.elapsed()
        logger.info(
            "%s epoch %d: total loss %.6g",
            stage,
            epoch,
            log_row.total_loss,
        )
        rows.append(log_row)
    return rows


def _setup(
    subjects: Sequence[Subject],
    config: PipelineConfig,
    seed: int | np.random.SeedSequence | None,
) -> tuple[RandomStreams, list[TrainingSample], NormalizationStats, int, type]:
    if not subjects:
        msg = "Training needs at least one subject"
        raise TrainingError(msg)
    streams = RandomStreams.from_seed(
        config.train.seed if seed is None else seed,
    )
    side = image_side(subjects)
    expanded = list(subjects)
    if config.train.augment_factor > 1:
        expanded = augment_dataset(
            expanded,
            streams.augmentation,
            replace(config.augment, factor=config.train.augment_factor),
        )
        logger.info(
            "Augmented %d subjects to %d training sequences",
            len(subjects),
            len(expanded),
        )
    stats = fit_stats(expanded, side)
    samples = prepare_samples(expanded, stats, side, config.preprocess)
    dtype = PRECISIONS[config.train.precision]
    return streams, samples, stats, side, dtype


def train_multistage(
    subjects: Sequence[Subject],
    config: PipelineConfig,
    seed: int | np.random.SeedSequence | None = None,
) -> TrainingResult:
    """Train G on Dice, freeze it, then train D on G's hard masks.

    Raises
    ------
    TrainingError
        If a loss becomes non-finite (the message names the epoch).
    """
    streams, samples, stats, side, dtype = _setup(subjects, config, seed)
    settings = config.train
    segmenter = build_drunet(config.drunet, streams.segmenter_init, dtype)
    quantifier = build_stmt(config.stmt, streams.quantifier_init, dtype)
    clock = _Clock(settings.wall_time)

    seg_adam = AdamState(lr=settings.seg_lr)
    segmenter.train()
    log = _epochs(
        settings.seg_epochs,
        1,
        samples,
        streams.order,
        lambda s: (segmentation_step(segmenter, s, config.weights, seg_adam),),
        lambda epoch, losses: LogRow(
            epoch,
            seg_loss=float(losses[0]),
            total_loss=float(losses[0]),
        ),
        clock,
        "segmentation",
    )

    segmenter.eval()
    masks = {
        s.subject_id: segmenter_masks(segmenter, s.images) for s in samples
    }
    stmt_adam = AdamState(
        lr=settings.stmt_lr,
        weight_decay=config.stmt.weight_decay,
    )
    quantifier.train()
    log += _epochs(
        settings.stmt_epochs,
        len(log) + 1,
        samples,
        streams.order,
        lambda s: quantifier_step(
            quantifier,
            masks[s.subject_id],
            s,
            config.weights,
            stmt_adam,
        ),
        lambda epoch, losses: LogRow(
            epoch,
            mse_loss=float(losses[0]),
            bce_loss=float(losses[1]),
            total_loss=float(losses[2]),
        ),
        clock,
        "multi-task",
    )
    quantifier.eval()
    return TrainingResult(
        models=PipelineModels(segmenter, quantifier, stats, side),
        log=log,
        strategy="multistage",
    )


def train_end_to_end(
    subjects: Sequence[Subject],
    config: PipelineConfig,
    seed: int | np.random.SeedSequence | None = None,
) -> TrainingResult:
    """Train G and D jointly on the end-to-end objective.

    Raises
    ------
    TrainingError
        If a loss becomes non-finite (the message names the epoch).
    """
    streams, samples, stats, side, dtype = _setup(subjects, config, seed)
    settings = config.train
    segmenter = build_drunet(config.drunet, streams.segmenter_init, dtype)
    quantifier = build_stmt(config.stmt, streams.quantifier_init, dtype)
    adams = (
        AdamState(lr=settings.seg_lr),
        AdamState(lr=settings.stmt_lr, weight_decay=config.stmt.weight_decay),
    )
    segmenter.train()
    quantifier.train()
    log = _epochs(
        settings.joint_epochs,
        1,
        samples,
        streams.order,
        lambda s: joint_step(segmenter, quantifier, s, config.weights, adams),
        lambda epoch, losses: LogRow(
            epoch,
            seg_loss=float(losses[0]),
            mse_loss=float(losses[1]),
            bce_loss=float(losses[2]),
            total_loss=float(losses[3]),
        ),
        clock=_Clock(settings.wall_time),
        stage="end-to-end",
    )
    segmenter.eval()
    quantifier.eval()
    return TrainingResult(
        models=PipelineModels(segmenter, quantifier, stats, side),
        log=log,
        strategy="end2end",
    )


def train(
    subjects: Sequence[Subject],
    config: PipelineConfig,
    seed: int | np.random.SeedSequence | None = None,
) -> TrainingResult:
    """Dispatch on ``config.train.strategy``."""
    if config.train.strategy == "end2end":
        return train_end_to_end(subjects, config, seed)
    return train_multistage(subjects, config, seed)


def write_training_log(path: os.PathLike[str] | str, rows: Sequence[LogRow]):
    """Write the per-epoch loss CSV."""
    write_csv(path, LOG_HEADER, (row.as_row() for row in rows))


def save_models(
    out_dir: os.PathLike[str] | str,
    result: TrainingResult,
) -> list[Path]:
    """Write the checkpoints of a run; returns their paths.

    Multi-stage runs write separate G and D checkpoints, end-to-end runs one
    joint checkpoint. Normalisation statistics travel with D.
    """
    out = Path(out_dir)
    models = result.models
    names = CHECKPOINT_FILES[result.strategy]
    if result.strategy == "multistage":
        save_checkpoint(out / names[0], {SEGMENTER: models.segmenter})
        save_checkpoint(
            out / names[1],
            {QUANTIFIER: models.quantifier},
            models.extras(),
        )
    else:
        save_checkpoint(
            out / names[0],
            {SEGMENTER: models.segmenter, QUANTIFIER: models.quantifier},
            models.extras(),
        )
    return [out / name for name in names]


def load_models(paths: Sequence[os.PathLike[str] | str]) -> PipelineModels:
    """Assemble pipeline models from one or more checkpoints.

    Raises
    ------
    TrainingError
        If no checkpoint holds a segmentation network.
    """
    networks = {}
    extras: dict[str, np.ndarray] = {}
    for path in paths:
        checkpoint = load_checkpoint(path)
        networks.update(checkpoint.networks)
        extras.update(checkpoint.extras)
    segmenter = networks.get(SEGMENTER)
    if not isinstance(segmenter, DrUnet):
        msg = f"No {SEGMENTER} network in checkpoints {list(map(str, paths))}"
        raise TrainingError(msg)
    stats = None
    if "stats/mean" in extras and "stats/std" in extras:
        stats = NormalizationStats(
            mean=extras["stats/mean"].astype(np.float64),
            std=extras["stats/std"].astype(np.float64),
        )
    side = int(extras.get("scaling/image_side", segmenter.config.input_size))
    return PipelineModels(
        segmenter=segmenter,
        quantifier=networks.get(QUANTIFIER),
        stats=stats,
        image_side=side,
    )


class TrainingError(Exception):
    """Exception raised when training cannot proceed."""
