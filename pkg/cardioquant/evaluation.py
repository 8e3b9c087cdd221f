"""Cross-validation protocol, pipeline inference and metric reports."""
from __future__ import annotations

import logging
import math
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from cardioquant.dataset import Subject
from cardioquant.filesystem import read_csv, write_csv
from cardioquant.geometry import (
    CAVITY,
    INDEX_GROUPS,
    INDEX_NAMES,
    MYOCARDIUM,
    clean_labels,
    denormalize_targets,
    stack_indices,
    unscale_targets,
)
from cardioquant.imaging import PreprocessSettings, preprocess_sequence
from cardioquant.metrics import (
    MetricError,
    bland_altman,
    dice_score,
    error_rate,
    hausdorff,
    mae_std,
    pcc,
)
from cardioquant.networks import (
    forward_multitask,
    forward_segmentation,
    hard_masks,
)
from cardioquant.training import (
    PipelineConfig,
    PipelineModels,
    save_models,
    train,
    write_training_log,
)

logger = logging.getLogger(__name__)

CLASS_NAMES = {CAVITY: "cavity", MYOCARDIUM: "myocardium"}
GROUP_UNITS = {"areas": "mm2", "dimensions": "mm", "rwt": "mm"}
PHASE_THRESHOLD = 0.5
METRICS_HEADER = ("metric", "target", "value")
CURVES_HEADER = (
    "subject_id",
    "frame",
    *(f"{name}_{kind}" for name in INDEX_NAMES for kind in ("true", "pred")),
    "phase_true",
    "phase_pred",
)


@dataclass(frozen=True)
class EvalSettings:
    """Options of the evaluation protocol."""

    folds: int = 5
    workers: int = 1
    cca: bool = True
    connectivity: int = 8

    def __post_init__(self):
        """Validate counts."""
        if self.folds < 2:  # noqa: PLR2004
            msg = f"Cross-validation needs at least 2 folds, got {self.folds}"
            raise FoldError(msg)
        if self.workers < 1:
            msg = f"workers must be >= 1, got {self.workers}"
            raise FoldError(msg)
        if self.connectivity not in (4, 8):  # noqa: PLR2004
            msg = f"connectivity must be 4 or 8, got {self.connectivity}"
            raise FoldError(msg)


@dataclass(frozen=True)
class FoldSplit:
    """Disjoint test folds covering every subject once."""

    folds: tuple[tuple[str, ...], ...]

    def test_ids(self, fold: int) -> tuple[str, ...]:
        return self.folds[fold]

    def train_ids(self, fold: int) -> tuple[str, ...]:
        return tuple(
            subject
            for index, ids in enumerate(self.folds)
            if index != fold
            for subject in ids
        )


def kfold_split(subject_ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    """Shuffle subjects and cut them into ``k`` near-equal folds.

    The first ``len(ids) % k`` folds get one extra subject.

    Raises
    ------
    FoldError
        If ``k <= 0``, ``k`` exceeds the subject count or ids repeat.
    """
    ids = list(subject_ids)
    if k <= 0:
        msg = f"Fold count must be positive, got {k}"
        raise FoldError(msg)
    if k > len(ids):
        msg = f"Cannot make {k} folds from {len(ids)} subjects"
        raise FoldError(msg)
    if len(set(ids)) != len(ids):
        msg = "Subject ids must be unique"
        raise FoldError(msg)
    order = np.random.default_rng(seed).permutation(len(ids))
    base, extra = divmod(len(ids), k)
    folds = []
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        folds.append(tuple(ids[i] for i in order[start : start + size]))
        start += size
    return FoldSplit(folds=tuple(folds))


@dataclass
class SubjectPrediction:
    """Per-frame predictions and ground truth of one subject."""

    subject_id: str
    true_indices: np.ndarray
    pred_indices: np.ndarray
    true_phases: np.ndarray
    pred_phases: np.ndarray
    dice: dict[str, np.ndarray]
    hausdorff: dict[str, np.ndarray]


def predict_subject(
    models: PipelineModels,
    subject: Subject,
    preprocess: PreprocessSettings,
    settings: EvalSettings,
) -> SubjectPrediction:
    """Run G (plus optional CCA) and D on one subject and score the masks."""
    if models.quantifier is None or models.stats is None:
        msg = "Evaluation needs a quantifier network and normalisation stats"
        raise FoldError(msg)
    images = preprocess_sequence(subject.sequence, preprocess).frames
    labels = forward_segmentation(models.segmenter, images).hard_labels
    if settings.cca:
        labels = np.stack(
            [clean_labels(frame, settings.connectivity) for frame in labels],
        )
    truth = subject.masks.labels
    spacing = subject.pixel_spacing
    dice: dict[str, list[float]] = {name: [] for name in CLASS_NAMES.values()}
    distances: dict[str, list[float]] = {
        name: [] for name in CLASS_NAMES.values()
    }
    for frame, (pred_frame, true_frame) in enumerate(zip(labels, truth)):
        for label, name in CLASS_NAMES.items():
            dice[name].append(dice_score(pred_frame, true_frame, label))
            try:
                distances[name].append(
                    hausdorff(pred_frame, true_frame, label, spacing),
                )
            except MetricError as err:
                logger.warning(
                    "%s frame %d: %s; recording NaN",
                    subject.subject_id,
                    frame,
                    err,
                )
                distances[name].append(math.nan)

    normalized, logits = forward_multitask(
        models.quantifier,
        np.moveaxis(hard_masks(labels)[:, 1:], 1, -1),
    )
    predicted = unscale_targets(
        denormalize_targets(normalized, models.stats),
        spacing,
        models.image_side,
    )
    true_values, true_phases = stack_indices(subject.indices)
    return SubjectPrediction(
        subject_id=subject.subject_id,
        true_indices=true_values,
        pred_indices=predicted,
        true_phases=true_phases,
        pred_phases=(expit(logits[:, 0]) >= PHASE_THRESHOLD).astype(np.int64),
        dice={name: np.array(v) for name, v in dice.items()},
        hausdorff={name: np.array(v) for name, v in distances.items()},
    )


def evaluate_subjects(
    models: PipelineModels,
    subjects: Sequence[Subject],
    preprocess: PreprocessSettings,
    settings: EvalSettings,
) -> list[SubjectPrediction]:
    """Predict every subject; see :func:`build_report` for the metrics."""
    return [
        predict_subject(models, subject, preprocess, settings)
        for subject in subjects
    ]


@dataclass
class MetricsReport:
    """Aggregate metrics over every evaluated frame.

    ``mae`` maps index and group names to ``(mean, std)`` of the absolute
    error, ``pcc`` maps index names to correlations, ``dice`` and
    ``hausdorff`` map class names to frame averages and ``bland_altman``
    maps group names to ``(bias, loa_low, loa_high)``.
    """

    mae: dict[str, tuple[float, float]] = field(default_factory=dict)
    pcc: dict[str, float] = field(default_factory=dict)
    error_rate: float = math.nan
    dice: dict[str, float] = field(default_factory=dict)
    hausdorff: dict[str, float] = field(default_factory=dict)
    bland_altman: dict[str, tuple[float, float, float]] = field(
        default_factory=dict,
    )

    def rows(self) -> list[tuple[str, str, float]]:
        """Flatten into ``(metric, target, value)`` CSV rows."""
        rows = []
        for target, (mean, std) in self.mae.items():
            rows.append(("mae_mean", target, mean))
            rows.append(("mae_std", target, std))
        rows.extend(
            ("pcc", target, value) for target, value in self.pcc.items()
        )
        rows.append(("error_rate", "phase", self.error_rate))
        rows.extend(("dice", name, value) for name, value in self.dice.items())
        rows.extend(
            ("hausdorff", name, value)
            for name, value in self.hausdorff.items()
        )
        for group, (bias, low, high) in self.bland_altman.items():
            rows.append(("ba_bias", group, bias))
            rows.append(("ba_loa_low", group, low))
            rows.append(("ba_loa_high", group, high))
        return rows

    @classmethod
    def from_rows(cls, rows: Sequence[dict[str, str]]) -> MetricsReport:
        """Rebuild a report from rows read back from ``metrics.csv``."""
        report = cls()
        mae: dict[str, dict[str, float]] = {}
        agreement: dict[str, dict[str, float]] = {}
        for row in rows:
            metric, target = row["metric"], row["target"]
            value = float(row["value"]) if row["value"] else math.nan
            if metric in ("mae_mean", "mae_std"):
                mae.setdefault(target, {})[metric] = value
            elif metric.startswith("ba_"):
                agreement.setdefault(target, {})[metric] = value
            elif metric == "pcc":
                report.pcc[target] = value
            elif metric == "error_rate":
                report.error_rate = value
            elif metric == "dice":
                report.dice[target] = value
            elif metric == "hausdorff":
                report.hausdorff[target] = value
            else:
                msg = f"Unknown metric {metric!r} in metrics file"
                raise MetricError(msg)
        report.mae = {
            target: (values["mae_mean"], values["mae_std"])
            for target, values in mae.items()
        }
        report.bland_altman = {
            group: (
                values["ba_bias"],
                values["ba_loa_low"],
                values["ba_loa_high"],
            )
            for group, values in agreement.items()
        }
        return report


def _safe_pcc(pred: np.ndarray, truth: np.ndarray, name: str) -> float:
    try:
        return pcc(pred, truth)
    except MetricError as err:
        logger.warning("PCC of %s undefined (%s); recording NaN", name, err)
        return math.nan


def build_report(predictions: Sequence[SubjectPrediction]) -> MetricsReport:
    """Pool every frame of every subject into one report."""
    if not predictions:
        msg = "No predictions to report on"
        raise MetricError(msg)
    truth = np.concatenate([p.true_indices for p in predictions])
    pred = np.concatenate([p.pred_indices for p in predictions])
    report = MetricsReport()
    for column, name in enumerate(INDEX_NAMES):
        report.mae[name] = mae_std(pred[:, column], truth[:, column])
        report.pcc[name] = _safe_pcc(pred[:, column], truth[:, column], name)
    for group, names in INDEX_GROUPS.items():
        columns = [INDEX_NAMES.index(name) for name in names]
        report.mae[group] = mae_std(pred[:, columns], truth[:, columns])
        report.bland_altman[group] = bland_altman(
            pred[:, columns],
            truth[:, columns],
        )
    report.error_rate = error_rate(
        np.concatenate([p.pred_phases for p in predictions]),
        np.concatenate([p.true_phases for p in predictions]),
    )
    for name in CLASS_NAMES.values():
        report.dice[name] = float(
            np.mean(np.concatenate([p.dice[name] for p in predictions])),
        )
        distances = np.concatenate([p.hausdorff[name] for p in predictions])
        report.hausdorff[name] = (
            float(np.nanmean(distances))
            if np.any(~np.isnan(distances))
            else math.nan
        )
    return report


def render_summary(report: MetricsReport) -> str:
    """Human-readable summary laid out like a results table."""
    lines = [f"{'Index':<18}{'MAE':>22}{'PCC':>10}"]
    for group, names in INDEX_GROUPS.items():
        label = f"{group.capitalize()} ({GROUP_UNITS[group]})"
        mean, std = report.mae.get(group, (math.nan, math.nan))
        lines.append(f"{label:<18}{mean:>12.3f} ± {std:<7.3f}")
        for name in names:
            mean, std = report.mae.get(name, (math.nan, math.nan))
            lines.append(
                f"  {name:<16}{mean:>12.3f} ± {std:<7.3f}"
                f"{report.pcc.get(name, math.nan):>10.3f}",
            )
    lines.append(f"{'Phase ER (%)':<18}{report.error_rate:>12.1f}")
    lines.append("")
    lines.append(f"{'Class':<18}{'Dice':>12}{'HD (mm)':>12}")
    for name in CLASS_NAMES.values():
        lines.append(
            f"{name:<18}{report.dice.get(name, math.nan):>12.3f}"
            f"{report.hausdorff.get(name, math.nan):>12.3f}",
        )
    lines.append("")
    lines.append(
        f"{'Bland-Altman':<18}{'bias':>12}{'LoA low':>12}{'LoA high':>12}",
    )
    for group, (bias, low, high) in report.bland_altman.items():
        lines.append(f"{group:<18}{bias:>12.3f}{low:>12.3f}{high:>12.3f}")
    return "\n".join(lines) + "\n"


def write_metrics(out_dir: os.PathLike[str] | str, report: MetricsReport):
    """Write ``metrics.csv`` and ``summary.txt``."""
    out = Path(out_dir)
    write_csv(out / "metrics.csv", METRICS_HEADER, report.rows())
    with open(out / "summary.txt", "w", encoding="utf-8") as summary_file:
        summary_file.write(render_summary(report))


def read_metrics(path: os.PathLike[str] | str) -> MetricsReport:
    """Load a report from a ``metrics.csv`` file or its run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    return MetricsReport.from_rows(read_csv(path))


def write_curves(
    path: os.PathLike[str] | str,
    predictions: Sequence[SubjectPrediction],
):
    """One row per subject frame with true and predicted values."""
    rows = []
    for prediction in predictions:
        for frame in range(prediction.true_indices.shape[0]):
            values = []
            for column in range(len(INDEX_NAMES)):
                values.append(prediction.true_indices[frame, column])
                values.append(prediction.pred_indices[frame, column])
            rows.append(
                (
                    prediction.subject_id,
                    frame,
                    *values,
                    prediction.true_phases[frame],
                    prediction.pred_phases[frame],
                ),
            )
    write_csv(path, CURVES_HEADER, rows)


def write_evaluation(
    out_dir: os.PathLike[str] | str,
    predictions: Sequence[SubjectPrediction],
) -> MetricsReport:
    """Write metrics, summary and curves for a set of predictions."""
    report = build_report(predictions)
    write_metrics(out_dir, report)
    write_curves(Path(out_dir) / "curves.csv", predictions)
    return report


def run_fold(
    fold: int,
    split: FoldSplit,
    subjects: dict[str, Subject],
    config: PipelineConfig,
    settings: EvalSettings,
    seed: np.random.SeedSequence,
    out_dir: Path,
) -> list[SubjectPrediction]:
    """Train on all other folds, evaluate on ``fold``, write its outputs."""
    logger.info(
        "Fold %d: training on %d subjects, testing on %d",
        fold,
        len(split.train_ids(fold)),
        len(split.test_ids(fold)),
    )
    fold_dir = out_dir / f"fold-{fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    result = train([subjects[i] for i in split.train_ids(fold)], config, seed)
    save_models(fold_dir, result)
    write_training_log(fold_dir / "train_log.csv", result.log)
    predictions = evaluate_subjects(
        result.models,
        [subjects[i] for i in split.test_ids(fold)],
        config.preprocess,
        settings,
    )
    report = write_evaluation(fold_dir, predictions)
    logger.info(
        "Fold %d finished: cavity Dice %.4f, phase ER %.1f%%",
        fold,
        report.dice["cavity"],
        report.error_rate,
    )
    return predictions


def cross_validate(
    subjects: Sequence[Subject],
    config: PipelineConfig,
    settings: EvalSettings,
    out_dir: os.PathLike[str] | str,
) -> MetricsReport:
    """K-fold protocol: per-fold outputs plus an aggregate report.

    Folds get independent seed streams spawned from the run seed, so the
    result does not depend on how many worker threads run them.
    """
    out = Path(out_dir)
    by_id = {subject.subject_id: subject for subject in subjects}
    split = kfold_split(
        [subject.subject_id for subject in subjects],
        settings.folds,
        config.train.seed,
    )
    seeds = np.random.SeedSequence(config.train.seed).spawn(settings.folds)
    with ThreadPoolExecutor(max_workers=settings.workers) as executor:
        futures = [
            executor.submit(
                run_fold,
                fold,
                split,
                by_id,
                config,
                settings,
                seeds[fold],
                out,
            )
            for fold in range(settings.folds)
        ]
        predictions = [p for future in futures for p in future.result()]
    write_csv(
        out / "folds.csv",
        ("fold", "subject_id"),
        (
            (fold, subject)
            for fold, ids in enumerate(split.folds)
            for subject in ids
        ),
    )
    return write_evaluation(out, predictions)


class FoldError(Exception):
    """Exception raised for an invalid evaluation protocol."""
