"""On-disk subject datasets and offline augmentation.

A dataset directory holds ``manifest.csv`` (subject_id, seed) and one
directory per subject with ``images.cqt``, ``masks.cqt``, ``indices.csv``
and ``meta.json``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from cardioquant.container import read_tensors, write_tensors
from cardioquant.filesystem import read_csv, read_json, write_csv, write_json
from cardioquant.geometry import (
    GeometryError,
    IndexVector,
    MaskSequence,
    quantify_sequence,
    read_index_csv,
    write_index_csv,
)
from cardioquant.imaging import AugmentSettings, CineSequence, augment
from cardioquant.phantom import PhantomSample

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
IMAGES = "images.cqt"
MASKS = "masks.cqt"
INDICES = "indices.csv"
META = "meta.json"


@dataclass
class Subject:
    """Images, masks and ground-truth indices of one subject."""

    subject_id: str
    sequence: CineSequence
    masks: MaskSequence
    indices: list[IndexVector]
    seed: int | None = None
    meta: dict[str, Any] | None = None

    @property
    def pixel_spacing(self) -> float:
        return self.masks.pixel_spacing

    @classmethod
    def from_phantom(cls, sample: PhantomSample) -> Subject:
        """Wrap a rendered phantom, keeping its parameters as metadata."""
        params = sample.params
        return cls(
            subject_id=sample.sequence.subject_id,
            sequence=sample.sequence,
            masks=sample.masks,
            indices=sample.indices,
            seed=None if params is None else params.seed,
            meta=None if params is None else {"phantom": asdict(params)},
        )


def write_subject(directory: os.PathLike[str] | str, subject: Subject):
    """Write one subject directory."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    write_tensors(path / IMAGES, {"images": subject.sequence.frames})
    write_tensors(path / MASKS, {"masks": subject.masks.labels})
    write_index_csv(path / INDICES, subject.indices)
    frames, height, width = subject.masks.labels.shape
    write_json(
        path / META,
        {
            "subject_id": subject.subject_id,
            "pixel_spacing": subject.pixel_spacing,
            "seed": subject.seed,
            "frames": frames,
            "height": height,
            "width": width,
            **(subject.meta or {}),
        },
    )


def read_subject(directory: os.PathLike[str] | str) -> Subject:
    """Read one subject directory written by :func:`write_subject`."""
    path = Path(directory)
    meta = read_json(path / META)
    spacing = float(meta["pixel_spacing"])
    images = read_tensors(path / IMAGES)["images"]
    labels = read_tensors(path / MASKS)["masks"]
    return Subject(
        subject_id=meta["subject_id"],
        sequence=CineSequence(
            frames=images,
            pixel_spacing=spacing,
            subject_id=meta["subject_id"],
        ),
        masks=MaskSequence(labels=np.rint(labels), pixel_spacing=spacing),
        indices=read_index_csv(path / INDICES),
        seed=meta.get("seed"),
        meta=meta,
    )


def write_dataset(
    directory: os.PathLike[str] | str,
    subjects: list[Subject],
) -> Path:
    """Write every subject plus the manifest."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    for subject in subjects:
        write_subject(path / subject.subject_id, subject)
    write_csv(
        path / MANIFEST,
        ("subject_id", "seed"),
        ((subject.subject_id, subject.seed) for subject in subjects),
    )
    return path


def load_dataset(directory: os.PathLike[str] | str) -> list[Subject]:
    """Read the subjects listed in a dataset manifest, in manifest order.

    Raises
    ------
    DatasetError
        If the manifest or a listed subject directory is missing.
    """
    path = Path(directory)
    if not (path / MANIFEST).is_file():
        msg = f"No {MANIFEST} in dataset directory {path}"
        raise DatasetError(msg)
    subjects = []
    for row in read_csv(path / MANIFEST):
        subject_dir = path / row["subject_id"]
        if not subject_dir.is_dir():
            msg = f"Manifest lists {subject_dir} but it does not exist"
            raise DatasetError(msg)
        subjects.append(read_subject(subject_dir))
    logger.info("Loaded %d subjects from %s", len(subjects), path)
    return subjects


def augment_dataset(
    subjects: list[Subject],
    rng: np.random.Generator,
    settings: AugmentSettings | None = None,
) -> list[Subject]:
    """Expand a training set ``settings.factor`` times.

    Originals are kept; every extra copy gets a random transform and its
    indices recomputed by the geometry oracle. Copies whose masks no longer
    yield indices (e.g. a ring broken at the border) are dropped.
    """
    settings = settings or AugmentSettings()
    expanded = []
    for subject in subjects:
        expanded.append(subject)
        for copy in range(1, settings.factor):
            frames, labels, record = augment(
                subject.sequence.frames,
                subject.masks.labels,
                rng,
                settings,
            )
            copy_id = f"{subject.subject_id}-aug{copy}"
            masks = MaskSequence(
                labels=labels,
                pixel_spacing=subject.pixel_spacing,
            )
            try:
                indices = quantify_sequence(masks)
            except GeometryError as err:
                logger.warning("Dropping augmented copy %s: %s", copy_id, err)
                continue
            expanded.append(
                Subject(
                    subject_id=copy_id,
                    sequence=CineSequence(
                        frames=frames,
                        pixel_spacing=subject.pixel_spacing,
                        subject_id=copy_id,
                    ),
                    masks=masks,
                    indices=indices,
                    seed=subject.seed,
                    meta={"augment": asdict(record)},
                ),
            )
    return expanded


class DatasetError(Exception):
    """Exception raised when a dataset directory cannot be read."""
