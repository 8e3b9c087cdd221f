"""Compute LV indices and cardiac phases directly from label masks.

Masks label every pixel as background (0), LV cavity (1) or myocardium (2).
Angles are measured counter-clockwise from the image x-axis with the y-axis
pointing up, so a ray at angle ``theta`` from ``(row, col)`` visits
``(row - t * sin(theta), col + t * cos(theta))``.
"""
from __future__ import annotations

import functools
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from cardioquant.filesystem import read_csv, write_csv

logger = logging.getLogger(__name__)

BACKGROUND = 0
CAVITY = 1
MYOCARDIUM = 2
LABELS = (BACKGROUND, CAVITY, MYOCARDIUM)

AREA_NAMES = ("A1", "A2")
DIMENSION_NAMES = ("D1", "D2", "D3")
RWT_NAMES = ("RWT1", "RWT2", "RWT3", "RWT4", "RWT5", "RWT6")
INDEX_NAMES = AREA_NAMES + DIMENSION_NAMES + RWT_NAMES
INDEX_GROUPS = {
    "areas": AREA_NAMES,
    "dimensions": DIMENSION_NAMES,
    "rwt": RWT_NAMES,
}
SECTOR_NAMES = ("IS", "I", "IL", "AL", "A", "AS")
INDEX_CSV_HEADER = ("frame", *INDEX_NAMES, "phase")

DIMENSION_ANGLES = (0.0, 60.0, 120.0)
RAY_COUNT = 60
RAY_STEP = 0.1
SECTOR_START = 90.0
SECTOR_WIDTH = 60.0


@dataclass
class MaskSequence:
    """Per-frame label maps of one subject.

    Attributes
    ----------
    labels
        ``t x h x w`` integer array over {0, 1, 2}.

    pixel_spacing
        Isotropic spacing in mm/pixel.
    """

    labels: np.ndarray
    pixel_spacing: float

    def __post_init__(self):
        """Validate label values and spacing."""
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.labels.ndim != 3:  # noqa: PLR2004
            msg = f"Mask sequence must be t x h x w, got {self.labels.shape}"
            raise GeometryError(msg)
        if not np.all(np.isin(self.labels, LABELS)):
            msg = "Mask labels must be 0, 1 or 2"
            raise GeometryError(msg)
        if not self.pixel_spacing > 0:
            msg = f"Pixel spacing must be positive, got {self.pixel_spacing}"
            raise GeometryError(msg)


@dataclass(frozen=True)
class IndexVector:
    """The 11 physical indices of one frame plus its phase label.

    ``values`` follows ``INDEX_NAMES``: A1, A2 (mm^2), D1..D3 (mm) and
    RWT1..RWT6 (mm) in sector order IS, I, IL, AL, A, AS. ``phase`` is 1 for
    the diastolic (ED) class and 0 for the systolic (ES) class.
    """

    values: tuple[float, ...]
    phase: int

    @property
    def areas(self) -> tuple[float, ...]:
        return self.values[:2]

    @property
    def dimensions(self) -> tuple[float, ...]:
        return self.values[2:5]

    @property
    def thicknesses(self) -> tuple[float, ...]:
        return self.values[5:]


def stack_indices(
    vectors: Sequence[IndexVector],
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(t x 11 values, t phases)`` arrays."""
    values = np.array([vector.values for vector in vectors], dtype=np.float64)
    phases = np.array([vector.phase for vector in vectors], dtype=np.int64)
    return values.reshape(len(vectors), len(INDEX_NAMES)), phases


def unstack_indices(
    values: np.ndarray,
    phases: Sequence[int],
) -> list[IndexVector]:
    """Inverse of :func:`stack_indices`."""
    return [
        IndexVector(tuple(float(v) for v in row), int(phase))
        for row, phase in zip(np.asarray(values), phases)
    ]


def keep_largest_component(
    mask: np.ndarray,
    connectivity: int = 8,
) -> np.ndarray:
    """Keep only the largest connected component of a 2D binary mask.

    Components are labelled in raster order, so on equal sizes the one
    whose first pixel comes first wins.
    """
    if connectivity not in (4, 8):  # noqa: PLR2004
        msg = f"Connectivity must be 4 or 8, got {connectivity}"
        raise GeometryError(msg)
    binary = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(
        2,
        2 if connectivity == 8 else 1,  # noqa: PLR2004
    )
    labelled, count = ndimage.label(binary, structure=structure)
    if count <= 1:
        return binary
    sizes = np.bincount(labelled.ravel())[1:]
    return labelled == (int(np.argmax(sizes)) + 1)


def clean_labels(labels: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Apply largest-component filtering to cavity and myocardium."""
    cleaned = np.zeros_like(labels)
    for label in (CAVITY, MYOCARDIUM):
        cleaned[keep_largest_component(labels == label, connectivity)] = label
    return cleaned


def region_area(mask: np.ndarray, label: int, pixel_spacing: float) -> float:
    """Area in mm^2 of the pixels carrying ``label``."""
    return float(np.count_nonzero(np.asarray(mask) == label)) * (
        pixel_spacing**2
    )


def _centroid(binary: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(binary)
    return float(rows.mean()), float(cols.mean())


def _ray_samples(
    shape: tuple[int, int],
    center: tuple[float, float],
    angles: np.ndarray,
    distances: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-pixel coordinates of rays; returns rows, cols and validity."""
    radians = np.deg2rad(angles)[:, None]
    rows = np.rint(center[0] - distances[None, :] * np.sin(radians))
    cols = np.rint(center[1] + distances[None, :] * np.cos(radians))
    valid = (
        (rows >= 0) & (rows < shape[0]) & (cols >= 0) & (cols < shape[1])
    )
    rows = np.clip(rows, 0, shape[0] - 1).astype(np.int64)
    cols = np.clip(cols, 0, shape[1] - 1).astype(np.int64)
    return rows, cols, valid


def _max_distance(shape: tuple[int, int]) -> float:
    return float(np.hypot(*shape)) + 1.0


def cavity_dimensions(
    mask: np.ndarray,
    pixel_spacing: float,
) -> tuple[float, float, float]:
    """Chord lengths (mm) of the cavity through its centroid at 0, 60, 120°.

    A chord is the extent of ray samples (0.1 px apart) whose nearest pixel
    belongs to the cavity.

    Raises
    ------
    GeometryError
        If the cavity is empty.
    """
    cavity = np.asarray(mask) == CAVITY
    if not cavity.any():
        msg = "Cavity is empty; dimensions are undefined"
        raise GeometryError(msg)
    reach = _max_distance(cavity.shape)
    distances = np.arange(-reach, reach + RAY_STEP / 2, RAY_STEP)
    rows, cols, valid = _ray_samples(
        cavity.shape,
        _centroid(cavity),
        np.asarray(DIMENSION_ANGLES),
        distances,
    )
    inside = valid & cavity[rows, cols]
    chords = []
    for ray in inside:
        hits = distances[ray]
        chords.append(
            float(hits.max() - hits.min()) * pixel_spacing
            if hits.size
            else 0.0,
        )
    return chords[0], chords[1], chords[2]


def sector_of(angle: float | np.ndarray) -> np.ndarray:
    """Sector index (0=IS ... 5=AS) of an angle in degrees."""
    shifted = np.mod(np.asarray(angle) - SECTOR_START, 360.0)
    sectors = np.floor(shifted / SECTOR_WIDTH).astype(np.int64)
    return sectors % len(SECTOR_NAMES)


def regional_wall_thickness(
    mask: np.ndarray,
    pixel_spacing: float,
) -> tuple[float, ...]:
    """Mean wall thickness (mm) in each of the six 60° sectors.

    Sixty rays leave the cavity centroid at 6° steps. On each ray the
    thickness is the distance from the last cavity sample to the last
    myocardium sample.

    Raises
    ------
    GeometryError
        If the cavity or myocardium is empty, or a ray meets no myocardium
        (the message names the gap angle).
    """
    labels = np.asarray(mask)
    cavity = labels == CAVITY
    myocardium = labels == MYOCARDIUM
    if not cavity.any():
        msg = "Cavity is empty; wall thickness is undefined"
        raise GeometryError(msg)
    if not myocardium.any():
        msg = "Myocardium is empty; wall thickness is undefined"
        raise GeometryError(msg)
    angles = np.arange(RAY_COUNT) * (360.0 / RAY_COUNT)
    distances = np.arange(0.0, _max_distance(labels.shape), RAY_STEP)
    rows, cols, valid = _ray_samples(
        labels.shape,
        _centroid(cavity),
        angles,
        distances,
    )
    hits_cavity = valid & cavity[rows, cols]
    hits_myocardium = valid & myocardium[rows, cols]
    missing = ~hits_myocardium.any(axis=1)
    if missing.any():
        gap = float(angles[np.argmax(missing)])
        msg = f"Myocardial ring is broken: no myocardium on ray {gap:g}°"
        raise GeometryError(msg)
    last_myocardium = _last_hit(hits_myocardium, distances)
    last_cavity = np.where(
        hits_cavity.any(axis=1),
        _last_hit(hits_cavity, distances),
        0.0,
    )
    thickness = np.maximum(last_myocardium - last_cavity, 0.0)
    sectors = sector_of(angles)
    return tuple(
        float(thickness[sectors == sector].mean()) * pixel_spacing
        for sector in range(len(SECTOR_NAMES))
    )


def _last_hit(hits: np.ndarray, distances: np.ndarray) -> np.ndarray:
    last = hits.shape[1] - 1 - np.argmax(hits[:, ::-1], axis=1)
    return distances[last]


def derive_phase_labels(cavity_areas: Sequence[float]) -> np.ndarray:
    """Label frames 1 from ES (exclusive) to ED (inclusive), else 0.

    ED is the first frame of maximal area and ES the first frame of minimal
    area; the walk from ED to ES is cyclic.

    Raises
    ------
    GeometryError
        If fewer than two frames are given or the areas are constant.
    """
    areas = np.asarray(cavity_areas, dtype=np.float64)
    if areas.size < 2:  # noqa: PLR2004
        msg = "Phase labels need at least two frames"
        raise GeometryError(msg)
    if np.any(areas < 0):
        msg = "Cavity areas must be non-negative"
        raise GeometryError(msg)
    if np.all(areas == areas[0]):
        msg = "Cavity area is constant over the cycle; phase is undefined"
        raise GeometryError(msg)
    frames = areas.size
    end_diastole = int(np.argmax(areas))
    end_systole = int(np.argmin(areas))
    labels = np.ones(frames, dtype=np.int64)
    frame = end_diastole
    while frame != end_systole:
        frame = (frame + 1) % frames
        labels[frame] = 0
    return labels


def frame_indices(
    labels: np.ndarray,
    pixel_spacing: float,
) -> tuple[float, ...]:
    """The 11 physical indices of one already cleaned label map."""
    areas = (
        region_area(labels, CAVITY, pixel_spacing),
        region_area(labels, MYOCARDIUM, pixel_spacing),
    )
    return (
        *areas,
        *cavity_dimensions(labels, pixel_spacing),
        *regional_wall_thickness(labels, pixel_spacing),
    )


def quantify_sequence(
    masks: MaskSequence,
    cca: bool = True,
    connectivity: int = 8,
) -> list[IndexVector]:
    """Compute per-frame indices and phase labels of a mask sequence.

    Parameters
    ----------
    masks
        Label maps and spacing.

    cca
        Keep only the largest cavity and myocardium components first.

    connectivity
        Neighbourhood used by the component analysis.

    Raises
    ------
    GeometryError
        From any frame, with ``frame`` set to its index.
    """
    rows = []
    for frame, labels in enumerate(masks.labels):
        cleaned = clean_labels(labels, connectivity) if cca else labels
        try:
            rows.append(frame_indices(cleaned, masks.pixel_spacing))
        except GeometryError as err:
            msg = f"Frame {frame}: {err}"
            raise GeometryError(msg, frame=frame) from err
    phases = derive_phase_labels([row[0] for row in rows])
    return [
        IndexVector(values=row, phase=int(phase))
        for row, phase in zip(rows, phases)
    ]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-index mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        """Refuse zero or negative spread."""
        if np.any(~(np.asarray(self.std) > 0)):
            bad = int(np.argmax(~(np.asarray(self.std) > 0)))
            msg = f"Index column {bad} has zero standard deviation"
            raise NormalizationError(msg)


def compute_normalization_stats(values: np.ndarray) -> NormalizationStats:
    """Statistics of an ``n x 11`` training matrix (population std)."""
    matrix = np.asarray(values, dtype=np.float64)
    return NormalizationStats(
        mean=matrix.mean(axis=0),
        std=matrix.std(axis=0),
    )


def normalize_targets(
    values: np.ndarray,
    stats: NormalizationStats,
) -> np.ndarray:
    """Z-score every index column."""
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def denormalize_targets(
    normalized: np.ndarray,
    stats: NormalizationStats,
) -> np.ndarray:
    """Undo :func:`normalize_targets`."""
    return np.asarray(normalized, dtype=np.float64) * stats.std + stats.mean


@functools.cache
def _note_area_scaling():
    logger.info(
        "Areas are scaled by the pixel count of each image "
        "(not by the fixed count of 2900 quoted for the original data)",
    )


def scale_targets(
    values: np.ndarray,
    pixel_spacing: float,
    image_side: int,
) -> np.ndarray:
    """Make indices image-relative before z-scoring.

    Lengths are divided by the image side and areas by the pixel count,
    both in pixel units.
    """
    _note_area_scaling()
    scaled = np.asarray(values, dtype=np.float64).copy()
    scaled[..., :2] /= pixel_spacing**2 * image_side**2
    scaled[..., 2:] /= pixel_spacing * image_side
    return scaled


def unscale_targets(
    scaled: np.ndarray,
    pixel_spacing: float,
    image_side: int,
) -> np.ndarray:
    """Undo :func:`scale_targets` for one subject's spacing."""
    values = np.asarray(scaled, dtype=np.float64).copy()
    values[..., :2] *= pixel_spacing**2 * image_side**2
    values[..., 2:] *= pixel_spacing * image_side
    return values


def write_index_csv(
    path: os.PathLike[str] | str,
    vectors: Sequence[IndexVector],
):
    """Write one row per frame: frame, A1, A2, D1..D3, RWT1..RWT6, phase."""
    write_csv(
        path,
        INDEX_CSV_HEADER,
        (
            (frame, *vector.values, vector.phase)
            for frame, vector in enumerate(vectors)
        ),
    )


def read_index_csv(path: os.PathLike[str] | str) -> list[IndexVector]:
    """Read an index CSV back into vectors, in frame order."""
    rows = sorted(read_csv(path), key=lambda row: int(row["frame"]))
    values = [[float(row[name]) for name in INDEX_NAMES] for row in rows]
    return unstack_indices(values, [int(row["phase"]) for row in rows])


class GeometryError(Exception):
    """Exception raised when indices cannot be computed from a mask."""

    def __init__(self, msg: str, frame: int | None = None):
        super().__init__(msg)
        self.frame = frame


class NormalizationError(Exception):
    """Exception raised when targets cannot be z-scored."""
