"""Synthetic cine phantoms with known LV geometry.

Each frame shows a disc (cavity) inside a ring (myocardium) whose thickness
is constant within each of the six wall sectors. The cavity radius follows a
cardiac cycle: a half cosine from ED down to ES, and another back up to ED.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cardioquant.geometry import (
    CAVITY,
    INDEX_NAMES,
    MYOCARDIUM,
    IndexVector,
    MaskSequence,
    quantify_sequence,
    sector_of,
    stack_indices,
)
from cardioquant.imaging import CineSequence

logger = logging.getLogger(__name__)

SECTORS = 6


@dataclass(frozen=True)
class PhantomParams:
    """Everything needed to render one phantom subject.

    Attributes
    ----------
    subject_id
        Name of the subject directory.

    center
        ``(row, col)`` of the LV centre in pixels.

    r_ed, r_es
        Cavity radius at end-diastole and end-systole, in pixels.

    wall_thickness
        Base myocardial thickness in pixels.

    sector_offsets
        Extra thickness per sector (IS, I, IL, AL, A, AS), in pixels.

    ed_frame, es_frame
        Frame positions of end-diastole and end-systole. Their cyclic
        distance sets the systolic duration.

    thickening
        Relative wall thickening reached at end-systole.

    noise_std
        Standard deviation of additive Gaussian noise.

    intensities
        Background, cavity and myocardium intensities.

    pixel_spacing
        Isotropic spacing in mm/pixel.

    frames, size
        Sequence length and image side.

    seed
        Seed of the noise generator.
    """

    subject_id: str
    center: tuple[float, float]
    r_ed: float
    r_es: float
    wall_thickness: float
    sector_offsets: tuple[float, ...] = (0.0,) * SECTORS
    ed_frame: float = 0.0
    es_frame: float = 10.0
    thickening: float = 0.0
    noise_std: float = 0.05
    intensities: tuple[float, float, float] = (0.1, 0.9, 0.4)
    pixel_spacing: float = 1.0
    frames: int = 20
    size: int = 80
    seed: int = 0

    def __post_init__(self):
        """Check the geometry is a valid ring that fits the frame."""
        if not 0 < self.r_es < self.r_ed:
            msg = (
                f"r_es ({self.r_es}) must be positive and below "
                f"r_ed ({self.r_ed})"
            )
            raise PhantomError(msg, parameter="r_es")
        if len(self.sector_offsets) != SECTORS:
            count = len(self.sector_offsets)
            msg = f"Need {SECTORS} sector offsets, got {count}"
            raise PhantomError(msg, parameter="sector_offsets")
        if min(self.wall_thickness + o for o in self.sector_offsets) <= 0:
            msg = "Wall thickness must stay positive in every sector"
            raise PhantomError(msg, parameter="wall_thickness")
        if self.frames < 2 or self.size < 1:  # noqa: PLR2004
            msg = "Need at least two frames and a positive image size"
            raise PhantomError(msg, parameter="frames")
        if not 0 < self.systole_frames() < self.frames:
            msg = "es_frame must differ from ed_frame within the cycle"
            raise PhantomError(msg, parameter="es_frame")
        if self.thickening < 0 or self.noise_std < 0:
            msg = "thickening and noise_std must be non-negative"
            raise PhantomError(msg, parameter="thickening")
        if not self.pixel_spacing > 0:
            msg = "pixel_spacing must be positive"
            raise PhantomError(msg, parameter="pixel_spacing")
        reach = self.r_ed + max(self.sector_thickness(self.r_es))
        row, col = self.center
        if min(row, col) - reach < 0 or max(row, col) + reach > self.size - 1:
            msg = (
                f"Annulus of outer radius {reach:.2f} px around {self.center} "
                f"leaves the {self.size} px frame"
            )
            raise PhantomError(msg, parameter="center")

    def systole_frames(self) -> float:
        """Cyclic distance from ED to ES in frames."""
        return (self.es_frame - self.ed_frame) % self.frames

    def radius(self, frame: float) -> float:
        """Cavity radius (px) at a frame position."""
        systole = self.systole_frames()
        phase = (frame - self.ed_frame) % self.frames
        if phase <= systole:
            shape = (1 + np.cos(np.pi * phase / systole)) / 2
        else:
            diastole = self.frames - systole
            shape = (1 + np.cos(np.pi * (self.frames - phase) / diastole)) / 2
        return float(self.r_es + (self.r_ed - self.r_es) * shape)

    def sector_thickness(self, radius: float) -> tuple[float, ...]:
        """Wall thickness (px) per sector for a given cavity radius."""
        contraction = (self.r_ed - radius) / (self.r_ed - self.r_es)
        scale = 1 + self.thickening * contraction
        return tuple(
            (self.wall_thickness + offset) * scale
            for offset in self.sector_offsets
        )


@dataclass(frozen=True)
class PhantomRanges:
    """Sampling ranges of randomised phantom subjects (closed intervals)."""

    frames: int = 20
    size: int = 80
    spacing: tuple[float, float] = (0.6836, 2.0833)
    r_ed: tuple[float, float] = (16.0, 22.0)
    es_ratio: tuple[float, float] = (0.55, 0.7)
    wall_thickness: tuple[float, float] = (5.0, 8.0)
    sector_offset: tuple[float, float] = (-1.0, 1.0)
    es_frame: tuple[int, int] = (7, 12)
    thickening: tuple[float, float] = (0.0, 0.3)
    center_jitter: float = 3.0
    noise_std: float = 0.05
    intensities: tuple[float, float, float] = (0.1, 0.9, 0.4)

    def __post_init__(self):
        """Check each range is ordered."""
        for name in (
            "spacing",
            "r_ed",
            "es_ratio",
            "wall_thickness",
            "sector_offset",
            "es_frame",
            "thickening",
        ):
            low, high = getattr(self, name)
            if low > high:
                msg = f"Range {name} is reversed: {low} > {high}"
                raise PhantomError(msg, parameter=name)
        if not 0 < self.es_ratio[0] <= self.es_ratio[1] < 1:
            msg = f"es_ratio must lie inside (0, 1), got {self.es_ratio}"
            raise PhantomError(msg, parameter="es_ratio")
        if self.spacing[0] <= 0:
            msg = "spacing must be positive"
            raise PhantomError(msg, parameter="spacing")


def sample_phantom_params(
    rng: np.random.Generator,
    ranges: PhantomRanges,
    subject_id: str,
) -> PhantomParams:
    """Draw one random subject; ES always lands on a whole frame."""
    r_ed = rng.uniform(*ranges.r_ed)
    middle = (ranges.size - 1) / 2
    return PhantomParams(
        subject_id=subject_id,
        center=(
            middle + rng.uniform(-ranges.center_jitter, ranges.center_jitter),
            middle + rng.uniform(-ranges.center_jitter, ranges.center_jitter),
        ),
        r_ed=float(r_ed),
        r_es=float(r_ed * rng.uniform(*ranges.es_ratio)),
        wall_thickness=float(rng.uniform(*ranges.wall_thickness)),
        sector_offsets=tuple(
            float(v) for v in rng.uniform(*ranges.sector_offset, size=SECTORS)
        ),
        ed_frame=0.0,
        es_frame=float(
            rng.integers(ranges.es_frame[0], ranges.es_frame[1] + 1),
        ),
        thickening=float(rng.uniform(*ranges.thickening)),
        noise_std=ranges.noise_std,
        intensities=ranges.intensities,
        pixel_spacing=float(rng.uniform(*ranges.spacing)),
        frames=ranges.frames,
        size=ranges.size,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def render_labels(params: PhantomParams, frame: int) -> np.ndarray:
    """Rasterise one frame: a pixel belongs to a region if its centre does."""
    rows, cols = np.meshgrid(
        np.arange(params.size),
        np.arange(params.size),
        indexing="ij",
    )
    d_row = params.center[0] - rows
    d_col = cols - params.center[1]
    distance = np.hypot(d_row, d_col)
    angle = np.rad2deg(np.arctan2(d_row, d_col)) % 360.0
    radius = params.radius(frame)
    thickness = np.asarray(params.sector_thickness(radius))
    outer = radius + thickness[sector_of(angle)]
    labels = np.zeros((params.size, params.size), dtype=np.int64)
    labels[(distance > radius) & (distance <= outer)] = MYOCARDIUM
    labels[distance <= radius] = CAVITY
    return labels


def analytic_indices(params: PhantomParams, frame: int) -> np.ndarray:
    """Closed-form indices (mm, mm^2) of the continuous phantom geometry."""
    radius = params.radius(frame)
    thickness = np.asarray(params.sector_thickness(radius))
    spacing = params.pixel_spacing
    cavity_area = np.pi * radius**2
    rings = np.pi * ((radius + thickness) ** 2 - radius**2)
    ring_area = np.sum(rings) / SECTORS
    return np.array(
        [
            cavity_area * spacing**2,
            ring_area * spacing**2,
            *([2 * radius * spacing] * 3),
            *(thickness * spacing),
        ],
    )


@dataclass
class PhantomSample:
    """One rendered subject with its oracle ground truth."""

    sequence: CineSequence
    masks: MaskSequence
    indices: list[IndexVector]
    params: PhantomParams | None = None
    analytic: np.ndarray = field(default_factory=lambda: np.empty((0, 11)))


def generate_phantom(params: PhantomParams) -> PhantomSample:
    """Render images, masks and ground-truth indices of one subject.

    Ground truth comes from the geometry oracle on the noiseless masks; the
    closed-form values are logged next to it at DEBUG level.
    """
    rng = np.random.default_rng(params.seed)
    labels = np.stack(
        [render_labels(params, frame) for frame in range(params.frames)],
    )
    intensities = np.asarray(params.intensities)[labels]
    frames = intensities + rng.normal(0.0, params.noise_std, size=labels.shape)
    masks = MaskSequence(labels=labels, pixel_spacing=params.pixel_spacing)
    indices = quantify_sequence(masks)
    analytic = np.stack(
        [analytic_indices(params, frame) for frame in range(params.frames)],
    )
    if logger.isEnabledFor(logging.DEBUG):
        oracle, _ = stack_indices(indices)
        gap = np.abs(oracle - analytic).max(axis=0)
        logger.debug(
            "Phantom %s oracle vs analytic max gap: %s",
            params.subject_id,
            ", ".join(f"{n}={g:.3g}" for n, g in zip(INDEX_NAMES, gap)),
        )
    return PhantomSample(
        sequence=CineSequence(
            frames=frames,
            pixel_spacing=params.pixel_spacing,
            subject_id=params.subject_id,
        ),
        masks=masks,
        indices=indices,
        params=params,
        analytic=analytic,
    )


def generate_cohort(
    count: int,
    seed: int,
    ranges: PhantomRanges | None = None,
) -> list[PhantomSample]:
    """Render ``count`` random subjects named ``sub-001``, ``sub-002``, ..."""
    if count < 1:
        msg = f"Subject count must be >= 1, got {count}"
        raise PhantomError(msg, parameter="subjects")
    ranges = ranges or PhantomRanges()
    rng = np.random.default_rng(seed)
    return [
        generate_phantom(
            sample_phantom_params(rng, ranges, f"sub-{index + 1:03d}"),
        )
        for index in range(count)
    ]


class PhantomError(Exception):
    """Exception raised for invalid phantom parameters."""

    def __init__(self, msg: str, parameter: str | None = None):
        super().__init__(msg)
        self.parameter = parameter
