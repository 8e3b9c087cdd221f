"""Cine sequences, preprocessing and geometric augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


AUGMENT_OPS = ("rotate", "flip_h", "flip_v", "elastic")


@dataclass
class CineSequence:
    """One cardiac cycle of grayscale frames.

    Attributes
    ----------
    frames
        ``t x h x w`` intensities.

    pixel_spacing
        Isotropic spacing in mm/pixel.

    subject_id
        Identifier of the subject the sequence belongs to.
    """

    frames: np.ndarray
    pixel_spacing: float
    subject_id: str = ""

    def __post_init__(self):
        """Check the frame stack is three-dimensional."""
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:  # noqa: PLR2004
            msg = f"Cine sequence must be t x h x w, got {self.frames.shape}"
            raise PreprocessError(msg)


@dataclass(frozen=True)
class PreprocessSettings:
    """Which preprocessing steps run and with which CLAHE constants."""

    clahe: bool = True
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256
    zscore: bool = True

    def __post_init__(self):
        """Validate CLAHE constants."""
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:  # noqa: PLR2004
            msg = f"tile_grid must be two positive counts: {self.tile_grid}"
            raise PreprocessError(msg)
        if self.clip_limit <= 0 or self.bins < 2:  # noqa: PLR2004
            msg = "clip_limit must be > 0 and bins >= 2"
            raise PreprocessError(msg)


@dataclass(frozen=True)
class AugmentSettings:
    """Magnitudes and probabilities of the random transforms."""

    ops: tuple[str, ...] = AUGMENT_OPS
    max_rotation: float = 30.0
    flip_probability: float = 0.5
    elastic_probability: float = 0.5
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    factor: int = 8

    def __post_init__(self):
        """Reject unknown operations and out-of-range values."""
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            msg = f"Unknown augmentation ops {sorted(unknown)}"
            raise PreprocessError(msg)
        for name in ("flip_probability", "elastic_probability"):
            if not 0 <= getattr(self, name) <= 1:
                msg = f"{name} must lie in [0, 1]"
                raise PreprocessError(msg)
        if self.factor < 1 or self.elastic_sigma <= 0:
            msg = "factor must be >= 1 and elastic_sigma > 0"
            raise PreprocessError(msg)


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    return np.linspace(0, extent, tiles + 1).round().astype(np.int64)


def quantize(image: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map intensities to bin indices over the image's own range."""
    low, high = float(image.min()), float(image.max())
    if high == low:
        return np.zeros(image.shape, dtype=np.int64)
    scaled = (image - low) / (high - low) * bins
    return np.minimum(scaled.astype(np.int64), bins - 1)


def tile_mappings(
    quantized: np.ndarray,
    tile_grid: tuple[int, int] = (8, 8),
    clip_limit: float = 2.0,
    bins: int = 256,
) -> np.ndarray:
    """Clipped-histogram equalisation lookup table of every tile.

    Returns an array of shape ``(tile_rows, tile_cols, bins)`` with values
    in (0, 1]. Each histogram is clipped at ``clip_limit`` times its mean
    bin height and the excess is spread evenly over all bins.
    """
    row_edges = _tile_edges(quantized.shape[0], tile_grid[0])
    col_edges = _tile_edges(quantized.shape[1], tile_grid[1])
    mappings = np.empty((tile_grid[0], tile_grid[1], bins))
    for i in range(tile_grid[0]):
        for j in range(tile_grid[1]):
            tile = quantized[
                row_edges[i] : row_edges[i + 1],
                col_edges[j] : col_edges[j + 1],
            ]
            histogram = np.bincount(tile.ravel(), minlength=bins).astype(
                np.float64,
            )
            limit = clip_limit * tile.size / bins
            excess = np.maximum(histogram - limit, 0.0).sum()
            histogram = np.minimum(histogram, limit) + excess / bins
            cdf = np.cumsum(histogram)
            mappings[i, j] = cdf / cdf[-1]
    return mappings


def _blend_coordinates(
    extent: int,
    edges: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower tile, upper tile and weight of the upper tile per pixel."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    position = np.interp(
        np.arange(extent),
        centers,
        np.arange(centers.size, dtype=np.float64),
    )
    lower = np.floor(position).astype(np.int64)
    upper = np.minimum(lower + 1, centers.size - 1)
    return lower, upper, position - lower


def clahe(
    image: np.ndarray,
    tile_grid: tuple[int, int] = (8, 8),
    clip_limit: float = 2.0,
    bins: int = 256,
) -> np.ndarray:
    """Contrast limited adaptive histogram equalisation of one 2D image.

    Per-tile mappings are blended bilinearly between tile centres; pixels
    outside the outermost centres use the nearest tile. A constant image
    maps to zeros. The output lies in [0, 1].

    Raises
    ------
    PreprocessError
        If the image is not 2D, holds non-finite values or is smaller than
        the tile grid.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:  # noqa: PLR2004
        msg = f"CLAHE works on 2D images, got shape {image.shape}"
        raise PreprocessError(msg)
    if not np.all(np.isfinite(image)):
        msg = "CLAHE input contains non-finite intensities"
        raise PreprocessError(msg)
    if image.shape[0] < tile_grid[0] or image.shape[1] < tile_grid[1]:
        msg = f"Image {image.shape} is smaller than the tile grid {tile_grid}"
        raise PreprocessError(msg)
    if image.max() == image.min():
        return np.zeros_like(image)
    quantized = quantize(image, bins)
    mappings = tile_mappings(quantized, tile_grid, clip_limit, bins)
    r0, r1, wr = _blend_coordinates(
        image.shape[0],
        _tile_edges(image.shape[0], tile_grid[0]),
    )
    c0, c1, wc = _blend_coordinates(
        image.shape[1],
        _tile_edges(image.shape[1], tile_grid[1]),
    )
    rows = np.arange(image.shape[0])[:, None]
    cols = np.arange(image.shape[1])[None, :]
    wr, wc = wr[:, None], wc[None, :]
    top = (1 - wc) * mappings[r0[rows], c0[cols], quantized]
    top += wc * mappings[r0[rows], c1[cols], quantized]
    bottom = (1 - wc) * mappings[r1[rows], c0[cols], quantized]
    bottom += wc * mappings[r1[rows], c1[cols], quantized]
    return np.clip((1 - wr) * top + wr * bottom, 0.0, 1.0)


def zscore_image(seq: CineSequence) -> CineSequence:
    """Normalise a whole sequence to zero mean and unit (population) std.

    Raises
    ------
    PreprocessError
        If the sequence is constant.
    """
    frames = np.asarray(seq.frames, dtype=np.float64)
    std = frames.std()
    if not std > 0:
        msg = f"Sequence {seq.subject_id or '?'} is constant; cannot z-score"
        raise PreprocessError(msg)
    return replace(seq, frames=(frames - frames.mean()) / std)


def preprocess_sequence(
    seq: CineSequence,
    settings: PreprocessSettings | None = None,
) -> CineSequence:
    """CLAHE on every frame, then a whole-sequence z-score."""
    settings = settings or PreprocessSettings()
    frames = np.asarray(seq.frames, dtype=np.float64)
    if settings.clahe:
        frames = np.stack(
            [
                clahe(
                    frame,
                    settings.tile_grid,
                    settings.clip_limit,
                    settings.bins,
                )
                for frame in frames
            ],
        )
    processed = replace(seq, frames=frames)
    return zscore_image(processed) if settings.zscore else processed


def rotate_sequence(
    frames: np.ndarray,
    labels: np.ndarray,
    angle: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate every frame about the image centre by ``angle`` degrees.

    Images are interpolated bilinearly, labels by nearest neighbour.
    """
    rotated = ndimage.rotate(
        np.asarray(frames, dtype=np.float64),
        angle,
        axes=(2, 1),
        reshape=False,
        order=1,
        mode="nearest",
    )
    rotated_labels = ndimage.rotate(
        np.asarray(labels),
        angle,
        axes=(2, 1),
        reshape=False,
        order=0,
        mode="constant",
        cval=0,
    )
    return rotated, rotated_labels


def flip_sequence(
    frames: np.ndarray,
    labels: np.ndarray,
    direction: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Mirror frames and labels horizontally (``"h"``) or vertically."""
    if direction not in ("h", "v"):
        msg = f"Flip direction must be 'h' or 'v', got {direction!r}"
        raise PreprocessError(msg)
    axis = 2 if direction == "h" else 1
    return np.flip(frames, axis=axis).copy(), np.flip(labels, axis=axis).copy()


def elastic_field(
    shape: tuple[int, int],
    rng: np.random.Generator,
    alpha: float = 8.0,
    sigma: float = 4.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Smooth random displacement field with peak magnitude ``alpha`` px."""
    fields = []
    for _ in range(2):
        smooth = ndimage.gaussian_filter(
            rng.uniform(-1.0, 1.0, size=shape),
            sigma,
            mode="constant",
        )
        peak = np.abs(smooth).max()
        fields.append(smooth / peak * alpha if peak > 0 else smooth)
    return fields[0], fields[1]


def elastic_sequence(
    frames: np.ndarray,
    labels: np.ndarray,
    displacement: tuple[np.ndarray, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Warp every frame with the same displacement field."""
    height, width = frames.shape[1:]
    grid_rows, grid_cols = np.meshgrid(
        np.arange(height),
        np.arange(width),
        indexing="ij",
    )
    coordinates = [grid_rows + displacement[0], grid_cols + displacement[1]]
    warped = np.stack(
        [
            ndimage.map_coordinates(
                np.asarray(frame, dtype=np.float64),
                coordinates,
                order=1,
                mode="nearest",
            )
            for frame in frames
        ],
    )
    warped_labels = np.stack(
        [
            ndimage.map_coordinates(
                np.asarray(label_map),
                coordinates,
                order=0,
                mode="constant",
                cval=0,
            )
            for label_map in labels
        ],
    )
    return warped, warped_labels


@dataclass
class AugmentRecord:
    """Transforms drawn for one augmented copy, for logging and tests."""

    angle: float = 0.0
    flips: list[str] = field(default_factory=list)
    elastic: bool = False


def augment(
    frames: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    settings: AugmentSettings | None = None,
) -> tuple[np.ndarray, np.ndarray, AugmentRecord]:
    """Apply one random combination of the enabled transforms.

    The same geometric transform is applied to images and labels. Random
    numbers are drawn in a fixed order whatever is enabled, so a seed
    always yields the same sequence of decisions.
    """
    settings = settings or AugmentSettings()
    angle = rng.uniform(-settings.max_rotation, settings.max_rotation)
    flip_h, flip_v, warp = rng.uniform(size=3)
    displacement = elastic_field(
        frames.shape[1:],
        rng,
        settings.elastic_alpha,
        settings.elastic_sigma,
    )
    record = AugmentRecord()
    if "rotate" in settings.ops:
        frames, labels = rotate_sequence(frames, labels, angle)
        record.angle = float(angle)
    if "flip_h" in settings.ops and flip_h < settings.flip_probability:
        frames, labels = flip_sequence(frames, labels, "h")
        record.flips.append("h")
    if "flip_v" in settings.ops and flip_v < settings.flip_probability:
        frames, labels = flip_sequence(frames, labels, "v")
        record.flips.append("v")
    if "elastic" in settings.ops and warp < settings.elastic_probability:
        frames, labels = elastic_sequence(frames, labels, displacement)
        record.elastic = True
    return frames, labels, record


class PreprocessError(Exception):
    """Exception raised when an image cannot be preprocessed."""
