"""Unit tests of the geometry oracle."""

import math

import numpy as np
import pytest

from cardioquant.geometry import (
    CAVITY,
    MYOCARDIUM,
    GeometryError,
    IndexVector,
    MaskSequence,
    NormalizationError,
    cavity_dimensions,
    clean_labels,
    compute_normalization_stats,
    denormalize_targets,
    derive_phase_labels,
    keep_largest_component,
    normalize_targets,
    quantify_sequence,
    read_index_csv,
    region_area,
    regional_wall_thickness,
    scale_targets,
    sector_of,
    unscale_targets,
    write_index_csv,
)


@pytest.fixture()
def ring(ring_subject):
    """End-diastolic label map of the uniform-wall phantom."""
    return ring_subject.masks.labels[0]


def test_ring_areas(ring):
    """Pixel-counted areas approach the continuous disc and annulus."""
    assert math.isclose(
        region_area(ring, CAVITY, 1.0),
        64 * math.pi,
        rel_tol=0.05,
    )
    assert math.isclose(
        region_area(ring, MYOCARDIUM, 1.0),
        (121 - 64) * math.pi,
        rel_tol=0.08,
    )


def test_area_scales_with_spacing(ring):
    """Areas grow with the square of the pixel spacing."""
    assert math.isclose(
        region_area(ring, CAVITY, 2.0),
        4 * region_area(ring, CAVITY, 1.0),
    )


def test_ring_dimensions(ring):
    """Chords through the centroid match the diameter."""
    for chord in cavity_dimensions(ring, 1.0):
        assert abs(chord - 16.0) <= 1.5


def test_dimensions_of_empty_cavity():
    """An empty cavity has no dimensions."""
    with pytest.raises(GeometryError, match="empty"):
        cavity_dimensions(np.zeros((8, 8), dtype=int), 1.0)


def test_uniform_ring_wall_thickness(ring):
    """A constant wall gives six near-equal thicknesses."""
    thicknesses = regional_wall_thickness(ring, 1.0)
    assert len(thicknesses) == 6
    for value in thicknesses:
        assert abs(value - 3.0) <= 1.0
    assert max(thicknesses) - min(thicknesses) <= 1.0


def test_wall_thickness_scales_with_spacing(ring):
    """Lengths grow linearly with the pixel spacing."""
    np.testing.assert_allclose(
        regional_wall_thickness(ring, 2.0),
        2 * np.asarray(regional_wall_thickness(ring, 1.0)),
    )


def test_broken_ring_names_gap_angle(ring):
    """A ray that meets no myocardium is an error naming its angle."""
    broken = ring.copy()
    gap = np.zeros_like(broken, dtype=bool)
    gap[13:19, 16:] = True
    broken[gap & (broken == MYOCARDIUM)] = 0
    with pytest.raises(GeometryError, match="broken") as err:
        regional_wall_thickness(broken, 1.0)
    assert "0°" in str(err.value)


def test_sequence_error_carries_frame(ring):
    """quantify_sequence reports which frame failed."""
    labels = np.stack([ring, np.zeros_like(ring)])
    with pytest.raises(GeometryError) as err:
        quantify_sequence(MaskSequence(labels, 1.0))
    assert err.value.frame == 1


def test_sector_boundaries():
    """Sectors start at 90° and run counter-clockwise in 60° steps."""
    np.testing.assert_array_equal(
        sector_of(np.array([90.0, 150.0, 210.0, 270.0, 330.0, 30.0])),
        [0, 1, 2, 3, 4, 5],
    )
    assert int(sector_of(89.9)) == 5


def test_ring_phase_labels(ring_subject):
    """ES-to-ED frames are diastolic, ED-to-ES frames systolic."""
    phases = [vector.phase for vector in ring_subject.indices]
    assert phases == [1, 0, 0, 0, 0, 1, 1, 1]


def test_phase_labels_wrap_around_the_cycle():
    """The ED-to-ES walk is cyclic."""
    np.testing.assert_array_equal(derive_phase_labels([3, 5, 4]), [0, 1, 0])


def test_phase_labels_first_extremum_wins():
    """Ties pick the first maximal and minimal frames."""
    np.testing.assert_array_equal(
        derive_phase_labels([5, 4, 3, 3, 5]),
        [1, 0, 0, 1, 1],
    )


def test_constant_areas_have_no_phase():
    """A static cavity has undefined phases."""
    with pytest.raises(GeometryError):
        derive_phase_labels([4.0, 4.0, 4.0])


def test_single_frame_has_no_phase():
    """Two frames at least."""
    with pytest.raises(GeometryError):
        derive_phase_labels([4.0])


def test_largest_component_removes_islands():
    """Stray blobs are dropped before measuring."""
    mask = np.zeros((10, 10), dtype=bool)
    mask[1:5, 1:5] = True
    mask[8, 8] = True
    kept = keep_largest_component(mask)
    assert kept.sum() == 16
    assert not kept[8, 8]


def test_connectivity_decides_diagonal_neighbours():
    """Diagonal pixels join under 8- but not 4-connectivity."""
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True
    mask[3, 0] = True
    assert keep_largest_component(mask, connectivity=8).sum() == 3
    assert keep_largest_component(mask, connectivity=4).sum() == 1


def test_cca_cleans_spurious_cavity(ring_subject):
    """Component analysis removes a stray cavity pixel from the areas."""
    labels = ring_subject.masks.labels.copy()
    labels[:, 0, 0] = CAVITY
    masks = MaskSequence(labels, 1.0)
    cleaned = quantify_sequence(masks, cca=True)
    raw = quantify_sequence(masks, cca=False)
    assert cleaned == ring_subject.indices
    assert raw[0].areas[0] == cleaned[0].areas[0] + 1.0


def test_clean_labels_keeps_label_values(ring):
    """Cleaning only removes pixels."""
    cleaned = clean_labels(ring)
    np.testing.assert_array_equal(cleaned, ring)


def test_mask_sequence_rejects_unknown_labels():
    """Labels are limited to 0, 1 and 2."""
    with pytest.raises(GeometryError):
        MaskSequence(np.full((2, 4, 4), 3), 1.0)


def test_normalisation_round_trip(rng):
    """Denormalising undoes normalising."""
    values = rng.normal(10.0, 3.0, size=(12, 11))
    stats = compute_normalization_stats(values)
    normalised = normalize_targets(values, stats)
    np.testing.assert_allclose(normalised.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalised.std(axis=0), 1.0)
    np.testing.assert_allclose(denormalize_targets(normalised, stats), values)


def test_constant_column_cannot_be_normalised(rng):
    """Zero spread names the column."""
    values = rng.normal(size=(5, 11))
    values[:, 4] = 2.0
    with pytest.raises(NormalizationError, match="column 4"):
        compute_normalization_stats(values)


def test_scaling_is_image_relative():
    """Areas divide by the pixel count, lengths by the side."""
    values = np.array([[400.0, 300.0] + [20.0] * 9])
    scaled = scale_targets(values, 2.0, 10)
    assert math.isclose(scaled[0, 0], 400.0 / (4.0 * 100))
    assert math.isclose(scaled[0, 2], 20.0 / 20.0)
    np.testing.assert_allclose(unscale_targets(scaled, 2.0, 10), values)


def test_index_csv_round_trip(tmp_path, ring_subject):
    """Index files read back to the same vectors."""
    path = tmp_path / "indices.csv"
    write_index_csv(path, ring_subject.indices)
    restored = read_index_csv(path)
    assert len(restored) == len(ring_subject.indices)
    for original, loaded in zip(ring_subject.indices, restored):
        assert loaded.phase == original.phase
        np.testing.assert_allclose(loaded.values, original.values)


def test_index_vector_groups():
    """Areas, dimensions and thicknesses split the 11 values."""
    vector = IndexVector(tuple(float(v) for v in range(11)), 1)
    assert vector.areas == (0.0, 1.0)
    assert vector.dimensions == (2.0, 3.0, 4.0)
    assert vector.thicknesses == (5.0, 6.0, 7.0, 8.0, 9.0, 10.0)


def _ellipse(theta, size=64, a=12.0, b=7.0):
    rows, cols = np.mgrid[:size, :size]
    x = cols - (size - 1) / 2
    y = (size - 1) / 2 - rows
    angle = np.deg2rad(theta)
    u = x * np.cos(angle) + y * np.sin(angle)
    v = -x * np.sin(angle) + y * np.cos(angle)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.int64)


def test_sixty_degree_turn_cycles_dimensions():
    """Turning the cavity by 60 degrees shifts D1, D2, D3 by one place."""
    d1, d2, d3 = cavity_dimensions(_ellipse(10.0), 1.0)
    turned = cavity_dimensions(_ellipse(70.0), 1.0)
    np.testing.assert_allclose(turned, (d3, d1, d2), atol=1.5)
    assert max(d1, d2, d3) - min(d1, d2, d3) > 3.0
