"""Unit tests of the phantom generator."""

from dataclasses import replace

import numpy as np
import pytest

from cardioquant.geometry import CAVITY, MYOCARDIUM, stack_indices
from cardioquant.phantom import (
    PhantomError,
    PhantomParams,
    PhantomRanges,
    analytic_indices,
    generate_cohort,
    generate_phantom,
    render_labels,
    sample_phantom_params,
)


def test_radius_follows_the_cycle(ring_params):
    """The cavity is largest at ED and smallest at ES."""
    radii = [ring_params.radius(frame) for frame in range(8)]
    assert radii[0] == pytest.approx(8.0)
    assert radii[4] == pytest.approx(5.0)
    assert radii[1] == pytest.approx(radii[7])
    assert all(a > b for a, b in zip(radii[:4], radii[1:5]))


def test_render_labels_regions(ring_params):
    """The centre is cavity, the wall myocardium and the corner background."""
    labels = render_labels(ring_params, 0)
    assert labels[15, 15] == CAVITY
    assert labels[15, 15 + 10] == MYOCARDIUM
    assert labels[0, 0] == 0


def test_oracle_tracks_closed_form(ring_params):
    """Rasterised ground truth stays close to the continuous geometry."""
    sample = generate_phantom(ring_params)
    oracle, _ = stack_indices(sample.indices)
    np.testing.assert_allclose(
        oracle[:, 0],
        sample.analytic[:, 0],
        rtol=0.08,
    )
    np.testing.assert_allclose(
        oracle[:, 5:],
        sample.analytic[:, 5:],
        atol=1.25,
    )


def test_analytic_indices_with_spacing(ring_params):
    """Closed-form lengths scale with the pixel spacing."""
    scaled = replace(ring_params, pixel_spacing=2.0)
    np.testing.assert_allclose(
        analytic_indices(scaled, 0)[2:],
        2 * analytic_indices(ring_params, 0)[2:],
    )


def test_noise_free_images_take_region_intensities(ring_params):
    """Without noise every pixel shows its region's intensity."""
    sample = generate_phantom(ring_params)
    assert set(np.unique(sample.sequence.frames)) == {0.1, 0.9, 0.4}


def test_generation_is_deterministic(ring_params):
    """The same seed renders identical noisy images."""
    noisy = replace(ring_params, noise_std=0.05)
    first = generate_phantom(noisy).sequence.frames
    second = generate_phantom(noisy).sequence.frames
    np.testing.assert_array_equal(first, second)


def test_wall_offsets_show_in_thickness(ring_params):
    """A thicker anterior wall gives a larger A-sector RWT."""
    thick = replace(ring_params, sector_offsets=(0, 0, 0, 0, 1.5, 0))
    rwt = generate_phantom(thick).indices[0].thicknesses
    assert rwt[4] > max(rwt[:4]) + 0.5


def test_es_radius_must_be_below_ed(ring_params):
    """r_es above r_ed names the parameter."""
    with pytest.raises(PhantomError) as err:
        replace(ring_params, r_es=9.0)
    assert err.value.parameter == "r_es"


def test_annulus_must_fit_the_frame(ring_params):
    """A ring leaving the image names the centre."""
    with pytest.raises(PhantomError) as err:
        replace(ring_params, center=(5.0, 15.5))
    assert err.value.parameter == "center"


def test_es_frame_must_differ_from_ed(ring_params):
    """ED and ES on the same frame leave no cycle."""
    with pytest.raises(PhantomError) as err:
        replace(ring_params, es_frame=8.0)
    assert err.value.parameter == "es_frame"


def test_reversed_range(small_ranges):
    """Reversed sampling ranges are refused."""
    with pytest.raises(PhantomError) as err:
        replace(small_ranges, r_ed=(9.0, 7.0))
    assert err.value.parameter == "r_ed"


def test_sampled_params_respect_ranges(small_ranges):
    """Random subjects land inside every range with a whole ES frame."""
    rng = np.random.default_rng(0)
    for index in range(10):
        params = sample_phantom_params(rng, small_ranges, f"s{index}")
        assert 7.0 <= params.r_ed <= 8.0
        assert 3 <= params.es_frame <= 5
        assert float(params.es_frame).is_integer()
        assert params.frames == 8
        assert params.size == 32


def test_cohort_names_and_determinism(small_ranges):
    """Subjects are numbered and reproducible under a seed."""
    first = generate_cohort(3, seed=2, ranges=small_ranges)
    second = generate_cohort(3, seed=2, ranges=small_ranges)
    assert [s.sequence.subject_id for s in first] == [
        "sub-001",
        "sub-002",
        "sub-003",
    ]
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.sequence.frames, b.sequence.frames)
        assert a.indices == b.indices


def test_cohort_needs_subjects(small_ranges):
    """Zero subjects is an error naming the count."""
    with pytest.raises(PhantomError) as err:
        generate_cohort(0, seed=0, ranges=small_ranges)
    assert err.value.parameter == "subjects"


def test_default_params_are_valid():
    """Defaults describe a full-size phantom."""
    params = PhantomParams("sub-x", (39.5, 39.5), 20.0, 12.0, 6.0)
    assert params.systole_frames() == 10.0
    assert PhantomRanges().size == 80
