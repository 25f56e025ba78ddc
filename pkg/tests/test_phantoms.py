from dataclasses import replace

import numpy as np
import pytest

from vesselmorph.phantoms import (
    DOMAINS,
    QUANTUM,
    DomainDescriptor,
    bar_phantom,
    generate_phantoms,
    render_tubes,
    segment_distance,
)


def test_straight_bar_mask_matches_thresholded_tube():
    s = bar_phantom(32, 6)
    np.testing.assert_array_equal(s.mask, (s.image > 0).astype(np.uint8))
    # d < w/2 keeps columns 14..18; d = 3 is outside
    np.testing.assert_array_equal(np.flatnonzero(s.mask[0]), [14, 15, 16, 17, 18])
    assert s.image[0, 16] == 1.0


def test_rendered_line_mask_equals_thresholded_distance():
    pts = np.array([[0.0, 3.5], [31.0, 20.25]])
    prof, mask = render_tubes((32, 32), [pts], [5.0])
    np.testing.assert_array_equal(mask, prof > 0)
    np.testing.assert_array_equal(mask, segment_distance((32, 32), pts) < 2.5)


def test_segment_distance_hand_values():
    d = segment_distance((3, 5), np.array([[1.0, 1.0], [1.0, 3.0]]))
    assert d[1, 2] == 0.0
    assert d[0, 2] == 1.0
    assert d[1, 4] == 1.0
    assert d[0, 0] == pytest.approx(np.sqrt(2))


def test_same_seed_same_samples():
    a = generate_phantoms(3, DOMAINS["source"], seed=9, size=32)
    b = generate_phantoms(3, DOMAINS["source"], seed=9, size=32)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes()
        np.testing.assert_array_equal(s.mask, t.mask)
        assert s.sample_id == t.sample_id
    c = generate_phantoms(1, DOMAINS["source"], seed=10, size=32)
    assert c[0].image.tobytes() != a[0].image.tobytes()


def test_values_on_quantum_grid_and_in_range():
    for dom in DOMAINS.values():
        s = generate_phantoms(2, dom, seed=1, size=32)[1]
        assert s.image.min() >= 0 and s.image.max() <= 1
        np.testing.assert_array_equal(np.round(s.image / QUANTUM) * QUANTUM, s.image)
        assert s.mask.dtype == np.uint8 and s.mask.any()


def test_dark_polarity_is_exact_negation():
    bright = DOMAINS["source"]
    dark = replace(bright, name="dark", polarity="dark")
    for b, d in zip(generate_phantoms(3, bright, seed=4, size=32), generate_phantoms(3, dark, seed=4, size=32)):
        np.testing.assert_array_equal(1.0 - d.image, b.image)
        np.testing.assert_array_equal(b.mask, d.mask)


def test_wide_domain_has_wider_vessels():
    src = generate_phantoms(8, DOMAINS["source"], seed=2)
    wide = generate_phantoms(8, DOMAINS["wide"], seed=2)
    assert np.mean([s.mask.mean() for s in wide]) > np.mean([s.mask.mean() for s in src])


def test_descriptor_validation():
    with pytest.raises(ValueError, match="width"):
        DomainDescriptor(width_min=0.5)
    with pytest.raises(ValueError, match="width"):
        DomainDescriptor(width_min=5, width_max=4)
    with pytest.raises(ValueError, match="polarity"):
        DomainDescriptor(polarity="grey")
    with pytest.raises(ValueError):
        generate_phantoms(0)
