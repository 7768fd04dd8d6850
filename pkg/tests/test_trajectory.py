import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irmanifold.trajectory import (SequenceParams, SpiralInterleaf, density_compensation,
                                   generate_archimedean_spiral, golden_angle_schedule, rotate)

TRUE_GOLDEN_DEG = 180.0 * (3.0 - np.sqrt(5.0))


def test_two_sample_spiral_endpoints():
    s = generate_archimedean_spiral(2, n_turns=1, k_max=0.5)
    assert np.hypot(*s.samples[0]) < 1e-9
    assert s.radius[-1] == pytest.approx(0.5)


def test_rotation_by_180_negates():
    a = generate_archimedean_spiral(33, 3.0, 0.4, 0.0)
    b = generate_archimedean_spiral(33, 3.0, 0.4, 180.0)
    np.testing.assert_allclose(b.samples, -a.samples, atol=1e-15)


def test_default_spiral_radius_strictly_increasing():
    s = generate_archimedean_spiral(256, 8, 0.5)
    assert np.all(np.diff(s.radius) > 0)
    assert s.radius.max() == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.floats(0.5, 20), st.floats(0.01, 0.5), st.floats(0, 360))
def test_spiral_invariants(n, turns, kmax, rot):
    s = generate_archimedean_spiral(n, turns, kmax, rot)
    assert s.sample_count == n
    assert np.hypot(*s.samples[0]) < 1e-9
    assert np.all(s.radius <= 0.5 + 1e-12)
    assert np.all(np.diff(s.radius) >= -1e-12)


@pytest.mark.parametrize("args", [(1, 8, 0.5), (16, 8, 0.0), (16, 8, 0.6), (16, 0, 0.5), (2.5, 8, 0.5)])
def test_spiral_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        generate_archimedean_spiral(*args)


def test_spiral_deterministic():
    a = generate_archimedean_spiral(256, 8, 0.5, 12.5)
    b = generate_archimedean_spiral(256, 8, 0.5, 12.5)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_default_schedule_timing():
    p = SequenceParams()
    sch = golden_angle_schedule(p)
    assert p.block_ms == 6400
    assert p.period_ms == 6900
    assert len(sch) == 4000
    np.testing.assert_allclose(np.diff(sch.inversion_times_ms), 6900)
    within = np.diff(sch.times_ms.reshape(5, 800), axis=1)
    np.testing.assert_allclose(within, 8.0)
    assert np.all(np.diff(sch.times_ms) > 0)
    assert sch.first_after_inversion.sum() == 5
    assert sch.rotation_deg[2] == pytest.approx(275.0)
    i = np.arange(4000)
    np.testing.assert_allclose(sch.rotation_deg, np.mod(i * 137.5, 360), atol=1e-9)


def test_schedule_gap_between_blocks_is_delay():
    sch = golden_angle_schedule(SequenceParams())
    last = sch.times_ms[799]
    first_next = sch.times_ms[800]
    # the next block's first readout comes one TR after its inversion pulse
    assert first_next - last == pytest.approx(500.0 + 8.0)


def test_rounded_golden_angle_repeats_but_true_golden_angle_does_not():
    # 137.5 deg = 55/144 turn, so rotations repeat with period 144
    sch = golden_angle_schedule(SequenceParams())
    assert sch.rotation_deg[144] == pytest.approx(sch.rotation_deg[0], abs=1e-9)
    irr = golden_angle_schedule(SequenceParams(rotation_step_deg=TRUE_GOLDEN_DEG))
    r = np.sort(irr.rotation_deg)
    gaps = np.diff(np.concatenate([r, [r[0] + 360]]))
    assert gaps.min() > 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 50), st.integers(1, 6), st.sampled_from([1, 2, 5]))
def test_schedule_entry_count(per, n_inv, mult):
    p = SequenceParams(interleaves_per_inversion=per * mult, n_inversions=n_inv, samples_per_interleaf=8)
    sch = golden_angle_schedule(p)
    assert len(sch) == per * mult * n_inv
    assert sch.coords().shape == (len(sch), 8, 2)


@pytest.mark.parametrize("field,value", [("tr_ms", 0), ("flip_deg", 0), ("flip_deg", 91),
                                         ("n_inversions", 0), ("interleaves_per_inversion", 2.5),
                                         ("k_max", 0.7)])
def test_sequence_params_validation(field, value):
    with pytest.raises(ValueError):
        SequenceParams(**{field: value})


def test_coords_are_rigid_rotations_of_base():
    sch = golden_angle_schedule(SequenceParams(interleaves_per_inversion=10, n_inversions=1))
    c = sch.coords()
    np.testing.assert_allclose(np.hypot(c[..., 0], c[..., 1]), np.broadcast_to(sch.base.radius, c.shape[:2]),
                               atol=1e-15)
    np.testing.assert_allclose(c[3], rotate(sch.base.samples, sch.rotation_deg[3]), atol=1e-15)


def test_content_hash_changes_with_params():
    a = golden_angle_schedule(SequenceParams(n_inversions=2))
    b = golden_angle_schedule(SequenceParams(n_inversions=2))
    c = golden_angle_schedule(SequenceParams(n_inversions=2, flip_deg=10))
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_density_compensation_examples():
    two = generate_archimedean_spiral(2, 1, 0.5)
    assert density_compensation(two).sum() == pytest.approx(1.0)
    ang = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    ring = SpiralInterleaf(0.3 * np.column_stack([np.cos(ang), np.sin(ang)]))
    w = density_compensation(ring)
    np.testing.assert_allclose(w, 1 / 7)
    w = density_compensation(generate_archimedean_spiral(256, 8, 0.5))
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w[1:]) >= 0)
    assert w[0] > 0
