import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irmanifold.analysis import (agreement_report, blood_pool_area, cardiac_extremes, icc_a1, icc_a1_matrix,
                                 motion_agreement, phantom_ellipses, r_squared, ring_centroid, roi_masks,
                                 sector_angle, sector_areas, sector_areas_px, sector_areas_quadrature)
from irmanifold.motion import LatentSignals
from irmanifold.phantom import CardiacPhantomSpec, render_frame

# classic six-target, four-judge ratings table; its published ICC(2,1) is 0.29
SIX_BY_FOUR = [[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]]
CIRCLES = (((0.0, 0.0), (10.0, 10.0)), ((0.0, 0.0), (20.0, 20.0)))


def test_icc_published_example():
    assert icc_a1_matrix(SIX_BY_FOUR) == pytest.approx(0.29, abs=0.005)


def test_icc_against_long_form_anova():
    rng = np.random.default_rng(0)
    truth = rng.uniform(100, 2000, 14)
    est = 1.05 * truth + rng.normal(0, 60, 14) - 20
    y = np.column_stack([est, truth])
    n, k = y.shape
    # sums of squares from the long-format table
    vals = y.ravel()
    rows = np.repeat(np.arange(n), k)
    cols = np.tile(np.arange(k), n)
    g = vals.mean()
    ss_r = sum(k * (vals[rows == i].mean() - g) ** 2 for i in range(n))
    ss_c = sum(n * (vals[cols == j].mean() - g) ** 2 for j in range(k))
    ss_e = np.sum((vals - g) ** 2) - ss_r - ss_c
    msr, msc, mse = ss_r / (n - 1), ss_c / (k - 1), ss_e / ((n - 1) * (k - 1))
    ref = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    assert icc_a1(est, truth) == pytest.approx(ref, rel=1e-12)


def test_statistic_examples():
    ref = np.linspace(200, 2000, 14)
    assert r_squared(ref, ref) == pytest.approx(1.0)
    assert icc_a1(ref, ref) == pytest.approx(1.0)
    assert r_squared(2 * ref + 3, ref) == pytest.approx(1.0)
    assert icc_a1(ref + 500, ref) < r_squared(ref + 500, ref)
    with pytest.raises(ValueError):
        r_squared([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        icc_a1([1, 2], [1, 2])
    with pytest.raises(ValueError):
        icc_a1([1, 2, np.nan], [1, 2, 3])
    with pytest.raises(ValueError):
        icc_a1([1, 2, 3, 4], [1, 2, 3])
    rep = agreement_report(ref * 1.01, ref, labels=[f"v{i}" for i in range(14)])
    assert rep.rows()[0][0] == "v0"
    assert rep.icc_a1 == pytest.approx(icc_a1(rep.estimate, rep.reference))


def test_icc_permutation_null():
    rng = np.random.default_rng(0)
    ref = rng.uniform(100, 2000, 14)
    iccs = [icc_a1(rng.permutation(ref), ref) for _ in range(200)]
    assert np.median(np.abs(iccs)) < 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 10), st.floats(-1000, 1000))
def test_r_squared_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(20), rng.standard_normal(20)
    assert r_squared(a * x + b, y) == pytest.approx(r_squared(x, y), rel=1e-6, abs=1e-12)
    assert -1 <= icc_a1(x, y) <= 1


def test_motion_agreement_examples():
    t = np.arange(100) * 40.0
    c, r = np.sin(t / 130), np.cos(t / 900)
    lat = LatentSignals(t, -c, 2 * r)
    res = motion_agreement(lat, c, r)
    assert res["cardiac"] == pytest.approx(1.0) and res["resp"] == pytest.approx(1.0)


def test_sector_angle_convention():
    # rows grow downward: 12 o'clock is negative dy; counterclockwise on screen reaches 9 o'clock next
    assert sector_angle(0.0, -1.0) == pytest.approx(0.0)
    assert sector_angle(-1.0, 0.0) == pytest.approx(np.pi / 2)
    assert sector_angle(0.0, 1.0) == pytest.approx(np.pi)
    assert sector_angle(1.0, 0.0) == pytest.approx(3 * np.pi / 2)


@pytest.mark.parametrize("border, r_in, r_out", [(0.0, 10, 20), (0.2, 12, 18)])
def test_concentric_circles_closed_form(border, r_in, r_out):
    expected = np.pi * (r_out ** 2 - r_in ** 2) / 6
    np.testing.assert_allclose(sector_areas_px(*CIRCLES, border_fraction=border), expected, rtol=0.005)
    np.testing.assert_allclose(sector_areas_quadrature(*CIRCLES, border_fraction=border), expected, rtol=1e-10)


def test_ellipse_sectors_match_quadrature_and_sum_to_ring():
    endo = ((1.5, -0.5), (7.0, 5.5))
    epi = ((0.0, 0.0), (13.0, 11.0))
    raster = sector_areas_px(endo, epi)
    quad = sector_areas_quadrature(endo, epi)
    np.testing.assert_allclose(raster, quad, rtol=0.02)
    assert raster.sum() == pytest.approx(quad.sum(), rel=0.01)
    full = sector_areas_px(endo, epi, border_fraction=0.0).sum()
    assert full == pytest.approx(np.pi * (13 * 11 - 7 * 5.5), rel=0.01)
    cx, cy = ring_centroid(endo, epi)
    assert cx < 0 and cy > 0


def test_sector_errors():
    with pytest.raises(ValueError):
        sector_areas_px(((0, 0), (20, 20)), ((0, 0), (10, 10)))
    with pytest.raises(ValueError):
        sector_areas_px(*CIRCLES, border_fraction=0.5)
    with pytest.raises(ValueError):
        sector_areas({"d": CIRCLES}, pixel_mm=0)


def test_phantom_sectors_grow_at_systole():
    spec = CardiacPhantomSpec()
    rep = sector_areas({"diastole": phantom_ellipses(spec, -1.0), "systole": phantom_ellipses(spec, 1.0)},
                       pixel_mm=2.0)
    assert np.all(rep.areas_cm2["systole"] > rep.areas_cm2["diastole"])
    assert np.all(rep.areas_cm2["diastole"] > 0)
    # px^2 to cm^2 with 2 mm pixels
    px = sector_areas_px(*phantom_ellipses(spec, -1.0))
    np.testing.assert_allclose(rep.areas_cm2["diastole"], px * 0.04)


def test_blood_pool_area_tracks_contraction():
    spec = CardiacPhantomSpec()
    masks = roi_masks(spec)
    amps = [0.4, 1.0, 0.2]
    frames = np.stack([render_frame(spec, amps, c) for c in (-1.0, 0.0, 1.0)])
    d, s, areas = cardiac_extremes(frames, masks)
    assert (d, s) == (0, 2)
    for c, a in zip((-1.0, 1.0), areas[[0, 2]]):
        (_, (ax, ay)), _ = phantom_ellipses(spec, c)
        assert a == pytest.approx(np.pi * ax * ay, rel=0.03)
    with pytest.raises(ValueError):
        blood_pool_area(render_frame(spec, [1.0, 1.0, 0.2], 0.0), masks)
