import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irmanifold.encoding import (CoilMaps, DataConsistency, NormalOperator, adjoint, extract_navigator, forward,
                                 frame_coords, make_coil_maps, pixel_coords, sigma_for_snr, simulate_acquisition,
                                 uniform_coil)
from irmanifold.phantom import CardiacPhantomSpec, VialPhantomSpec, generate_ground_truth
from irmanifold.trajectory import SequenceParams, SpiralInterleaf, density_compensation, golden_angle_schedule


def dense_oracle(image, coords, coils):
    n = image.shape[0]
    y, x = np.meshgrid(pixel_coords(n), pixel_coords(n), indexing="ij")
    phase = np.exp(-2j * np.pi * (np.outer(coords[:, 0], x.ravel()) + np.outer(coords[:, 1], y.ravel())))
    return np.stack([phase @ (s * image).ravel() for s in coils.maps])


def rand_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_delta_gives_unit_samples():
    img = np.zeros((16, 16), complex)
    img[8, 8] = 1
    coords = np.random.default_rng(0).uniform(-0.5, 0.5, (50, 2))
    np.testing.assert_allclose(forward(img, coords, uniform_coil(16)), 1, atol=1e-14)
    assert np.all(forward(np.zeros((16, 16)), coords, uniform_coil(16)) == 0)


def test_forward_matches_dense_dft():
    rng = np.random.default_rng(1)
    coils = make_coil_maps(3, 16)
    img = rand_complex(rng, (16, 16))
    coords = rng.uniform(-0.5, 0.5, (300, 2))
    ref = dense_oracle(img, coords, coils)
    np.testing.assert_allclose(forward(img, coords, coils), ref, atol=1e-10 * np.abs(ref).max())


def test_single_center_sample_adjoint_is_constant():
    img = adjoint(np.array([[2.0 + 0j]]), np.zeros((1, 2)), uniform_coil(8))
    np.testing.assert_allclose(img, 2.0)


@pytest.mark.parametrize("n_coils", [1, 4, 8])
def test_adjoint_identity(n_coils):
    rng = np.random.default_rng(n_coils)
    coils = make_coil_maps(n_coils, 32)
    coords = rng.uniform(-0.5, 0.5, (700, 2))
    x = rand_complex(rng, (32, 32))
    y = rand_complex(rng, (n_coils, 700))
    ax = forward(x, coords, coils)
    err = abs(np.vdot(y, ax) - np.vdot(adjoint(y, coords, coils), x))
    assert err / (np.linalg.norm(ax) * np.linalg.norm(y)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3))
def test_forward_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    coils = make_coil_maps(2, 8)
    coords = rng.uniform(-0.5, 0.5, (40, 2))
    x, y = rand_complex(rng, (8, 8)), rand_complex(rng, (8, 8))
    lhs = forward(alpha * x + y, coords, coils)
    rhs = alpha * forward(x, coords, coils) + forward(y, coords, coils)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11 * (1 + np.abs(lhs).max()))


def test_coil_maps_normalized_and_validation():
    maps = make_coil_maps(8, 64).maps
    np.testing.assert_allclose(np.sum(np.abs(maps) ** 2, axis=0), 1, atol=1e-6)
    with pytest.raises(ValueError):
        make_coil_maps(0, 16)
    with pytest.raises(ValueError):
        forward(np.zeros((8, 8)), np.zeros((3, 2)), uniform_coil(16))
    with pytest.raises(ValueError):
        adjoint(np.zeros((2, 3)), np.zeros((3, 2)), uniform_coil(16))


@pytest.fixture(scope="module")
def small_setup():
    sch = golden_angle_schedule(SequenceParams(interleaves_per_inversion=100, n_inversions=2, matrix_size=16,
                                               samples_per_interleaf=64))
    spec = VialPhantomSpec(grid=16, radius=1.0,
                           centers=tuple((float(x), float(y)) for x, y in
                                         zip([-6, -3, 0, 3, 6, -6, -3, 0, 3, 6, -4.5, -1.5, 1.5, 4.5],
                                             [-5, -5, -5, -5, -5, 0, 0, 0, 0, 0, 5, 5, 5, 5])))
    return sch, generate_ground_truth(spec, sch)


def test_noiseless_acquisition_is_forward(small_setup):
    sch, gt = small_setup
    coils = make_coil_maps(2, 16)
    ser = simulate_acquisition(gt, sch, coils)
    assert len(ser) == 40 and ser.samples_per_frame == 5 * 64
    ref = forward(gt.frames[7].astype(complex), ser.coords[7], coils)
    np.testing.assert_allclose(ser.data[7], ref.astype(np.complex64))
    assert ser.coords.shape[0] * ser.coords.shape[1] == len(sch) * 64


def test_series_subset_keeps_frames(small_setup):
    sch, gt = small_setup
    ser = simulate_acquisition(gt, sch, make_coil_maps(2, 16))
    sub = ser.subset([3, 7])
    assert len(sub) == 2 and sub.noise_sigma == ser.noise_sigma
    np.testing.assert_array_equal(sub.data[1], ser.data[7])
    np.testing.assert_array_equal(sub.frame_times_ms, ser.frame_times_ms[[3, 7]])


def test_noise_reproducible_and_snr(small_setup):
    sch, gt = small_setup
    coils = make_coil_maps(2, 16)
    a = simulate_acquisition(gt, sch, coils, snr_db=30, seed=3)
    b = simulate_acquisition(gt, sch, coils, snr_db=30, seed=3)
    c = simulate_acquisition(gt, sch, coils, snr_db=30, seed=4)
    clean = simulate_acquisition(gt, sch, coils)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, c.data)
    noise = a.data.astype(complex) - clean.data
    snr = 20 * np.log10(np.linalg.norm(clean.data) / np.linalg.norm(noise))
    assert abs(snr - 30) < 0.5
    assert a.noise_sigma == pytest.approx(sigma_for_snr(clean.data, 30))


def test_navigator_counts_and_static_variance(small_setup):
    sch, gt = small_setup
    coils = make_coil_maps(4, 16)
    ser = simulate_acquisition(gt, sch, coils)
    nav = extract_navigator(ser, radius=1e-3, zscore=False)
    assert nav.shape == (40, 2 * 5 * 4)
    with pytest.raises(ValueError):
        extract_navigator(ser, radius=0.0)
    # contrast frozen: replace every frame by the last one
    frozen = type(gt)(np.repeat(gt.frames[-1:], 40, axis=0), gt.cardiac_signal, gt.resp_signal, gt.t1_map,
                      gt.labels, gt.tissue_names, gt.frame_times_ms, gt.tissue_amplitudes)
    nav = extract_navigator(simulate_acquisition(frozen, sch, coils), radius=1e-3)
    assert np.all(nav == 0)


def test_navigator_pca_tracks_respiration():
    from irmanifold.motion import detrend_blocks
    sch = golden_angle_schedule(SequenceParams(samples_per_interleaf=64, matrix_size=32))
    spec = CardiacPhantomSpec(grid=32, body_axes=(14, 12), epi_axes=(7, 6.5), endo_axes=(4.5, 4.25),
                              resp_amplitude_px=2.0)
    gt = generate_ground_truth(spec, sch)
    ser = simulate_acquisition(gt, sch, make_coil_maps(4, 32))
    nav = detrend_blocks(extract_navigator(ser), ser.frame_times_ms, sch.inversion_times_ms)
    u, s, vt = np.linalg.svd(nav - nav.mean(0), full_matrices=False)
    r = max(abs(np.corrcoef(u[:, k], gt.resp_signal)[0, 1]) for k in range(3))
    assert r > 0.8


def test_density_compensated_adjoint_reproduces_smooth_image():
    n = 64
    sch = golden_angle_schedule(SequenceParams(n_inversions=1, interleaves_per_inversion=800))
    coords = sch.coords().reshape(-1, 2)
    y, x = np.meshgrid(pixel_coords(n), pixel_coords(n), indexing="ij")
    img = np.exp(-(x ** 2 + y ** 2) / (2 * 8.0 ** 2)) * (1 + 0.3 * np.cos(x / 5))
    coils = uniform_coil(n)
    w = np.tile(density_compensation(sch.base), len(sch))
    rec = adjoint(forward(img.astype(complex), coords, coils) * w, coords, coils)
    corr = abs(np.vdot(rec, img)) / (np.linalg.norm(rec) * np.linalg.norm(img))
    assert corr > 0.95


def test_normal_operator_matches_forward_adjoint():
    rng = np.random.default_rng(5)
    coils = make_coil_maps(3, 16)
    coords = rng.uniform(-0.5, 0.5, (2, 200, 2))
    x = rand_complex(rng, (2, 16, 16))
    normal = NormalOperator(coords, coils).apply(x)
    for i in range(2):
        ref = adjoint(forward(x[i], coords[i], coils), coords[i], coils)
        np.testing.assert_allclose(normal[i], ref, atol=1e-10 * np.abs(ref).max())


def test_data_consistency_loss_and_gradient(small_setup):
    sch, gt = small_setup
    coils = make_coil_maps(2, 16)
    ser = simulate_acquisition(gt, sch, coils, snr_db=20, seed=1)
    dc = DataConsistency(ser, coils, scale=1.7)
    rng = np.random.default_rng(0)
    x = rand_complex(rng, (3, 16, 16))
    frames = [0, 5, 9]
    loss, grad = dc.loss_and_grad(x, frames)
    for k, i in enumerate(frames):
        r = forward(x[k], ser.coords[i], coils) - 1.7 * ser.data[i].astype(complex)
        assert loss[k] == pytest.approx(np.sum(np.abs(r) ** 2), rel=1e-10)
        ref = 2 * adjoint(r, ser.coords[i], coils)
        np.testing.assert_allclose(grad[k], ref, atol=1e-10 * np.abs(ref).max())


def test_frame_coords_requires_divisor():
    sch = golden_angle_schedule(SequenceParams(interleaves_per_inversion=12, n_inversions=1))
    with pytest.raises(ValueError):
        frame_coords(sch, 5)


def test_weighted_data_consistency(small_setup):
    sch, gt = small_setup
    coils = make_coil_maps(2, 16)
    ser = simulate_acquisition(gt, sch, coils, snr_db=20, seed=1)
    w = np.random.default_rng(3).uniform(0.2, 2.0, ser.samples_per_frame)
    dc = DataConsistency(ser, coils, scale=0.8, weights=w)
    x = rand_complex(np.random.default_rng(4), (2, 16, 16))
    loss, grad = dc.loss_and_grad(x, [1, 6])
    for k, i in enumerate([1, 6]):
        r = forward(x[k], ser.coords[i], coils) - 0.8 * ser.data[i].astype(complex)
        assert loss[k] == pytest.approx(np.sum(w * np.abs(r) ** 2), rel=1e-10)
        ref = 2 * adjoint(w * r, ser.coords[i], coils)
        np.testing.assert_allclose(grad[k], ref, atol=1e-10 * np.abs(ref).max())
    with pytest.raises(ValueError):
        DataConsistency(ser, coils, weights=w[:-1])
