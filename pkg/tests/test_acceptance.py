"""End-to-end acceptance criteria.

Each ``test_criterion_NN_*`` checks one criterion at its stated tolerance and
records its measurements; the terminal summary prints one PASS/FAIL line per
criterion. Criteria 5 to 7 and 10 run the full pipeline on the configs in
``configs/`` and take tens of minutes on one CPU core.
"""

import json
import time

import numpy as np
import pytest

from conftest import CONFIGS
from gradcheck import check_network, fd_gradient, rel_error
from irmanifold import io
from irmanifold.analysis import phantom_ellipses, sector_areas_px, sector_areas_quadrature
from irmanifold.cli import main
from irmanifold.config import load_config
from irmanifold.encoding import adjoint, forward, make_coil_maps, sigma_for_snr
from irmanifold.manifold import LatentCode, TrainConfig, build_generator, generate_frames, train_generator
from irmanifold.motion import _vae_loss_grad, build_vae
from irmanifold.nn import init_network
from irmanifold.phantom import CardiacPhantomSpec, VialPhantomSpec, generate_ground_truth
from irmanifold.relaxometry import (_mz_readouts, build_dictionary, map_t1_image, match_fingerprint, match_many,
                                    simulate_readouts, steady_state_spgr, vial_t1_grid)
from irmanifold.trajectory import SequenceParams, golden_angle_schedule


def _timed_cli(*argv):
    t0 = time.perf_counter()
    code = main(list(argv))
    return code, time.perf_counter() - t0


@pytest.fixture(scope="module")
def vial_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("vials")
    code, seconds = _timed_cli("run-all", "--config", str(CONFIGS / "vials.json"), "--out", str(out))
    return out, code, seconds


@pytest.fixture(scope="module")
def dynamic_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("dynamic")
    cfg = str(CONFIGS / "dynamic.json")
    times = {}
    codes = []
    for stage in ("simulate", "estimate-motion", "reconstruct", "map-t1", "synth-cine"):
        code, times[stage] = _timed_cli(stage, "--config", cfg, "--out", str(out))
        codes.append(code)
        if code:
            break
    return out, codes, times


# ---- 1 ---------------------------------------------------------------------------

def test_criterion_01_adjointness(record_property):
    t0 = time.perf_counter()
    sch = golden_angle_schedule(SequenceParams())
    rng = np.random.default_rng(0)
    worst = 0.0
    for n_coils in (1, 4, 8):
        coils = make_coil_maps(n_coils, 64)
        for _ in range(100):
            start = int(rng.integers(0, len(sch) - 5))
            coords = sch.coords(np.arange(start, start + 5)).reshape(-1, 2)
            x = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
            y = rng.standard_normal((n_coils, coords.shape[0])) + 1j * rng.standard_normal((n_coils, coords.shape[0]))
            ax = forward(x, coords, coils)
            err = abs(np.vdot(y, ax) - np.vdot(adjoint(y, coords, coils), x)) / (np.linalg.norm(ax) * np.linalg.norm(y))
            worst = max(worst, err)
    seconds = time.perf_counter() - t0
    record_property("max_error", f"{worst:.2e}")
    record_property("seconds", round(seconds, 1))
    assert worst < 1e-10
    assert seconds < 60


# ---- 2 ---------------------------------------------------------------------------

def test_criterion_02_bloch_fidelity(record_property):
    sch = golden_angle_schedule(SequenceParams(samples_per_interleaf=4, interleaves_per_inversion=2000,
                                               n_inversions=1, tr_ms=1.0))
    m0 = 1.0
    errs = []
    for t1 in (250.0, 1000.0, 3000.0):
        mz = _mz_readouts(sch.times_ms, sch.inversion_times_ms, 0.0, t1, m0=m0)[:, 0]
        errs.append(np.max(np.abs(mz - m0 * (1 - 2 * np.exp(-sch.times_ms / t1)))) / m0)
    mz = _mz_readouts(sch.times_ms, sch.inversion_times_ms, 0.0, 1000.0)[:, 0]
    k = np.flatnonzero(np.diff(np.sign(mz)) > 0)[0]
    crossing = sch.times_ms[k] - mz[k] * (sch.times_ms[k + 1] - sch.times_ms[k]) / (mz[k + 1] - mz[k])
    long = golden_angle_schedule(SequenceParams(samples_per_interleaf=4, interleaves_per_inversion=5000,
                                                n_inversions=1))
    last = _mz_readouts(long.times_ms, [], 14.0, 1000.0)[-1, 0] * np.sin(np.deg2rad(14.0))
    ss_err = abs(last / steady_state_spgr(1000.0, 8.0, 14.0) - 1)
    record_property("ir_error_rel_m0", f"{max(errs):.1e}")
    record_property("zero_crossing_ms", round(crossing, 3))
    record_property("steady_state_rel", f"{ss_err:.1e}")
    assert max(errs) < 1e-12
    assert abs(crossing - 693.147) <= 0.5
    assert ss_err < 1e-9


# ---- 3 ---------------------------------------------------------------------------

LAYER_NETS = {
    "dense": ([{"type": "dense", "n_in": 6, "n_out": 5}], (6,)),
    "conv2d": ([{"type": "conv2d", "c_in": 3, "c_out": 4}], (6, 5, 3)),
    "upsample2x": ([{"type": "conv2d", "c_in": 2, "c_out": 2}, {"type": "upsample2x"}], (3, 4, 2)),
    "reshape": ([{"type": "dense", "n_in": 3, "n_out": 12}, {"type": "reshape", "shape": [2, 2, 3]}], (3,)),
    "leaky_relu": ([{"type": "dense", "n_in": 4, "n_out": 8}, {"type": "leaky_relu", "slope": 0.1}], (4,)),
    "relu": ([{"type": "dense", "n_in": 4, "n_out": 8}, {"type": "relu"}], (4,)),
    "tanh": ([{"type": "dense", "n_in": 4, "n_out": 8}, {"type": "tanh"}], (4,)),
}


def test_criterion_03_gradient_checks(record_property):
    t0 = time.perf_counter()
    errors = {}
    for name, (spec, shape) in LAYER_NETS.items():
        net = init_network(spec, shape, seed=1, dtype=np.float64)
        x = np.random.default_rng(2).standard_normal((3,) + shape)
        errors[name] = check_network(net, x)
    gen = build_generator(16, seed=0, dtype=np.float64)
    errors["generator"] = check_network(gen, np.random.default_rng(3).uniform(-1, 1, (2, 3)), n_probe=300)

    vae = build_vae(12, latent_dim=2, hidden=16, seed=0, dtype=np.float64)
    vae.encoder.layers[-1].b[2:] = -0.5
    rng = np.random.default_rng(4)
    x, eps = rng.standard_normal((6, 12)), rng.standard_normal((6, 2))

    def loss():
        r, k = _vae_loss_grad(vae, x, eps, 0.5)
        return r + 0.5 * k

    loss()
    analytic = np.concatenate([vae.encoder.grads, vae.decoder.grads])
    numeric = np.concatenate([fd_gradient(loss, net.params, np.arange(net.n_params))
                              for net in (vae.encoder, vae.decoder)])
    errors["vae"] = rel_error(analytic, numeric)
    seconds = time.perf_counter() - t0
    record_property("max_rel_error", f"{max(errors.values()):.1e}")
    record_property("seconds", round(seconds, 1))
    assert max(errors.values()) < 1e-4, errors
    assert seconds < 300


# ---- 4 ---------------------------------------------------------------------------

def test_criterion_04_mrf_oracle(record_property):
    t0 = time.perf_counter()
    sch = golden_angle_schedule(SequenceParams(samples_per_interleaf=4))
    d = build_dictionary(sch, vial_t1_grid(), 5, fold_blocks=True)
    t1, _, _, _ = match_many(d.atoms * 3.0, d)
    self_match = np.array_equal(t1, d.t1_grid_ms)

    rng = np.random.default_rng(0)
    off = rng.uniform(d.t1_grid_ms[0], d.t1_grid_ms[-1], 40)
    from irmanifold.relaxometry import bin_readouts
    signals = bin_readouts(simulate_readouts(sch, off), sch, 5, True).T
    nearest_ok = True
    for s, t in zip(signals, off):
        # brute force: explicit loop over atoms
        corr = [abs(np.dot(s, a)) / np.linalg.norm(s) for a in d.atoms]
        nearest_ok &= match_fingerprint(s, d).t1_ms == d.t1_grid_ms[int(np.argmax(corr))]

    spec = VialPhantomSpec()
    gt = generate_ground_truth(spec, sch)
    folded = gt.frames.reshape(5, 160, 64, 64).mean(axis=0).astype(np.complex128)
    sigma = sigma_for_snr(folded, 30.0)
    noisy = folded + sigma * (rng.standard_normal(folded.shape) + 1j * rng.standard_normal(folded.shape)) / np.sqrt(2)
    m = map_t1_image(noisy, d)
    frac = spec.fractions()
    errs = [abs(np.nanmean(m.t1_ms[frac[i] >= 0.999]) / t - 1) for i, t in enumerate(spec.t1_ms)]
    seconds = time.perf_counter() - t0
    record_property("max_vial_error_pct", round(100 * max(errs), 2))
    record_property("seconds", round(seconds, 1))
    assert self_match and nearest_ok
    assert max(errs) < 0.05
    assert seconds < 120


# ---- 5 and 10 (vial study) -------------------------------------------------------

def test_criterion_05_vial_study(vial_run, record_property):
    out, code, seconds = vial_run
    assert code == 0
    report = io.read_json(out / "agreement.json")
    record_property("r_squared", round(report["r_squared"], 4))
    record_property("icc_a1", round(report["icc_a1"], 4))
    record_property("minutes", round(seconds / 60, 1))
    assert report["r_squared"] >= 0.99
    assert report["icc_a1"] >= 0.99
    assert seconds <= 30 * 60


def test_criterion_10_training_health(vial_run, record_property):
    out, code, _ = vial_run
    assert code == 0
    recon = io.read_json(out / "recon.json")
    drop = recon["first_epoch_loss"] / recon["final_epoch_loss"]

    sch = golden_angle_schedule(SequenceParams(matrix_size=32, samples_per_interleaf=128,
                                               interleaves_per_inversion=40, n_inversions=1))
    spec = CardiacPhantomSpec(grid=32, body_axes=(14, 12), epi_axes=(7, 6.5), endo_axes=(4.5, 4.25))
    gt = generate_ground_truth(spec, sch)
    coils = make_coil_maps(2, 32)
    from irmanifold.encoding import DataConsistency, simulate_acquisition
    series = simulate_acquisition(gt, sch, coils)
    import dataclasses
    one = dataclasses.replace(series, coords=series.coords[3:4], data=series.data[3:4],
                              frame_times_ms=series.frame_times_ms[3:4], interleaf_index=series.interleaf_index[3:4])
    dc = DataConsistency(one, coils, 0.6 / np.abs(gt.frames).max())
    z = LatentCode(np.array([[0.0, 0.0, 0.1]]))
    net = build_generator(32, seed=0)
    train_generator(net, dc, z, TrainConfig(epochs=1500, batch_size=1, lr=3e-3, lam1=0.0))
    loss, _ = dc.loss_and_grad(generate_frames(net, z), [0])
    residual = float(np.sqrt(loss[0] / dc.b_energy[0]))
    record_property("loss_drop", round(drop, 1))
    record_property("overfit_residual", round(residual, 4))
    assert drop >= 10
    assert residual < 0.05


# ---- 6 and 7 (dynamic phantom) ---------------------------------------------------

def test_criterion_06_motion(dynamic_run, record_property):
    out, codes, times = dynamic_run
    assert codes[:2] == [0, 0]
    report = io.read_json(out / "motion_report.json")
    seconds = times["simulate"] + times["estimate-motion"]
    record_property("cardiac_r", round(report.get("correlation", {}).get("cardiac", float("nan")), 3))
    record_property("resp_r", round(report.get("correlation", {}).get("resp", float("nan")), 3))
    record_property("minutes", round(seconds / 60, 1))
    assert report["labeling_ok"]
    assert report["correlation"]["cardiac"] > 0.9 and report["correlation"]["resp"] > 0.9
    assert seconds <= 10 * 60


def test_criterion_07_joint_recovery(dynamic_run, record_property):
    out, codes, times = dynamic_run
    assert codes == [0] * 5
    rois = io.read_json(out / "agreement.json")["rois"]
    sectors = io.read_json(out / "sectors.json")
    err = {k: abs(rois[k]["estimate_ms"] / rois[k]["truth_ms"] - 1) for k in ("myocardium", "blood")}
    bb = sectors["roi_means"]["black_blood"]
    null_ratio = bb["blood"] / bb["myocardium"]
    area_ratio = sectors["area_reduction"] / sectors["expected_area_reduction"]
    minutes = sum(times.values()) / 60
    record_property("myo_err_pct", round(100 * err["myocardium"], 1))
    record_property("blood_err_pct", round(100 * err["blood"], 1))
    record_property("blood_null_ratio", round(null_ratio, 3))
    record_property("area_reduction_vs_expected", round(area_ratio, 3))
    record_property("minutes", round(minutes, 1))
    assert err["myocardium"] < 0.10 and err["blood"] < 0.10
    assert null_ratio < 0.3
    assert 0.8 <= area_ratio <= 1.2
    assert minutes <= 45


# ---- 8 ---------------------------------------------------------------------------

def test_criterion_08_sectors(dynamic_run, record_property):
    circles = (((0.0, 0.0), (10.0, 10.0)), ((0.0, 0.0), (20.0, 20.0)))
    analytic = max(np.max(np.abs(sector_areas_px(*circles, border_fraction=b) / (np.pi * (o ** 2 - i ** 2) / 6) - 1))
                   for b, i, o in ((0.0, 10, 20), (0.2, 12, 18)))
    spec = CardiacPhantomSpec()
    geometry = max(np.max(np.abs(sector_areas_px(*phantom_ellipses(spec, c)) /
                                 sector_areas_quadrature(*phantom_ellipses(spec, c)) - 1)) for c in (-1.0, 1.0))
    out, codes, _ = dynamic_run
    assert codes == [0] * 5
    recovered = io.read_json(out / "sectors.json")["max_sector_relative_error"]
    record_property("circle_error_pct", round(100 * analytic, 3))
    record_property("phantom_raster_error_pct", round(100 * geometry, 2))
    record_property("recovered_sector_error_pct", round(100 * recovered, 1))
    assert analytic < 0.005
    assert geometry < 0.10
    assert recovered < 0.10


# ---- 9 ---------------------------------------------------------------------------

def test_criterion_09_determinism(small_runs, record_property):
    a, b = small_runs
    same = (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    n_outputs = sum(len(s["outputs"]) for s in json.loads((a / "manifest.json").read_text())["stages"].values())
    record_property("artifacts_hashed", n_outputs)
    assert same
