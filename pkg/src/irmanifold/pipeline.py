"""Pipeline stages. Each reads artifacts from the run directory, writes its own and
records input/output hashes in ``manifest.json``."""

from __future__ import annotations

import logging
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io
from .analysis import (agreement_report, blood_pool_area, cardiac_extremes, endo_ellipse_from_area,
                       motion_agreement, phantom_ellipses, roi_masks, roi_mean, sector_areas,
                       sector_areas_quadrature)
from .config import ConfigError, RunConfig
from .encoding import CoilMaps, DataConsistency, extract_navigator, make_coil_maps, simulate_acquisition
from .manifold import (LatentCode, TrainConfig, TrainState, TrainingDiverged, build_generator,
                       contrast_sweep, excite_cine, recovery_sampling, excite_contrast_only, generate_frames,
                       init_train_state, measurement_scale, schedule_contrast, train_generator)
from .motion import detrend_blocks, encode_motion, train_vae, zscore
from .nn import Network
from .phantom import CardiacPhantomSpec, VialPhantomSpec, _inside_ellipse, generate_ground_truth
from .relaxometry import build_dictionary, default_t1_grid, map_t1_image, vial_t1_grid
from .trajectory import golden_angle_schedule

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class StageInputError(FileNotFoundError):
    pass


def phantom_spec(cfg: RunConfig):
    params = dict(cfg.phantom.params)
    params.setdefault("grid", cfg.sequence.matrix_size)
    for key in ("t1_ms", "centers", "body_axes", "heart_center", "epi_axes", "endo_axes"):
        if key in params and isinstance(params[key], list):
            params[key] = tuple(tuple(v) if isinstance(v, list) else v for v in params[key])
    cls = VialPhantomSpec if cfg.phantom.kind == "vials" else CardiacPhantomSpec
    try:
        return cls(**params)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid phantom.params: {err}") from None


# ---- manifest ------------------------------------------------------------------

def _rel(out: Path, paths) -> dict:
    return {str(Path(p).relative_to(out)): io.sha256_file(p) for p in sorted(set(map(str, paths)))}


def _record(cfg: RunConfig, out: Path, stage: str, inputs, outputs) -> None:
    path = out / MANIFEST
    manifest = io.read_json(path) if path.exists() else {}
    manifest.update({
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "stage_seeds": {s: cfg.stage_seed(s) for s in ("simulate", "estimate_motion", "reconstruct",
                                                      "map_t1", "synth_cine")},
        "versions": {"irmanifold": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    })
    manifest.setdefault("stages", {})[stage] = {"inputs": _rel(out, inputs), "outputs": _rel(out, outputs)}
    io.write_json(path, manifest)


def _need(*paths):
    for p in paths:
        if not Path(p).exists():
            raise StageInputError(f"required input {p} is missing; run the earlier stage first")
    return [Path(p) for p in paths]


def _array_files(stem) -> list:
    stem = Path(stem)
    return [stem.with_suffix(".bin"), stem.with_suffix(".json")]


# ---- stages --------------------------------------------------------------------

def run_simulate(cfg: RunConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # the run directory is implied by where the file lives, so it is left out
    stored = cfg.to_dict()
    stored.pop("out_dir")
    io.write_json(out / "config.json", stored)
    schedule = golden_angle_schedule(cfg.sequence)
    spec = phantom_spec(cfg)
    truth = generate_ground_truth(spec, schedule, cfg.acquisition.binning)
    coils = make_coil_maps(cfg.acquisition.n_coils, cfg.sequence.matrix_size)
    series = simulate_acquisition(truth, schedule, coils, cfg.acquisition.binning,
                                  snr_db=cfg.acquisition.snr_db, seed=cfg.stage_seed("simulate"))
    outputs = [out / "config.json"]
    outputs += io.save_schedule(out / "schedule", schedule)
    outputs += io.save_ground_truth(out / "truth", truth)
    outputs += io.save_coils(out / "coils", coils.maps)
    outputs += io.save_series(out / "kspace", series)
    _record(cfg, out, "simulate", [], outputs)
    log.info("simulated %d frames from %d interleaves", len(series), len(schedule))
    return {"n_frames": len(series), "n_interleaves": len(schedule), "noise_sigma": series.noise_sigma}


def _load_coils(out: Path) -> CoilMaps:
    maps, _ = io.read_array(out / "coils")
    return CoilMaps(maps)


def run_estimate_motion(cfg: RunConfig, out) -> dict:
    out = Path(out)
    inputs = _need(out / "kspace.bin", out / "kspace_coords.bin", out / "schedule.bin", out / "truth_signals.bin")
    series = io.load_series(out / "kspace")
    schedule = io.load_schedule(out / "schedule")
    m = cfg.motion
    nav = extract_navigator(series, m.navigator_radius)
    nav = np.nan_to_num(zscore(detrend_blocks(nav, series.frame_times_ms, schedule.inversion_times_ms,
                                              m.detrend_taus_ms)))
    vae = train_vae(nav, latent_dim=m.latent_dim, epochs=m.epochs, beta=m.beta,
                    seed=cfg.stage_seed("estimate_motion"), batch_size=m.batch_size, lr=m.lr, hidden=m.hidden)
    latents = encode_motion(vae, nav, series.frame_times_ms, window=m.smoothing_window)
    latents.metadata["vae_final_loss"] = list(vae.history[-1])
    report = {"labeling_ok": latents.metadata["labeling_ok"], "peak_hz": latents.metadata["peak_hz"]}
    table, _ = io.read_array(out / "truth_signals")
    if latents.metadata["labeling_ok"] and table[:, 1].std() > 0 and table[:, 2].std() > 0:
        report["correlation"] = motion_agreement(latents, table[:, 1], table[:, 2])
    outputs = io.save_latents(out / "latents", latents)
    io.write_json(out / "motion_report.json", report)
    outputs.append(out / "motion_report.json")
    _record(cfg, out, "estimate_motion", inputs, outputs)
    return report


def _latent_code(cfg: RunConfig, out: Path, series, schedule):
    latents = io.load_latents(out / "latents")
    if len(latents) != len(series):
        raise ValueError(f"latents cover {len(latents)} frames but the series has {len(series)}")
    r = cfg.recon
    contrast = schedule_contrast(schedule, series.frame_times_ms, r.contrast_form, r.contrast_tau_ms)
    if latents.metadata.get("labeling_ok", False):
        k = r.motion_scale
        return LatentCode.from_signals(k * latents.resp, k * latents.cardiac, contrast), True
    log.warning("motion labeling failed; reconstructing with zero motion latents")
    zeros = np.zeros(len(series))
    return LatentCode.from_signals(zeros, zeros, contrast), False


def _trained_frames(cfg: RunConfig, schedule, n_frames: int) -> np.ndarray:
    """Frame indices after the skipped leading inversion blocks."""
    skip = cfg.recon.skip_blocks
    if skip >= schedule.params.n_inversions:
        raise ConfigError(f"recon.skip_blocks={skip} leaves none of the {schedule.params.n_inversions} blocks")
    per_block = schedule.params.interleaves_per_inversion // cfg.acquisition.binning
    return np.arange(skip * per_block, n_frames)


def _train_config(cfg: RunConfig) -> TrainConfig:
    r = cfg.recon
    return TrainConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr, lr_final=r.lr_final,
                       decay_start=r.decay_start, lam1=r.lam1, lam1_ratio=r.lam1_ratio, sigma=r.sigma, seed=cfg.stage_seed("reconstruct"))


def _save_state(out: Path, cfg: RunConfig, net: Network, state: TrainState) -> list:
    extra = {"epoch": state.epoch, "lam1": state.lam1, "scale": state.scale, "batch_size": state.batch_size,
             "config_hash": cfg.content_hash()}
    paths = io.save_checkpoint(out / "generator", net, state.adam, cfg.stage_seed("reconstruct"), extra)
    io.write_training_log(out / "training_log.csv", state.history)
    return paths + [out / "training_log.csv"]


def load_generator(out) -> tuple:
    """``(net, meta)`` of the trained generator in a run directory."""
    out = Path(out)
    _need(out / "generator.bin")
    net, _, meta = io.load_checkpoint(out / "generator")
    return net, meta


def run_reconstruct(cfg: RunConfig, out, resume: bool = True) -> dict:
    out = Path(out)
    inputs = _need(out / "kspace.bin", out / "coils.bin", out / "schedule.bin", out / "latents.csv")
    series = io.load_series(out / "kspace")
    schedule = io.load_schedule(out / "schedule")
    coils = _load_coils(out)
    code, used_motion = _latent_code(cfg, out, series, schedule)
    keep = _trained_frames(cfg, schedule, len(series))
    series, code = series.subset(keep), LatentCode(code.z[keep])
    tcfg = _train_config(cfg)
    net = build_generator(cfg.sequence.matrix_size, seed=tcfg.seed, channels=cfg.recon.channels)

    state = None
    if resume and (out / "generator.bin").exists():
        old, adam, meta = io.load_checkpoint(out / "generator")
        extra = meta.get("extra", {})
        if extra.get("config_hash") == cfg.content_hash() and old.n_params == net.n_params:
            net.set_params(old.params)
            state = TrainState(params=old.params.copy(), adam=adam, lam1=extra["lam1"],
                               batch_size=extra["batch_size"], epoch=extra["epoch"], scale=extra["scale"],
                               history=io.read_training_log(out / "training_log.csv")[:extra["epoch"]])
            log.info("resuming from epoch %d", state.epoch)
    scale = state.scale if state else measurement_scale(series, coils, target=cfg.recon.scale_target)
    dc = DataConsistency(series, coils, scale)
    if state is None:
        state = init_train_state(net, dc, code, tcfg, scale)

    def checkpoint(st):
        if st.epoch % cfg.recon.checkpoint_every == 0 or st.epoch == tcfg.epochs:
            _save_state(out, cfg, net, st)
        log.info("epoch %d data %.5g reg %.5g", *st.history[-1])

    try:
        probs = None
        if cfg.recon.sample_tau_ms is not None:
            probs = recovery_sampling(schedule.inversion_times_ms, series.frame_times_ms, cfg.recon.sample_tau_ms)
        state = train_generator(net, dc, code, tcfg, state, on_epoch=checkpoint, frame_probs=probs)
    except TrainingDiverged as err:
        net.set_params(err.state.params)
        _save_state(out, cfg, net, err.state)
        raise RuntimeError(f"{err}; last good checkpoint at epoch {err.state.epoch} saved") from None
    outputs = _save_state(out, cfg, net, state)
    info = {"scale": scale, "lam1": state.lam1, "epochs": state.epoch, "motion_latents": used_motion,
            "first_epoch_loss": state.history[0][1] + state.lam1 * state.history[0][2],
            "final_epoch_loss": state.history[-1][1] + state.lam1 * state.history[-1][2]}
    np.savetxt(out / "latent_code.csv", code.z, delimiter=",", header="resp,cardiac,contrast", comments="")
    io.write_json(out / "recon.json", info)
    outputs += [out / "recon.json", out / "latent_code.csv"]
    _record(cfg, out, "reconstruct", inputs, outputs)
    return info


def _fixed_latents(cfg: RunConfig, out: Path):
    z = np.loadtxt(out / "latent_code.csv", delimiter=",", skiprows=1, ndmin=2)
    return z, float(np.median(z[:, 0]))


def _scan_cardiac(net, scale, spec, fixed_resp, z, pct: float, n: int = 25):
    """Cardiac latent values of the largest and smallest blood pool at full recovery.

    The scan covers the ``pct`` to ``100 - pct`` percentile range of the
    training latents.
    """
    lo, hi = np.percentile(z[:, 1], [pct, 100 - pct])
    grid = np.linspace(lo, hi, n)
    frames = excite_cine(net, fixed_resp, 1.0, grid) / scale
    d, s, areas = cardiac_extremes(frames, roi_masks(spec))
    return float(grid[d]), float(grid[s])


def _roi_masks_for(spec, is_vials: bool) -> dict:
    if is_vials:
        frac = spec.fractions()
        return {name: frac[i] >= 0.999 for i, name in enumerate(spec.tissue_names[:14])}
    masks = roi_masks(spec)
    n = spec.grid
    y, x = np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij")
    (cx, cy), _, epi = spec.ellipses(-1.0, 0.0)
    body = _inside_ellipse(x, y, 0, 0, spec.body_axes[0] - 1, spec.body_axes[1] - 1)
    near_heart = _inside_ellipse(x, y, cx, cy, epi[0] + 1 + spec.resp_amplitude_px,
                                 epi[1] + 1 + spec.resp_amplitude_px)
    return {"myocardium": masks["myocardium"], "blood": masks["blood"], "background": body & ~near_heart}


def run_map_t1(cfg: RunConfig, out) -> dict:
    out = Path(out)
    inputs = _need(out / "generator.bin", out / "schedule.bin", out / "latent_code.csv", out / "recon.json")
    net, meta = load_generator(out)
    scale = meta["extra"]["scale"]
    schedule = io.load_schedule(out / "schedule")
    spec = phantom_spec(cfg)
    is_vials = isinstance(spec, VialPhantomSpec)
    z, fixed_resp = _fixed_latents(cfg, out)
    fixed_cardiac = 0.0
    if not is_vials and io.read_json(out / "recon.json")["motion_latents"]:
        fixed_cardiac, _ = _scan_cardiac(net, scale, spec, fixed_resp, z, cfg.mapping.cardiac_percentile)

    binning = cfg.acquisition.binning
    sweep = contrast_sweep(schedule, binning, cfg.recon.contrast_form, cfg.recon.contrast_tau_ms)
    kind = cfg.mapping.t1_grid
    grid = vial_t1_grid() if kind == "vials" or (kind == "auto" and is_vials) else default_t1_grid()
    dictionary = build_dictionary(schedule, grid, binning, fold_blocks=True, skip_blocks=cfg.recon.skip_blocks)
    series = excite_contrast_only(net, fixed_resp, fixed_cardiac, sweep, n_frames=dictionary.n_frames) / scale
    t1map = map_t1_image(series, dictionary, threshold=cfg.mapping.threshold)

    masks = _roi_masks_for(spec, is_vials)
    truth_t1 = dict(zip(spec.tissue_names, spec.tissue_t1))
    rows, est, ref, labels = [], [], [], []
    for name, mask in masks.items():
        vals = t1map.t1_ms[mask]
        mean = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        rows.append((name, mean, float(truth_t1[name]), int(mask.sum()), int(np.isfinite(vals).sum())))
        est.append(mean)
        ref.append(truth_t1[name])
        labels.append(name)
    outputs = io.save_dictionary(out / "dictionary", dictionary)
    outputs += io.save_t1map(out / "t1map", t1map)
    outputs += io.write_array(out / "contrast_only", series, "c8", {"contrast": sweep, "fixed_resp": fixed_resp,
                                                                   "fixed_cardiac": fixed_cardiac})
    io.write_csv(out / "roi_t1.csv", ["roi", "t1_estimate_ms", "t1_truth_ms", "pixels", "valid_pixels"], rows)
    report = {"fixed_resp": fixed_resp, "fixed_cardiac": fixed_cardiac,
              "rois": {r[0]: {"estimate_ms": r[1], "truth_ms": r[2]} for r in rows}}
    report.update(r_squared=None, icc_a1=None)
    if not np.all(np.isfinite(est)):
        report["error"] = "some regions have no valid T1 match"
    else:
        try:
            rep = agreement_report(est, ref, labels)
            report.update(r_squared=rep.r_squared, icc_a1=rep.icc_a1)
        except ValueError as err:
            report["error"] = f"agreement undefined: {err}"
    io.write_json(out / "agreement.json", report)
    outputs += [out / "roi_t1.csv", out / "agreement.json"]
    _record(cfg, out, "map_t1", inputs, outputs)
    return report


CINE_NAMES = ("black_blood", "black_myocardium", "bright_blood")


def run_synth_cine(cfg: RunConfig, out) -> dict:
    """Breath-held CINE at blood-null, myocardium-null and late-recovery contrasts, plus sector areas."""
    out = Path(out)
    inputs = _need(out / "generator.bin", out / "contrast_only.bin", out / "latent_code.csv")
    spec = phantom_spec(cfg)
    if not isinstance(spec, CardiacPhantomSpec):
        raise ValueError("CINE synthesis needs the cardiac phantom")
    net, meta = load_generator(out)
    scale = meta["extra"]["scale"]
    z, fixed_resp = _fixed_latents(cfg, out)
    series, cmeta = io.read_array(out / "contrast_only")
    contrast = np.asarray(cmeta["contrast"])
    masks = roi_masks(spec)
    blood = np.abs(roi_mean(series, masks["blood"]))
    myo = np.abs(roi_mean(series, masks["myocardium"]))
    contrasts = {"black_blood": float(contrast[np.argmin(blood)]),
                 "black_myocardium": float(contrast[np.argmin(myo)]),
                 "bright_blood": 1.0}
    c_dia, c_sys = _scan_cardiac(net, scale, spec, fixed_resp, z, cfg.mapping.cine_percentile)
    k = np.arange(cfg.mapping.cine_frames)
    sweep = c_dia + (c_sys - c_dia) * (1 - np.cos(2 * np.pi * k / k.size)) / 2
    outputs, stacks = [], {}
    for name in CINE_NAMES:
        stacks[name] = excite_cine(net, fixed_resp, contrasts[name], sweep) / scale
        outputs += io.write_array(out / f"cine_{name}", stacks[name], "c8",
                                  {"contrast": contrasts[name], "cardiac_latent": sweep})
    roi = {name: {"blood": float(np.abs(roi_mean(s, masks["blood"])).mean()),
                  "myocardium": float(np.abs(roi_mean(s, masks["myocardium"])).mean())}
           for name, s in stacks.items()}

    d_idx, s_idx, areas = cardiac_extremes(stacks["bright_blood"], masks)
    est = {"diastole": (endo_ellipse_from_area(spec, areas[d_idx]), phantom_ellipses(spec, -1.0)[1]),
           "systole": (endo_ellipse_from_area(spec, areas[s_idx]), phantom_ellipses(spec, 1.0)[1])}
    m = cfg.mapping
    report = sector_areas(est, m.n_sectors, m.border_fraction, m.pixel_mm)
    to_cm2 = (m.pixel_mm / 10) ** 2
    oracle = {"diastole": sector_areas_quadrature(*phantom_ellipses(spec, -1.0), m.n_sectors, m.border_fraction) * to_cm2,
              "systole": sector_areas_quadrature(*phantom_ellipses(spec, 1.0), m.n_sectors, m.border_fraction) * to_cm2}
    rows = []
    for phase in ("diastole", "systole"):
        for i in range(m.n_sectors):
            a, o = report.areas_cm2[phase][i], oracle[phase][i]
            rows.append((phase, i + 1, float(a), float(o), float((a - o) / o)))
    io.write_csv(out / "sectors.csv", ["phase", "sector", "area_cm2", "oracle_cm2", "relative_error"], rows)
    reduction = 1 - areas[s_idx] / areas[d_idx]
    summary = {"contrasts": contrasts, "roi_means": roi, "cardiac_latent": {"diastole": c_dia, "systole": c_sys},
               "blood_area_px": {"diastole": float(areas[d_idx]), "systole": float(areas[s_idx])},
               "area_reduction": float(reduction),
               "expected_area_reduction": float(1 - (1 - spec.contraction) ** 2),
               "max_sector_relative_error": float(max(abs(r[4]) for r in rows))}
    io.write_json(out / "sectors.json", summary)
    outputs += [out / "sectors.csv", out / "sectors.json"]
    _record(cfg, out, "synth_cine", inputs, outputs)
    return summary


def run_all(cfg: RunConfig, out) -> dict:
    results = {"simulate": run_simulate(cfg, out), "estimate_motion": run_estimate_motion(cfg, out),
               "reconstruct": run_reconstruct(cfg, out, resume=False), "map_t1": run_map_t1(cfg, out)}
    if cfg.phantom.kind == "cardiac":
        results["synth_cine"] = run_synth_cine(cfg, out)
    return results
