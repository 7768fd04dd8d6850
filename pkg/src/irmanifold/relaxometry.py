"""IR-SPGR signal simulation, MRF dictionaries and exponential-model fitting.

Signals follow the spoiled gradient-echo convention ``Mz * sin(flip)``
sampled just before each excitation; transverse magnetization is assumed
perfectly spoiled between readouts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .trajectory import TrajectorySchedule


@dataclass(frozen=True)
class TissueParams:
    t1_ms: float
    m0: float = 1.0

    def __post_init__(self):
        if not self.t1_ms > 0:
            raise ValueError(f"t1_ms must be positive, got {self.t1_ms}")
        if not self.m0 > 0:
            raise ValueError(f"m0 must be positive, got {self.m0}")


@dataclass(frozen=True)
class SignalEvolution:
    times_ms: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class Dictionary:
    t1_grid_ms: np.ndarray
    atoms: np.ndarray  # (n_t1, n_frames), unit l2 rows
    schedule_hash: str
    frame_binning: int = 1
    folded: bool = False
    skipped_blocks: int = 0  # leading inversion blocks left out of the fold

    def __len__(self) -> int:
        return int(self.t1_grid_ms.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.atoms.shape[1])


class Match(NamedTuple):
    t1_ms: float
    scale: complex
    correlation: float


@dataclass(frozen=True)
class T1Map:
    t1_ms: np.ndarray  # NaN where invalid
    correlation: np.ndarray
    scale: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class ThreeParamFit:
    a: float
    b: float
    t1_star_ms: float
    residual: float
    low_confidence: bool


def _mz_readouts(times_ms, inversion_times_ms, flip_deg, t1_ms, m0=1.0, inv_efficiency=1.0):
    """Longitudinal magnetization just before each readout, shape ``(n_readouts, n_t1)``.

    Inversions coinciding with a readout are applied first.
    """
    t1 = np.atleast_1d(np.asarray(t1_ms, dtype=np.float64))
    if np.any(t1 <= 0):
        raise ValueError("t1_ms must be positive")
    times = np.asarray(times_ms, dtype=np.float64)
    inversions = np.sort(np.asarray(inversion_times_ms, dtype=np.float64))
    cos_a = np.cos(np.deg2rad(flip_deg))
    rate = 1.0 / t1

    mz = np.full(t1.shape, float(m0))
    out = np.empty((times.size, t1.size))
    t_prev = 0.0
    next_inv = 0
    # exp(-dt/T1) is reused for the (very common) repeated TR gap
    cached_dt, cached_e = None, None
    for n, t in enumerate(times):
        while next_inv < inversions.size and inversions[next_inv] <= t:
            ti = inversions[next_inv]
            mz = m0 + (mz - m0) * np.exp(-(ti - t_prev) * rate)
            mz = -inv_efficiency * mz
            t_prev = ti
            next_inv += 1
        dt = t - t_prev
        if dt != cached_dt:
            cached_dt, cached_e = dt, np.exp(-dt * rate)
        mz = m0 + (mz - m0) * cached_e
        out[n] = mz
        mz = mz * cos_a
        t_prev = t
    return out


def simulate_ir_spgr(schedule: TrajectorySchedule, tissue: TissueParams,
                     inv_efficiency: float = 1.0, flip_deg: float | None = None) -> SignalEvolution:
    """Event-driven Bloch recursion over the schedule's inversions and readouts."""
    if not 0 < inv_efficiency <= 1:
        raise ValueError("inv_efficiency must lie in (0, 1]")
    flip = schedule.params.flip_deg if flip_deg is None else flip_deg
    mz = _mz_readouts(schedule.times_ms, schedule.inversion_times_ms, flip,
                      tissue.t1_ms, tissue.m0, inv_efficiency)[:, 0]
    return SignalEvolution(times_ms=schedule.times_ms.copy(), values=mz * np.sin(np.deg2rad(flip)))


def simulate_readouts(schedule: TrajectorySchedule, t1_ms, m0: float = 1.0,
                      inv_efficiency: float = 1.0) -> np.ndarray:
    """Readout signals for many T1 values at once, shape ``(n_readouts, n_t1)``."""
    flip = schedule.params.flip_deg
    mz = _mz_readouts(schedule.times_ms, schedule.inversion_times_ms, flip, t1_ms, m0, inv_efficiency)
    return mz * np.sin(np.deg2rad(flip))


def steady_state_spgr(t1_ms: float, tr_ms: float, flip_deg: float) -> float:
    e1 = np.exp(-tr_ms / t1_ms)
    a = np.deg2rad(flip_deg)
    return float(np.sin(a) * (1.0 - e1) / (1.0 - e1 * np.cos(a)))


def bin_readouts(signals: np.ndarray, schedule: TrajectorySchedule, frame_binning: int,
                 fold_blocks: bool = False, skip_blocks: int = 0) -> np.ndarray:
    """Average consecutive readouts into frames (axis 0).

    With ``fold_blocks`` the frames of every inversion block after the first
    ``skip_blocks`` are averaged together, giving one sweep on the
    time-since-inversion axis.
    """
    p = schedule.params
    if frame_binning < 1 or p.interleaves_per_inversion % frame_binning:
        raise ValueError(
            f"binning {frame_binning} does not divide the {p.interleaves_per_inversion} "
            "readouts of an inversion block")
    if signals.shape[0] != len(schedule):
        raise ValueError("signal length does not match the schedule")
    if skip_blocks and not fold_blocks:
        raise ValueError("skip_blocks applies only when folding blocks")
    if not 0 <= skip_blocks < p.n_inversions:
        raise ValueError(f"cannot skip {skip_blocks} of {p.n_inversions} inversion blocks")
    frames = signals.reshape(-1, frame_binning, *signals.shape[1:]).mean(axis=1)
    if fold_blocks:
        per_block = p.interleaves_per_inversion // frame_binning
        frames = frames.reshape(p.n_inversions, per_block, *frames.shape[1:])[skip_blocks:].mean(axis=0)
    return frames


def build_dictionary(schedule: TrajectorySchedule, t1_grid_ms, frame_binning: int = 5,
                     fold_blocks: bool = False, inv_efficiency: float = 1.0, skip_blocks: int = 0) -> Dictionary:
    grid = np.asarray(t1_grid_ms, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("t1 grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("t1 grid must be strictly increasing")
    signals = simulate_readouts(schedule, grid, inv_efficiency=inv_efficiency)
    atoms = bin_readouts(signals, schedule, frame_binning, fold_blocks, skip_blocks).T
    norms = np.linalg.norm(atoms, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("a simulated fingerprint is identically zero")
    return Dictionary(t1_grid_ms=grid, atoms=atoms / norms, schedule_hash=schedule.content_hash(),
                      frame_binning=frame_binning, folded=fold_blocks, skipped_blocks=skip_blocks)


def default_t1_grid(low_ms: float = 100.0, high_ms: float = 3000.0, step_ms: float = 10.0) -> np.ndarray:
    return np.arange(low_ms, high_ms + 0.5 * step_ms, step_ms)


def vial_t1_grid() -> np.ndarray:
    """Extended grid for relaxometry phantoms with very short T1 vials."""
    return np.concatenate([np.arange(10.0, 100.0, 1.0), default_t1_grid()])


def _correlate(signals: np.ndarray, dictionary: Dictionary):
    # signals: (P, L) real or complex
    inner = signals @ dictionary.atoms.T
    norms = np.linalg.norm(signals, axis=1)
    return inner, norms


def match_many(signals: np.ndarray, dictionary: Dictionary):
    """Vectorized :func:`match_fingerprint`; returns (t1, scale, correlation, valid)."""
    signals = np.atleast_2d(signals)
    if signals.shape[1] != dictionary.n_frames:
        raise ValueError(
            f"signal length {signals.shape[1]} != atom length {dictionary.n_frames}")
    inner, norms = _correlate(signals, dictionary)
    valid = norms > 0
    # argmax picks the first maximum, i.e. the smaller T1 on ties
    best = np.argmax(np.abs(inner), axis=1)
    rows = np.arange(signals.shape[0])
    scale = inner[rows, best]
    corr = np.zeros(signals.shape[0])
    corr[valid] = np.abs(scale[valid]) / norms[valid]
    corr = np.clip(corr, 0.0, 1.0)
    t1 = np.where(valid, dictionary.t1_grid_ms[best], np.nan)
    scale = np.where(valid, scale, 0)
    return t1, scale, corr, valid


def match_fingerprint(signal, dictionary: Dictionary) -> Match:
    """Best atom by normalized absolute inner product.

    A zero signal yields ``Match(nan, 0, 0)``.
    """
    t1, scale, corr, _ = match_many(np.asarray(signal)[None, :], dictionary)
    s = scale[0]
    return Match(float(t1[0]), complex(s) if np.iscomplexobj(s) else float(s), float(corr[0]))


def map_t1_image(series: np.ndarray, dictionary: Dictionary, threshold: float = 0.02,
                 use_magnitude: bool = False) -> T1Map:
    """Pixel-wise fingerprint matching of a ``(n_frames, H, W)`` series.

    Pixels whose fingerprint norm falls below ``threshold`` times the largest
    pixel norm are treated as background. ``use_magnitude`` matches ``|series|``
    against magnitude atoms, for data whose polarity is unknown.
    """
    series = np.asarray(series)
    if series.ndim != 3:
        raise ValueError("series must have shape (n_frames, H, W)")
    if series.shape[0] != dictionary.n_frames:
        raise ValueError(f"series has {series.shape[0]} frames, dictionary atoms have {dictionary.n_frames}")
    if use_magnitude:
        atoms = np.abs(dictionary.atoms)
        atoms = atoms / np.linalg.norm(atoms, axis=1, keepdims=True)
        dictionary = Dictionary(dictionary.t1_grid_ms, atoms, dictionary.schedule_hash,
                                dictionary.frame_binning, dictionary.folded)
        series = np.abs(series)
    shape = series.shape[1:]
    signals = series.reshape(series.shape[0], -1).T
    norms = np.linalg.norm(signals, axis=1)
    keep = norms > threshold * norms.max() if norms.max() > 0 else np.zeros(norms.shape, bool)

    t1 = np.full(norms.shape, np.nan)
    corr = np.zeros(norms.shape)
    scale = np.zeros(norms.shape, dtype=np.result_type(signals.dtype, np.float64))
    if keep.any():
        t1_k, scale_k, corr_k, valid_k = match_many(signals[keep], dictionary)
        t1[keep], scale[keep], corr[keep] = t1_k, scale_k, corr_k
        keep[keep] = valid_k
    return T1Map(t1_ms=t1.reshape(shape), correlation=corr.reshape(shape),
                 scale=scale.reshape(shape), valid=keep.reshape(shape))


def _linear_fit(ti, s, t1_star):
    design = np.stack([np.ones_like(ti), -np.exp(-ti / t1_star)], axis=1)
    coef, *_ = np.linalg.lstsq(design, s, rcond=None)
    resid = s - design @ coef
    return coef, float(resid @ resid)


def fit_three_param(ti_ms, s, n_grid: int = 400) -> ThreeParamFit:
    """Least-squares fit of ``S(TI) = A - B exp(-TI / T1*)``.

    A log-spaced grid over T1* (with the linear parameters solved exactly at
    each node) is followed by bounded scalar refinement around the best node.
    """
    ti = np.asarray(ti_ms, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if ti.shape != s.shape or ti.ndim != 1:
        raise ValueError("ti_ms and s must be 1-D and equally long")
    distinct = np.unique(ti)
    if distinct.size < 3:
        raise ValueError("need at least 3 distinct inversion times")
    spacing = np.diff(distinct).min()
    grid = np.geomspace(0.1 * spacing, 10.0 * distinct.max(), n_grid)
    sse = np.array([_linear_fit(ti, s, g)[1] for g in grid])
    k = int(np.argmin(sse))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    res = minimize_scalar(lambda g: _linear_fit(ti, s, g)[1], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * hi, "maxiter": 500})
    t1_star = float(res.x) if res.fun <= sse[k] else float(grid[k])
    (a, b), sse_best = _linear_fit(ti, s, t1_star)
    scale = max(np.abs(s).max(), np.finfo(float).tiny)
    low_conf = bool(abs(b) <= 1e-6 * scale or k in (0, n_grid - 1))
    return ThreeParamFit(a=float(a), b=float(b), t1_star_ms=t1_star,
                         residual=float(np.sqrt(sse_best / s.size)), low_confidence=low_conf)


def restore_polarity(ti_ms, magnitude):
    """Recover signed IR data from magnitudes by testing every sign-flip point.

    The first ``k`` samples (in TI order) are negated for ``k = 0..n`` and
    the fit with the smallest residual wins. Returns ``(signed, fit)``.
    """
    ti = np.asarray(ti_ms, dtype=np.float64)
    mag = np.abs(np.asarray(magnitude, dtype=np.float64))
    order = np.argsort(ti)
    best = None
    for k in range(ti.size + 1):
        signed = mag[order].copy()
        signed[:k] *= -1
        fit = fit_three_param(ti[order], signed)
        if best is None or fit.residual < best[1].residual:
            best = (signed, fit)
    signed = np.empty_like(mag)
    signed[order] = best[0]
    return signed, best[1]


def look_locker_correct(a: float, b: float, t1_star_ms: float) -> float:
    """``T1 = T1* (B/A - 1)``; NaN when ``A <= 0`` or ``B/A <= 1``."""
    if not a > 0 or b / a <= 1:
        return float("nan")
    return float(t1_star_ms * (b / a - 1.0))
