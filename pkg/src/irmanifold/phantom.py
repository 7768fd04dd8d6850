"""Analytic ground-truth phantoms: a 14-vial relaxometry phantom and a beating heart.

Images use centered pixel coordinates ``x = col - N/2`` and ``y = row - N/2``,
so rows grow downward and "up" on screen is ``-y``. Tissue occupancy is
rasterized with supersampling into fractions that sum to one per pixel
(air included), which keeps partial-volume edges unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .relaxometry import bin_readouts, simulate_readouts
from .trajectory import TrajectorySchedule

SUPERSAMPLE = 4


def default_vial_t1() -> tuple:
    """Geometric 14-step T1 ladder from 22 ms to 2480 ms."""
    return tuple(float(v) for v in np.round(np.geomspace(22.0, 2480.0, 14), 2))


def default_vial_layout(n_outer: int = 10, n_inner: int = 4, r_outer: float = 21.0,
                        r_inner: float = 8.5) -> tuple:
    """Vial centers on two concentric rings, outer ring first, 12 o'clock start."""
    centers = []
    for n, r, offset in ((n_outer, r_outer, 0.0), (n_inner, r_inner, 0.25)):
        ang = 2 * np.pi * (np.arange(n) + offset) / n
        centers += [(float(r * -np.sin(a)), float(-r * np.cos(a))) for a in ang]
    return tuple(centers)


def _subsample_grid(n: int, supersample: int = SUPERSAMPLE):
    """Subsample centers, shape ``(n, n, s*s)`` each for x and y."""
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    base = np.arange(n) - n // 2
    ys = (base[:, None] + off[None, :]).reshape(-1)
    xs = ys.copy()
    y, x = np.meshgrid(ys, xs, indexing="ij")
    s = supersample
    y = y.reshape(n, s, n, s).transpose(0, 2, 1, 3).reshape(n, n, s * s)
    x = x.reshape(n, s, n, s).transpose(0, 2, 1, 3).reshape(n, n, s * s)
    return x, y


def _inside_ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


@dataclass(frozen=True)
class VialPhantomSpec:
    grid: int = 64
    t1_ms: tuple = field(default_factory=default_vial_t1)
    centers: tuple = field(default_factory=default_vial_layout)
    radius: float = 4.0
    m0: float = 1.0
    background_m0: float = 0.0
    background_t1_ms: float = 3000.0

    def __post_init__(self):
        if len(self.t1_ms) != 14 or len(self.centers) != 14:
            raise ValueError("the relaxometry phantom has exactly 14 vials")
        if any(t <= 0 for t in self.t1_ms):
            raise ValueError("vial T1 values must be positive")
        c = np.asarray(self.centers, dtype=float)
        dist = np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 2 * self.radius:
            raise ValueError("vials overlap")
        if np.abs(c).max() + self.radius >= self.grid / 2:
            raise ValueError("vials extend past the field of view")

    @property
    def tissue_names(self) -> list:
        names = [f"vial{i + 1:02d}" for i in range(14)]
        return names + (["background"] if self.background_m0 > 0 else [])

    @property
    def tissue_t1(self) -> np.ndarray:
        t1 = list(self.t1_ms) + ([self.background_t1_ms] if self.background_m0 > 0 else [])
        return np.asarray(t1, dtype=float)

    @property
    def tissue_m0(self) -> np.ndarray:
        return np.asarray([self.m0] * 14 + ([self.background_m0] if self.background_m0 > 0 else []))

    @property
    def is_static(self) -> bool:
        return True

    def fractions(self, cardiac_phase: float = 0.0, resp_phase: float = 0.0) -> np.ndarray:
        x, y = _subsample_grid(self.grid)
        inside = np.stack([np.hypot(x - cx, y - cy) <= self.radius for cx, cy in self.centers])
        frac = inside.mean(axis=-1)
        if self.background_m0 > 0:
            frac = np.concatenate([frac, (1.0 - frac.sum(axis=0))[None]])
        return frac


@dataclass(frozen=True)
class CardiacPhantomSpec:
    """Short-axis heart inside a static body ellipse.

    Cardiac phase +1 is end-systole (endocardium contracted by
    ``contraction``), -1 is end-diastole. Respiration translates the whole
    heart vertically by ``resp_amplitude_px * resp_phase``.
    """

    grid: int = 64
    body_axes: tuple = (28.0, 24.0)
    heart_center: tuple = (0.0, 0.0)
    epi_axes: tuple = (14.0, 13.0)
    endo_axes: tuple = (9.0, 8.5)
    contraction: float = 0.3
    resp_amplitude_px: float = 3.0
    cardiac_freq_hz: float = 1.2
    resp_freq_hz: float = 0.25
    t1_myocardium_ms: float = 1000.0
    t1_blood_ms: float = 1600.0
    t1_background_ms: float = 800.0
    m0: float = 1.0

    def __post_init__(self):
        if not (self.cardiac_freq_hz > 0 and self.resp_freq_hz > 0):
            raise ValueError("motion frequencies must be positive")
        if not self.cardiac_freq_hz > self.resp_freq_hz:
            raise ValueError("cardiac frequency must exceed respiratory frequency")
        if not 0 <= self.contraction < 1:
            raise ValueError("contraction must lie in [0, 1)")
        if not all(e < p for e, p in zip(self.endo_axes, self.epi_axes)):
            raise ValueError("endocardium must lie strictly inside the epicardium")
        if min(self.t1_myocardium_ms, self.t1_blood_ms, self.t1_background_ms) <= 0:
            raise ValueError("tissue T1 values must be positive")

    tissue_names = ("myocardium", "blood", "background")

    @property
    def tissue_t1(self) -> np.ndarray:
        return np.asarray([self.t1_myocardium_ms, self.t1_blood_ms, self.t1_background_ms])

    @property
    def tissue_m0(self) -> np.ndarray:
        return np.full(3, self.m0)

    @property
    def is_static(self) -> bool:
        return self.contraction == 0 and self.resp_amplitude_px == 0

    def endo_scale(self, cardiac_phase: float) -> float:
        scale = 1.0 - self.contraction * (cardiac_phase + 1.0) / 2.0
        if scale <= 0:
            raise ValueError("endocardial ellipse collapsed")
        return scale

    def ellipses(self, cardiac_phase: float = 0.0, resp_phase: float = 0.0):
        """(center, endo_axes, epi_axes) for the given phases."""
        cx, cy = self.heart_center
        center = (cx, cy + self.resp_amplitude_px * resp_phase)
        s = self.endo_scale(cardiac_phase)
        return center, (self.endo_axes[0] * s, self.endo_axes[1] * s), tuple(self.epi_axes)

    def fractions(self, cardiac_phase: float = 0.0, resp_phase: float = 0.0) -> np.ndarray:
        x, y = _subsample_grid(self.grid)
        (cx, cy), endo, epi = self.ellipses(cardiac_phase, resp_phase)
        in_body = _inside_ellipse(x, y, 0.0, 0.0, *self.body_axes)
        in_endo = _inside_ellipse(x, y, cx, cy, *endo)
        in_epi = _inside_ellipse(x, y, cx, cy, *epi)
        blood = in_endo
        myo = in_epi & ~in_endo
        background = in_body & ~in_epi
        return np.stack([myo, blood, background]).mean(axis=-1)


@dataclass(frozen=True)
class GroundTruth:
    frames: np.ndarray  # (M, H, W) complex
    cardiac_signal: np.ndarray
    resp_signal: np.ndarray
    t1_map: np.ndarray  # 0 where no tissue
    labels: np.ndarray  # tissue index per pixel, -1 for air
    tissue_names: tuple
    frame_times_ms: np.ndarray
    tissue_amplitudes: np.ndarray  # (M, n_tissues)

    def __len__(self) -> int:
        return int(self.frames.shape[0])


def motion_waveforms(frame_times_ms, spec):
    t_s = np.asarray(frame_times_ms, dtype=np.float64) / 1000.0
    if t_s.size > 1 and np.any(np.diff(t_s) <= 0):
        raise ValueError("frame times must be increasing")
    if isinstance(spec, VialPhantomSpec):
        return np.zeros_like(t_s), np.zeros_like(t_s)
    cardiac = np.sin(2 * np.pi * spec.cardiac_freq_hz * t_s)
    resp = np.sin(2 * np.pi * spec.resp_freq_hz * t_s)
    return cardiac, resp


def render_frame(spec, amplitudes, cardiac_phase: float = 0.0, resp_phase: float = 0.0,
                 fractions: np.ndarray | None = None) -> np.ndarray:
    """Phase-zero complex image: per-tissue amplitude times occupancy fraction.

    ``amplitudes`` holds one signal value per tissue (``spec.tissue_names``
    order). Precomputed ``fractions`` may be passed for static objects.
    """
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    if fractions is None:
        fractions = spec.fractions(cardiac_phase, resp_phase)
    if amplitudes.shape != (fractions.shape[0],):
        raise ValueError(f"expected {fractions.shape[0]} tissue amplitudes, got {amplitudes.shape}")
    return np.tensordot(amplitudes, fractions, axes=1).astype(np.complex128)


def reference_labels(spec, cardiac_phase: float = -1.0, resp_phase: float = 0.0):
    """Majority-tissue label map and matching T1 map at a reference phase."""
    frac = spec.fractions(cardiac_phase, resp_phase)
    air = 1.0 - frac.sum(axis=0)
    labels = np.argmax(frac, axis=0)
    labels = np.where(frac.max(axis=0) > air, labels, -1)
    t1 = np.where(labels >= 0, spec.tissue_t1[np.maximum(labels, 0)], 0.0)
    return labels, t1


def frame_times(schedule: TrajectorySchedule, binning: int) -> np.ndarray:
    return bin_readouts(schedule.times_ms[:, None], schedule, binning)[:, 0]


def generate_ground_truth(spec, schedule: TrajectorySchedule, binning: int = 5,
                          inv_efficiency: float = 1.0) -> GroundTruth:
    signals = simulate_readouts(schedule, spec.tissue_t1, inv_efficiency=inv_efficiency)
    amplitudes = bin_readouts(signals * spec.tissue_m0[None, :], schedule, binning)
    times = frame_times(schedule, binning)
    cardiac, resp = motion_waveforms(times, spec)
    static = spec.fractions() if spec.is_static else None
    frames = np.empty((times.size, spec.grid, spec.grid), dtype=np.complex64)
    for i in range(times.size):
        frames[i] = render_frame(spec, amplitudes[i], cardiac[i], resp[i], fractions=static)
    labels, t1_map = reference_labels(spec)
    return GroundTruth(frames=frames, cardiac_signal=cardiac, resp_signal=resp, t1_map=t1_map,
                       labels=labels, tissue_names=tuple(spec.tissue_names),
                       frame_times_ms=times, tissue_amplitudes=amplitudes)
