"""Golden-angle spiral sampling schedules for continuous IR-SPGR acquisition."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

GOLDEN_ANGLE_DEG = 137.5


@dataclass(frozen=True)
class SpiralInterleaf:
    samples: np.ndarray  # (S, 2) normalized k-space, cycles/pixel
    rotation_deg: float = 0.0

    @property
    def sample_count(self) -> int:
        return int(self.samples.shape[0])

    @property
    def radius(self) -> np.ndarray:
        return np.hypot(self.samples[:, 0], self.samples[:, 1])


@dataclass(frozen=True)
class SequenceParams:
    tr_ms: float = 8.0
    flip_deg: float = 14.0
    interleaves_per_inversion: int = 800
    delay_ms: float = 500.0
    n_inversions: int = 5
    samples_per_interleaf: int = 256
    matrix_size: int = 64
    n_turns: float = 8.0
    k_max: float = 0.5
    rotation_step_deg: float = GOLDEN_ANGLE_DEG

    def __post_init__(self):
        for name in ("tr_ms", "delay_ms", "n_turns", "rotation_step_deg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("interleaves_per_inversion", "n_inversions", "samples_per_interleaf", "matrix_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if not 0 < self.flip_deg <= 90:
            raise ValueError(f"flip_deg must lie in (0, 90], got {self.flip_deg}")
        if not 0 < self.k_max <= 0.5:
            raise ValueError(f"k_max must lie in (0, 0.5], got {self.k_max}")

    @property
    def block_ms(self) -> float:
        return self.interleaves_per_inversion * self.tr_ms

    @property
    def period_ms(self) -> float:
        """Time between successive inversion pulses."""
        return self.block_ms + self.delay_ms

    @property
    def n_interleaves(self) -> int:
        return self.interleaves_per_inversion * self.n_inversions


@dataclass(frozen=True)
class TrajectorySchedule:
    """Timestamped readouts of a continuous golden-angle acquisition.

    Readout ``n`` of block ``b`` happens at ``b * period + (n + 1) * tr``; the
    inversion pulse of block ``b`` sits at ``b * period``.
    """

    params: SequenceParams
    times_ms: np.ndarray
    interleaf_index: np.ndarray
    rotation_deg: np.ndarray
    first_after_inversion: np.ndarray
    inversion_times_ms: np.ndarray
    base: SpiralInterleaf = field(repr=False, compare=False, default=None)

    def __len__(self) -> int:
        return int(self.times_ms.shape[0])

    @property
    def block(self) -> np.ndarray:
        """Inversion block of every entry."""
        return self.interleaf_index // self.params.interleaves_per_inversion

    def coords(self, indices=None) -> np.ndarray:
        """Rotated spiral coordinates, shape ``(n_entries, S, 2)``."""
        rot = self.rotation_deg if indices is None else self.rotation_deg[indices]
        return rotate(self.base.samples, np.atleast_1d(rot))

    def content_hash(self) -> str:
        blob = json.dumps(asdict(self.params), sort_keys=True).encode()
        digest = hashlib.sha256(blob)
        digest.update(np.ascontiguousarray(self.rotation_deg, "<f8").tobytes())
        digest.update(np.ascontiguousarray(self.times_ms, "<f8").tobytes())
        return digest.hexdigest()[:16]


def rotate(samples: np.ndarray, rotation_deg) -> np.ndarray:
    """Rigidly rotate ``(S, 2)`` samples about the origin; broadcasts over rotations."""
    phi = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
    x, y = samples[:, 0], samples[:, 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def generate_archimedean_spiral(samples_per_interleaf: int, n_turns: float = 8.0,
                                k_max: float = 0.5, rotation_deg: float = 0.0) -> SpiralInterleaf:
    """Constant-angular-rate spiral-out with a linear radius ramp.

    Sample ``s`` sits at radius ``k_max * s / (S - 1)`` and angle
    ``2 pi n_turns s / (S - 1) + rotation``, so the readout starts at the
    k-space origin and ends exactly on the ``k_max`` circle.
    """
    if int(samples_per_interleaf) != samples_per_interleaf or samples_per_interleaf < 2:
        raise ValueError("samples_per_interleaf must be an integer >= 2")
    if not n_turns > 0:
        raise ValueError("n_turns must be positive")
    if not 0 < k_max <= 0.5:
        raise ValueError("k_max must lie in (0, 0.5]")
    frac = np.arange(samples_per_interleaf, dtype=np.float64) / (samples_per_interleaf - 1)
    angle = 2.0 * np.pi * n_turns * frac + np.deg2rad(rotation_deg)
    r = k_max * frac
    samples = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)
    samples[0] = 0.0
    return SpiralInterleaf(samples=samples, rotation_deg=float(rotation_deg))


def golden_angle_schedule(p: SequenceParams) -> TrajectorySchedule:
    n_per = p.interleaves_per_inversion
    idx = np.arange(p.n_interleaves)
    block, pos = np.divmod(idx, n_per)
    inversion_times = np.arange(p.n_inversions) * p.period_ms
    times = inversion_times[block] + (pos + 1) * p.tr_ms
    rotation = np.mod(idx * p.rotation_step_deg, 360.0)
    base = generate_archimedean_spiral(p.samples_per_interleaf, p.n_turns, p.k_max)
    return TrajectorySchedule(
        params=p,
        times_ms=times.astype(np.float64),
        interleaf_index=idx,
        rotation_deg=rotation,
        first_after_inversion=pos == 0,
        inversion_times_ms=inversion_times.astype(np.float64),
        base=base,
    )


def density_compensation(interleaf: SpiralInterleaf) -> np.ndarray:
    """Ramp weights ``w ~ |k|`` with an origin floor, normalized to unit sum.

    The floor is half the smallest nonzero radius so the center sample keeps
    a finite share of the weight.
    """
    r = interleaf.radius
    nonzero = r[r > 0]
    if nonzero.size == 0:
        return np.full(r.shape, 1.0 / r.size)
    w = np.maximum(r, 0.5 * nonzero.min())
    return w / w.sum()
