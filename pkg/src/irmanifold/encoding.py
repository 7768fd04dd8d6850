"""Multicoil non-Cartesian encoding: exact NUDFT operators, noise, binning, navigators.

The forward model evaluates ``b[c, j] = sum_r S_c(r) x(r) exp(-2i pi k_j . r)``
with ``r = (col - N/2, row - N/2)`` and ``k_j = (kx, ky)`` in cycles/pixel.
The exponential is separable in x and y, so direct summation costs two small
matrix products per coil instead of a dense ``J x N^2`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from .phantom import GroundTruth
from .trajectory import TrajectorySchedule

CHUNK = 16384
# only the k-space origin is invariant to the golden-angle rotation of each frame
NAVIGATOR_RADIUS = 1e-3


@dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # (n_coils, H, W) complex

    @property
    def n_coils(self) -> int:
        return int(self.maps.shape[0])

    @property
    def shape(self) -> tuple:
        return tuple(self.maps.shape[1:])


@dataclass(frozen=True)
class KSpaceFrame:
    coords: np.ndarray  # (J, 2)
    data: np.ndarray  # (n_coils, J)
    frame_time_ms: float
    flip_deg: float


@dataclass(frozen=True)
class KSpaceSeries:
    coords: np.ndarray  # (M, J, 2) float64
    data: np.ndarray  # (M, n_coils, J) complex64
    frame_times_ms: np.ndarray
    binning: int
    flip_deg: float
    noise_sigma: float
    seed: int
    schedule_hash: str
    interleaf_index: np.ndarray  # (M, binning)

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def frame(self, i: int) -> KSpaceFrame:
        return KSpaceFrame(self.coords[i], self.data[i], float(self.frame_times_ms[i]), self.flip_deg)

    @property
    def samples_per_frame(self) -> int:
        return int(self.coords.shape[1])

    def subset(self, frames) -> "KSpaceSeries":
        f = np.asarray(frames, dtype=np.intp)
        return replace(self, coords=self.coords[f], data=self.data[f], frame_times_ms=self.frame_times_ms[f],
                       interleaf_index=self.interleaf_index[f])


def pixel_coords(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) - n // 2


def uniform_coil(n: int) -> CoilMaps:
    return CoilMaps(np.ones((1, n, n), dtype=np.complex128))


def make_coil_maps(n_coils: int, n: int) -> CoilMaps:
    """Smooth synthetic receive profiles normalized to unit sum-of-squares.

    Each coil is a broad Gaussian lobe centered outside the field of view on
    a ring, with a gentle linear phase ramp pointing at the coil.
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    if n_coils == 1:
        return uniform_coil(n)
    y, x = np.meshgrid(pixel_coords(n), pixel_coords(n), indexing="ij")
    angles = 2 * np.pi * np.arange(n_coils) / n_coils + np.pi / n_coils
    ring, width = 0.75 * n, 0.55 * n
    maps = []
    for a in angles:
        cx, cy = ring * np.cos(a), ring * np.sin(a)
        mag = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))
        phase = np.pi * (x * np.cos(a) + y * np.sin(a)) / n + a
        maps.append(mag * np.exp(1j * phase))
    maps = np.asarray(maps)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilMaps(maps)


def _phase_factors(k: np.ndarray, n: int, sign: float):
    r = pixel_coords(n)
    ex = np.exp(sign * 2j * np.pi * np.outer(k[:, 0], r))
    ey = np.exp(sign * 2j * np.pi * np.outer(k[:, 1], r))
    return ex, ey


def _check(image_shape, coords, coils: CoilMaps):
    if tuple(image_shape) != coils.shape:
        raise ValueError(f"image shape {tuple(image_shape)} does not match coil maps {coils.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must have shape (J, 2)")


def forward(image: np.ndarray, coords: np.ndarray, coils: CoilMaps) -> np.ndarray:
    """Exact type-2 NUDFT of every coil image, shape ``(n_coils, J)``."""
    coords = np.asarray(coords, dtype=np.float64)
    _check(image.shape, coords, coils)
    n = image.shape[0]
    weighted = coils.maps * image[None]
    out = np.empty((coils.n_coils, coords.shape[0]), dtype=np.complex128)
    for s in range(0, coords.shape[0], CHUNK):
        ex, ey = _phase_factors(coords[s:s + CHUNK], n, -1.0)
        t = weighted @ ex.T  # (C, rows, J)
        out[:, s:s + CHUNK] = np.einsum("crj,jr->cj", t, ey)
    return out


def adjoint(data: np.ndarray, coords: np.ndarray, coils: CoilMaps) -> np.ndarray:
    """Conjugate transpose of :func:`forward`."""
    coords = np.asarray(coords, dtype=np.float64)
    _check(coils.shape, coords, coils)
    if data.shape != (coils.n_coils, coords.shape[0]):
        raise ValueError(f"data shape {data.shape} != {(coils.n_coils, coords.shape[0])}")
    n = coils.shape[0]
    acc = np.zeros((coils.n_coils, n, n), dtype=np.complex128)
    for s in range(0, coords.shape[0], CHUNK):
        ex, ey = _phase_factors(coords[s:s + CHUNK], n, 1.0)
        u = ey.T[None] * data[:, None, s:s + CHUNK]  # (C, rows, J)
        acc += u @ ex
    return np.sum(np.conj(coils.maps) * acc, axis=0)


def sigma_for_snr(clean: np.ndarray, snr_db: float) -> float:
    """Per-component noise level giving ``20 log10(|b| / |n|) = snr_db`` in expectation."""
    energy = float(np.sum(np.abs(clean.astype(np.complex128)) ** 2))
    return float(np.sqrt(energy) / (np.sqrt(2 * clean.size) * 10 ** (snr_db / 20)))


def frame_coords(schedule: TrajectorySchedule, binning: int) -> tuple:
    """Concatenated coordinates of each frame's interleaves: ``(M, binning*S, 2)``."""
    n = len(schedule)
    if n % binning:
        raise ValueError("binning does not divide the number of interleaves")
    idx = np.arange(n).reshape(-1, binning)
    coords = schedule.coords().reshape(n // binning, -1, 2)
    return coords, idx


def simulate_acquisition(truth: GroundTruth, schedule: TrajectorySchedule, coils: CoilMaps,
                         binning: int = 5, noise_sigma: float = 0.0, snr_db: float | None = None,
                         seed: int = 0) -> KSpaceSeries:
    """Noisy multicoil samples of every ground-truth frame.

    If ``snr_db`` is given it overrides ``noise_sigma``; the level is then
    computed from the noiseless data of the whole series.
    """
    coords, idx = frame_coords(schedule, binning)
    if coords.shape[0] != len(truth):
        raise ValueError(f"{coords.shape[0]} binned frames but ground truth has {len(truth)}")
    clean = np.empty((len(truth), coils.n_coils, coords.shape[1]), dtype=np.complex128)
    for i in range(len(truth)):
        clean[i] = forward(truth.frames[i].astype(np.complex128), coords[i], coils)
    if snr_db is not None:
        noise_sigma = sigma_for_snr(clean, snr_db)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(clean.shape + (2,))
        clean += noise_sigma * (noise[..., 0] + 1j * noise[..., 1])
    return KSpaceSeries(coords=coords, data=clean.astype(np.complex64),
                        frame_times_ms=truth.frame_times_ms.copy(), binning=binning,
                        flip_deg=schedule.params.flip_deg, noise_sigma=float(noise_sigma),
                        seed=int(seed), schedule_hash=schedule.content_hash(), interleaf_index=idx)


def navigator_mask(series: KSpaceSeries, radius: float) -> np.ndarray:
    r = np.hypot(series.coords[..., 0], series.coords[..., 1])
    mask = r <= radius
    counts = mask.sum(axis=1)
    if counts.min() == 0:
        raise ValueError(f"no k-space samples within radius {radius}; use a larger navigator radius")
    if np.any(counts != counts[0]):
        raise ValueError("frames have different numbers of navigator samples")
    return mask


def extract_navigator(series: KSpaceSeries, radius: float = NAVIGATOR_RADIUS, zscore: bool = True) -> np.ndarray:
    """Center-of-k-space feature vectors, one row per frame.

    Each row is ``[real, imag]`` of the selected samples in (coil, interleaf,
    sample) order. With ``zscore`` every component is standardized across
    frames; constant components become zero.
    """
    if not radius > 0:
        raise ValueError("navigator radius must be positive")
    mask = navigator_mask(series, radius)
    sel = np.stack([series.data[i][:, mask[i]] for i in range(len(series))]).astype(np.complex128)
    flat = sel.reshape(len(series), -1)
    vec = np.concatenate([flat.real, flat.imag], axis=1)
    if zscore:
        mean = vec.mean(axis=0)
        std = vec.std(axis=0)
        vec = (vec - mean) / np.where(std > 1e-12 * (np.abs(mean) + 1e-300), std, np.inf)
    return vec


class NormalOperator:
    """Exact ``A_i^H A_i`` for a batch of frames through Toeplitz embedding.

    ``A^H W A x = sum_c conj(S_c) (psf * (S_c x))`` where
    ``psf(d) = sum_j w_j exp(2i pi k_j . d)`` and ``W`` is an optional
    per-sample weighting (identity by default). Embedding the convolution in
    a ``2N`` circulant makes it an FFT product with a real spectrum, which is
    identical to applying :func:`forward`, the weights and :func:`adjoint`.
    """

    def __init__(self, coords_batch: np.ndarray, coils: CoilMaps, weights=None):
        self.coils = coils
        self.n = coils.shape[0]
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)
        if self.weights is not None and self.weights.shape != coords_batch.shape[1:2]:
            raise ValueError("weights must have one entry per sample of a frame")
        self.kernels = np.stack([self._kernel(c) for c in coords_batch])

    def _kernel(self, coords: np.ndarray) -> np.ndarray:
        n = self.n
        d = np.arange(-(n - 1), n, dtype=np.float64)
        psf = np.zeros((2 * n - 1, 2 * n - 1), dtype=np.complex128)
        for s in range(0, coords.shape[0], CHUNK):
            k = coords[s:s + CHUNK]
            ex = np.exp(2j * np.pi * np.outer(k[:, 0], d))
            if self.weights is not None:
                ex *= self.weights[s:s + CHUNK, None]
            ey = np.exp(2j * np.pi * np.outer(k[:, 1], d))
            psf += ey.T @ ex
        circ = np.zeros((2 * n, 2 * n), dtype=np.complex128)
        circ[np.ix_(d.astype(int) % (2 * n), d.astype(int) % (2 * n))] = psf
        return scipy.fft.fft2(circ).real

    def apply(self, x: np.ndarray, frames=None) -> np.ndarray:
        """``A^H A x`` for images ``x`` of shape ``(B, N, N)``; ``frames`` picks kernels."""
        kern = self.kernels if frames is None else self.kernels[frames]
        n = self.n
        coil_images = self.coils.maps[None] * x[:, None]
        spec = scipy.fft.fft2(coil_images, s=(2 * n, 2 * n), axes=(-2, -1))
        spec *= kern[:, None]
        conv = scipy.fft.ifft2(spec, axes=(-2, -1))[..., :n, :n]
        return np.sum(np.conj(self.coils.maps)[None] * conv, axis=1)


class DataConsistency:
    """Per-frame data term ``|A_i x_i - b_i|_W^2`` and its gradient for a whole series.

    ``weights`` (one per sample of a frame) gives a weighted least-squares
    term; ``None`` is the plain squared residual.
    """

    def __init__(self, series: KSpaceSeries, coils: CoilMaps, scale: float = 1.0, weights=None):
        self.normal = NormalOperator(series.coords, coils, weights)
        w = np.ones(series.coords.shape[1]) if weights is None else self.normal.weights
        data = series.data.astype(np.complex128) * scale
        self.atb = np.stack([adjoint(data[i] * w, series.coords[i], coils) for i in range(len(series))])
        self.b_energy = np.sum(w * np.abs(data) ** 2, axis=(1, 2))

    def __len__(self) -> int:
        return int(self.atb.shape[0])

    def loss_and_grad(self, x: np.ndarray, frames):
        """Losses per frame and ``dL/dx`` as a complex array (real + i imag partials)."""
        frames = np.asarray(frames)
        ax = self.normal.apply(x, frames)
        atb = self.atb[frames]
        loss = (np.sum((np.conj(x) * ax).real, axis=(1, 2))
                - 2 * np.sum((np.conj(x) * atb).real, axis=(1, 2)) + self.b_energy[frames])
        return loss, 2.0 * (ax - atb)
