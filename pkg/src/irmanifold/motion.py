"""Cardiac and respiratory signal estimation from k-space navigators with a VAE."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.ndimage import uniform_filter1d
from scipy.signal import lombscargle

from .nn import AdamState, Network, adam_step, init_network, mlp_spec

log = logging.getLogger(__name__)

CARDIAC_BAND_HZ = (0.6, 2.5)
RESP_BAND_HZ = (0.05, 0.5)
# peak-to-median periodogram power; white-noise latents stay near 15, periodic motion is in the thousands
MIN_PEAK_PROMINENCE = 100.0
DETREND_TAUS_MS = (200.0,)


class MotionLabelingError(RuntimeError):
    pass


@dataclass
class VAEModel:
    encoder: Network
    decoder: Network
    latent_dim: int
    beta: float
    history: list = field(default_factory=list)

    def encode(self, x: np.ndarray):
        out = self.encoder.forward(x).astype(np.float64)
        d = self.latent_dim
        return out[:, :d], out[:, d:]

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        mu, _ = self.encode(x)
        return self.decoder.forward(mu).astype(np.float64)


@dataclass
class LatentSignals:
    frame_times_ms: np.ndarray
    cardiac: np.ndarray
    resp: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.cardiac.shape[0])


def zscore(x: np.ndarray, axis: int = 0) -> np.ndarray:
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    return (x - mean) / np.where(std > 0, std, np.inf)


def detrend_blocks(navigators: np.ndarray, frame_times_ms, inversion_times_ms,
                   taus_ms=DETREND_TAUS_MS) -> np.ndarray:
    """Remove the inversion-recovery contrast trend from every component.

    Every block replays the same readout timing, so the trend is modelled as
    one free value per within-block position shared by all blocks, plus a
    per-block constant and decaying exponentials of the time since inversion
    that absorb the different starting magnetization of each block. Motion is
    not locked to the blocks and survives in the residual. With a single
    block the shared term is dropped (it would absorb everything).
    """
    times = np.asarray(frame_times_ms, dtype=np.float64)
    inv = np.sort(np.asarray(inversion_times_ms, dtype=np.float64))
    block = np.searchsorted(inv, times, side="right") - 1
    if np.any(block < 0):
        raise ValueError("frame precedes the first inversion")
    x = np.asarray(navigators, dtype=np.float64)
    blocks = np.unique(block)
    position = np.zeros(times.size, dtype=int)
    for b in blocks:
        position[block == b] = np.arange(np.count_nonzero(block == b))
    dt = times - inv[block]
    cols = []
    if blocks.size > 1:
        cols.append(np.eye(position.max() + 1)[position])
    for i, b in enumerate(blocks):
        rows = (block == b).astype(np.float64)
        if i > 0 or blocks.size == 1:
            cols.append(rows[:, None])
        cols += [(rows * np.exp(-dt / tau))[:, None] for tau in taus_ms]
    basis = np.concatenate(cols, axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return x - basis @ coef


def _vae_loss_grad(model: VAEModel, x: np.ndarray, eps: np.ndarray, beta: float):
    """Loss terms and gradients for one batch; leaves parameter grads in the networks."""
    n, d = x.shape[0], model.latent_dim
    enc = model.encoder.forward(x).astype(np.float64)
    mu, logvar = enc[:, :d], enc[:, d:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    xhat = model.decoder.forward(z).astype(np.float64)
    diff = xhat - x
    recon = float(np.mean(diff * diff))
    kl = float(0.5 * np.sum(mu * mu + std * std - 1.0 - logvar) / n)

    g_xhat = 2.0 * diff / diff.size
    model.decoder.zero_grad()
    g_z = model.decoder.backward(g_xhat).astype(np.float64)
    g_mu = g_z + beta * mu / n
    g_logvar = g_z * eps * 0.5 * std + beta * 0.5 * (std * std - 1.0) / n
    model.encoder.zero_grad()
    model.encoder.backward(np.concatenate([g_mu, g_logvar], axis=1))
    return recon, kl


def build_vae(n_features: int, latent_dim: int = 2, hidden: int = 64, seed: int = 0,
              beta: float = 1e-2, dtype=np.float32) -> VAEModel:
    enc = init_network(mlp_spec([n_features, hidden, hidden, 2 * latent_dim]), (n_features,), seed, dtype)
    dec = init_network(mlp_spec([latent_dim, hidden, hidden, n_features]), (latent_dim,), seed + 1, dtype)
    # start with small posterior variances
    enc.layers[-1].b[latent_dim:] = -4.0
    return VAEModel(enc, dec, latent_dim, beta)


def train_vae(navigators: np.ndarray, latent_dim: int = 2, epochs: int = 300, beta: float = 1e-2,
              seed: int = 0, batch_size: int = 64, lr: float = 1e-3, hidden: int = 64,
              warmup_fraction: float = 0.2) -> VAEModel:
    """Fit a VAE (MSE reconstruction + beta KL) with the reparameterization trick.

    ``beta`` ramps linearly from 0 over the first ``warmup_fraction`` of the
    epochs. ``history`` records per-epoch ``(recon, kl, total)`` means.
    """
    x = np.asarray(navigators, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 100:
        raise ValueError("need a (frames >= 100, features) navigator matrix")
    model = build_vae(x.shape[1], latent_dim, hidden, seed, beta)
    states = [AdamState.zeros_like(model.encoder.params), AdamState.zeros_like(model.decoder.params)]
    rng = np.random.default_rng([seed, 1])
    warm = max(1, int(round(warmup_fraction * epochs)))
    for epoch in range(epochs):
        beta_e = beta * min(1.0, (epoch + 1) / warm)
        order = rng.permutation(x.shape[0])
        sums = np.zeros(3)
        for start in range(0, x.shape[0], batch_size):
            rows = order[start:start + batch_size]
            eps = rng.standard_normal((rows.size, latent_dim))
            recon, kl = _vae_loss_grad(model, x[rows], eps, beta_e)
            if not np.isfinite(recon + kl):
                raise FloatingPointError(
                    f"non-finite VAE loss at epoch {epoch} (recon={recon}, kl={kl})")
            for net, st in zip((model.encoder, model.decoder), states):
                adam_step(net.params, net.grads, st, lr)
            sums += np.array([recon, kl, recon + beta_e * kl]) * rows.size
        model.history.append(tuple(sums / x.shape[0]))
    log.info("VAE final recon %.4g kl %.4g", *model.history[-1][:2])
    return model


def dominant_frequency(signal, times_ms, freqs_hz=None) -> tuple:
    """Peak of the Lomb-Scargle periodogram (handles the gaps between inversion blocks)."""
    t = np.asarray(times_ms, dtype=np.float64) / 1000.0
    y = np.asarray(signal, dtype=np.float64)
    y = y - y.mean()
    if freqs_hz is None:
        freqs_hz = np.arange(0.02, 5.0, 0.005)
    if not np.any(y):
        return 0.0, freqs_hz, np.zeros_like(freqs_hz)
    power = lombscargle(t, y, 2 * np.pi * freqs_hz)
    return float(freqs_hz[np.argmax(power)]), freqs_hz, power


def _in_band(f, band):
    return band[0] <= f <= band[1]


def band_unmix(latents: np.ndarray, times_ms, cardiac_band=CARDIAC_BAND_HZ, resp_band=RESP_BAND_HZ):
    """Rotate a 2-D latent trajectory so its axes separate the two physiological bands.

    Latent axes of a VAE are only identifiable up to rotation. The 2x2
    generalized eigenproblem between band-limited covariances yields the
    projection with the highest cardiac-to-respiratory power ratio and the
    one with the lowest; their outputs are returned as ``(cardiac, resp)``.
    """
    t = np.asarray(times_ms, dtype=np.float64) / 1000.0
    z = latents - latents.mean(axis=0)

    def band_cov(band):
        freqs = np.linspace(band[0], band[1], 200)
        # cross-spectral power summed over the band, from projected Lomb-Scargle fits
        basis = np.concatenate([np.cos(2 * np.pi * np.outer(t, freqs)), np.sin(2 * np.pi * np.outer(t, freqs))], axis=1)
        proj = basis.T @ z
        return proj.T @ proj

    c_card, c_resp = band_cov(cardiac_band), band_cov(resp_band)
    reg = 1e-9 * np.trace(c_card + c_resp)
    w, v = eigh(c_card + reg * np.eye(2), c_resp + c_card + 2 * reg * np.eye(2))
    return z @ v[:, -1], z @ v[:, 0]


def encode_motion(model: VAEModel, navigators: np.ndarray, frame_times_ms, window: int = 3,
                  unmix: bool = True, strict: bool = False) -> LatentSignals:
    """Posterior means, smoothed and labeled by their dominant spectral peak.

    With ``unmix`` the 2-D latent plane is first rotated by :func:`band_unmix`.
    If labeling fails the raw channels are still returned (channel 0 as
    respiration) and ``metadata["labeling_ok"]`` is False; ``strict`` raises
    :class:`MotionLabelingError` instead.
    """
    mu, _ = model.encode(np.asarray(navigators, dtype=np.float64))
    if window > 1:
        mu = uniform_filter1d(mu, size=window, axis=0, mode="nearest")
    channels = [mu[:, 0], mu[:, 1]]
    meta = {"unmixed": False}
    if unmix and model.latent_dim == 2 and np.all(mu.std(axis=0) > 0):
        card, resp = band_unmix(mu, frame_times_ms)
        channels = [resp, card]
        meta["unmixed"] = True
    spectra = [dominant_frequency(c, frame_times_ms) for c in channels]
    peaks = [s[0] for s in spectra]
    prominence = [float(p.max() / np.median(p)) if p.any() else 0.0 for _, _, p in spectra]
    meta["peak_hz"] = peaks
    meta["peak_prominence"] = prominence
    card_idx = [i for i, f in enumerate(peaks) if _in_band(f, CARDIAC_BAND_HZ)]
    resp_idx = [i for i, f in enumerate(peaks) if _in_band(f, RESP_BAND_HZ)]
    if len(card_idx) == 1 and len(resp_idx) == 1 and min(prominence) >= MIN_PEAK_PROMINENCE:
        ci, ri = card_idx[0], resp_idx[0]
        meta.update(labeling_ok=True, cardiac_channel=ci, resp_channel=ri, message="ok")
    else:
        ci, ri = 1, 0
        msg = (f"spectral labeling failed: peaks at {peaks[0]:.3f} and {peaks[1]:.3f} Hz "
               f"(prominence {prominence[0]:.0f}, {prominence[1]:.0f}) are not one dominant peak each in the "
               f"cardiac {CARDIAC_BAND_HZ} and respiratory {RESP_BAND_HZ} bands")
        meta.update(labeling_ok=False, cardiac_channel=ci, resp_channel=ri, message=msg)
        if strict:
            raise MotionLabelingError(msg)
        log.warning(msg)
    cardiac = channels[ci]
    resp = channels[ri]
    return LatentSignals(frame_times_ms=np.asarray(frame_times_ms, dtype=np.float64).copy(),
                         cardiac=_safe_z(cardiac), resp=_safe_z(resp), metadata=meta)


def _safe_z(x):
    std = x.std()
    return (x - x.mean()) / std if std > 0 else np.zeros_like(x)


def align_sign_and_scale(estimate, reference):
    """Least-squares affine fit of ``estimate`` onto ``reference``; returns ``(aligned, |pearson|)``."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("estimate and reference lengths differ")
    if est.std() == 0 or ref.std() == 0:
        raise ValueError("zero-variance input")
    design = np.column_stack([est, np.ones_like(est)])
    coef, *_ = np.linalg.lstsq(design, ref, rcond=None)
    r = np.corrcoef(est, ref)[0, 1]
    return design @ coef, float(abs(r))
