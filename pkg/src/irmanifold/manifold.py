"""Generative manifold reconstruction with fixed latent inputs, and latent excitation.

Each frame is modelled as ``x_i = G(z_i)`` with ``z_i = [resp, cardiac,
contrast]``. Only the generator weights are trained; the latents never
change. The loss per batch is the exact k-space data misfit plus a
finite-difference surrogate of the latent Jacobian norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import CoilMaps, DataConsistency, KSpaceSeries, adjoint, forward
from .nn import AdamState, Network, adam_step, init_network
from .trajectory import TrajectorySchedule, density_compensation, SpiralInterleaf

log = logging.getLogger(__name__)

PARAMS_PER_PIXEL = 15
LATENT_DIM = 3
# relative channel widths: dense output map, then conv outputs 1..6
_WIDTH_PROFILE = (1.0, 0.75, 0.625, 0.375, 0.125, 0.125, 0.125)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


@dataclass
class LatentCode:
    z: np.ndarray  # (M, 3): resp, cardiac, contrast

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2 or self.z.shape[1] != LATENT_DIM:
            raise ValueError("latent code must have shape (frames, 3)")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent code has non-finite entries")
        c = self.z[:, 2]
        if c.min() < 0 or c.max() > 1:
            raise ValueError("contrast latent must lie in [0, 1]")

    @classmethod
    def from_signals(cls, resp, cardiac, contrast) -> "LatentCode":
        return cls(np.column_stack([resp, cardiac, contrast]))

    def __len__(self) -> int:
        return int(self.z.shape[0])


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 20
    lr: float = 1e-4
    lam1: float | None = None  # None: auto-balance against the data term
    lam1_ratio: float = 1e-3
    sigma: float = 0.1
    seed: int = 0
    lr_final: float | None = None  # None: constant lr
    decay_start: float = 0.6  # fraction of epochs at constant lr before the cosine decay


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch: constant, then cosine decay to ``lr_final``."""
    if cfg.lr_final is None:
        return cfg.lr
    hold = int(round(cfg.decay_start * cfg.epochs))
    if epoch < hold:
        return cfg.lr
    span = max(cfg.epochs - hold, 1)
    frac = min((epoch - hold) / span, 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainState:
    params: np.ndarray
    adam: AdamState
    lam1: float
    batch_size: int
    epoch: int = 0
    scale: float = 1.0
    history: list = field(default_factory=list)  # (epoch, data_loss, reg_loss) per-frame means


CONTRAST_FORMS = ("linear", "log")


def contrast_signal(inversion_times_ms, frame_times_ms, saturation_ms: float, form: str = "linear",
                    tau_ms: float = 40.0) -> np.ndarray:
    """Contrast latent from the time since the most recent inversion, resetting at each one.

    ``linear`` is the sawtooth ``min(1, dt / saturation_ms)``. ``log`` is
    ``log(1 + dt/tau) / log(1 + saturation_ms/tau)`` clipped at 1, which gives
    the fast early recovery a usable share of the latent range.
    """
    inv = np.sort(np.asarray(inversion_times_ms, dtype=np.float64))
    t = np.asarray(frame_times_ms, dtype=np.float64)
    if inv.size == 0:
        raise ValueError("schedule has no inversion pulses")
    block = np.searchsorted(inv, t, side="right") - 1
    if np.any(block < 0):
        raise ValueError("frame precedes the first inversion")
    dt = t - inv[block]
    if form == "linear":
        return np.minimum(1.0, dt / saturation_ms)
    if form == "log":
        return np.minimum(1.0, np.log1p(dt / tau_ms) / np.log1p(saturation_ms / tau_ms))
    raise ValueError(f"contrast form must be one of {CONTRAST_FORMS}, got {form!r}")


def recovery_sampling(inversion_times_ms, frame_times_ms, tau_ms: float) -> np.ndarray:
    """Frame sampling probabilities ``~ 1 / (dt + tau)`` with ``dt`` the time since the last inversion.

    Uniform batches spend almost every step on the steady state, so the
    short stretch right after each inversion is fitted far more slowly.
    """
    if tau_ms <= 0:
        raise ValueError("tau_ms must be positive")
    inv = np.sort(np.asarray(inversion_times_ms, dtype=np.float64))
    t = np.asarray(frame_times_ms, dtype=np.float64)
    dt = t - inv[np.maximum(np.searchsorted(inv, t, side="right") - 1, 0)]
    w = 1.0 / (np.maximum(dt, 0.0) + tau_ms)
    return w / w.sum()


def schedule_contrast(schedule: TrajectorySchedule, frame_times_ms, form: str = "linear",
                      tau_ms: float = 40.0) -> np.ndarray:
    return contrast_signal(schedule.inversion_times_ms, frame_times_ms, schedule.params.block_ms, form, tau_ms)


def contrast_sweep(schedule: TrajectorySchedule, binning: int, form: str = "linear",
                   tau_ms: float = 40.0) -> np.ndarray:
    """Contrast values of one inversion block's frames, the dictionary's folded time axis."""
    n = schedule.params.interleaves_per_inversion
    t = schedule.times_ms[:n].reshape(-1, binning).mean(axis=1)
    return schedule_contrast(schedule, t, form, tau_ms)


def _count_params(channels, n_up_res: list, latent_dim: int) -> int:
    total = latent_dim * 16 * channels[0] + 16 * channels[0]
    chans = list(channels) + [2]
    for i in range(7):
        total += 9 * chans[i] * chans[i + 1] + chans[i + 1]
    return total


def _upsample_plan(n_up: int) -> tuple:
    """Indices of the 7 conv layers that are preceded by a 2x upsample."""
    plans = {1: (4,), 2: (0, 4), 3: (0, 2, 4), 4: (0, 1, 2, 4), 5: (0, 1, 2, 3, 4)}
    if n_up not in plans:
        raise ValueError("matrix size must be 4 * 2**k with 1 <= k <= 5")
    return plans[n_up]


def generator_spec(matrix_size: int, latent_dim: int = LATENT_DIM, channels=None) -> list:
    """Eight-layer generator: dense to a 4x4 map, seven 3x3 convs, tanh on 2 outputs.

    Without explicit ``channels`` the width profile is scaled so the weight
    count is as close as possible to ``15 * matrix_size**2``.
    """
    n_up = int(round(np.log2(matrix_size / 4)))
    if 4 * 2 ** n_up != matrix_size:
        raise ValueError("matrix size must be 4 times a power of two")
    plan = _upsample_plan(n_up)
    if channels is None:
        target = PARAMS_PER_PIXEL * matrix_size ** 2
        best = None
        for width in range(4, 513):
            ch = [max(4, int(round(width * f))) for f in _WIDTH_PROFILE]
            err = abs(_count_params(ch, plan, latent_dim) - target)
            if best is None or err < best[0]:
                best = (err, ch)
        channels = best[1]
    channels = [int(c) for c in channels]
    if len(channels) != 7:
        raise ValueError("need 7 channel widths (dense map + 6 hidden convs)")
    spec = [{"type": "dense", "n_in": latent_dim, "n_out": 16 * channels[0]},
            {"type": "leaky_relu", "slope": 0.1},
            {"type": "reshape", "shape": [4, 4, channels[0]]}]
    chans = channels + [2]
    for i in range(7):
        if i in plan:
            spec.append({"type": "upsample2x"})
        spec.append({"type": "conv2d", "c_in": chans[i], "c_out": chans[i + 1]})
        spec.append({"type": "tanh"} if i == 6 else {"type": "leaky_relu", "slope": 0.1})
    return spec


def build_generator(matrix_size: int, seed: int = 0, dtype=np.float32, channels=None) -> Network:
    return init_network(generator_spec(matrix_size, channels=channels), (LATENT_DIM,), seed, dtype)


def to_complex(out: np.ndarray) -> np.ndarray:
    return out[..., 0].astype(np.float64) + 1j * out[..., 1].astype(np.float64)


def generate_frames(net: Network, latents, batch: int = 64) -> np.ndarray:
    """Complex image per latent vector, ``(M, H, W)``."""
    z = latents.z if isinstance(latents, LatentCode) else np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != net.input_shape[0]:
        raise ValueError(f"latents must have shape (M, {net.input_shape[0]})")
    out = [to_complex(net.forward(z[s:s + batch])) for s in range(0, z.shape[0], batch)]
    return np.concatenate(out) if out else np.zeros((0,) + net.output_shape[:2], complex)


def excite_contrast_only(net: Network, fixed_resp: float, fixed_cardiac: float, contrast_sweep,
                         n_frames: int | None = None) -> np.ndarray:
    """Frames with motion frozen and only the contrast latent varying.

    ``n_frames`` is the dictionary's time-axis length; a sweep of another
    length is rejected.
    """
    c = np.asarray(contrast_sweep, dtype=np.float64)
    if c.ndim != 1 or c.size == 0 or c.min() < 0 or c.max() > 1:
        raise ValueError("contrast sweep must be a 1-D sequence in [0, 1]")
    if n_frames is not None and c.size != n_frames:
        raise ValueError(f"sweep has {c.size} frames but the dictionary has {n_frames}")
    z = np.column_stack([np.full_like(c, fixed_resp), np.full_like(c, fixed_cardiac), c])
    return generate_frames(net, z)


def excite_cine(net: Network, fixed_resp: float, fixed_contrast: float, cardiac_sweep) -> np.ndarray:
    """Breath-held CINE: respiration and contrast frozen, cardiac latent swept."""
    card = np.asarray(cardiac_sweep, dtype=np.float64)
    if not 0 <= fixed_contrast <= 1:
        raise ValueError("contrast must lie in [0, 1]")
    z = np.column_stack([np.full_like(card, fixed_resp), card, np.full_like(card, fixed_contrast)])
    return generate_frames(net, z)


def measurement_scale(series: KSpaceSeries, coils: CoilMaps, positions_per_window: int = 4,
                      target: float = 0.6) -> float:
    """Factor that maps the data so reconstructed magnitudes stay inside tanh's range.

    Frames sharing nearby positions within their inversion blocks are pooled
    into windows; each window gets a density-compensated adjoint image,
    calibrated so a uniform object maps to one. The largest robust peak over
    all windows is scaled to ``target``.
    """
    n = coils.shape[0]
    s_per = series.coords.shape[1] // series.binning
    base = SpiralInterleaf(series.coords[0, :s_per])
    w = np.tile(density_compensation(base), series.binning)
    frames_per_block = _frames_per_block(series)
    pos = np.arange(len(series)) % frames_per_block
    ones = np.ones((n, n), dtype=np.complex128)
    peak = 0.0
    for start in range(0, frames_per_block, positions_per_window):
        idx = np.flatnonzero((pos >= start) & (pos < start + positions_per_window))
        coords = series.coords[idx].reshape(-1, 2)
        data = (series.data[idx].astype(np.complex128) * w).transpose(1, 0, 2).reshape(coils.n_coils, -1)
        img = adjoint(data, coords, coils)
        cal_data = forward(ones, coords, coils).reshape(coils.n_coils, idx.size, -1) * w
        cal = adjoint(cal_data.reshape(coils.n_coils, -1), coords, coils)
        c0 = np.abs(cal[n // 4:3 * n // 4, n // 4:3 * n // 4]).mean()
        peak = max(peak, float(np.percentile(np.abs(img), 99.5)) / c0)
    if peak <= 0:
        raise ValueError("measurements are identically zero")
    return target / peak


def _frames_per_block(series: KSpaceSeries) -> int:
    t = series.frame_times_ms
    gaps = np.diff(t)
    big = np.flatnonzero(gaps > 1.5 * np.median(gaps))
    return int(big[0] + 1) if big.size else len(series)


def batch_loss_and_grad(net: Network, dc: DataConsistency, z: np.ndarray, frames, eta: np.ndarray,
                        lam1: float, sigma: float):
    """Data and regularization sums for one batch; parameter gradients left in ``net.grads``."""
    b = z.shape[0]
    zz = np.concatenate([z, z + sigma * eta]).astype(net.dtype)
    out = net.forward(zz)
    base, pert = out[:b], out[b:]
    x = to_complex(base)
    data_loss, g = dc.loss_and_grad(x, frames)
    diff = pert.astype(np.float64) - base.astype(np.float64)
    reg = np.sum(diff * diff, axis=(1, 2, 3)) / sigma ** 2
    g_out = np.empty(out.shape, dtype=np.float64)
    g_reg = lam1 * 2.0 * diff / sigma ** 2
    g_out[:b, ..., 0] = g.real
    g_out[:b, ..., 1] = g.imag
    g_out[:b] -= g_reg
    g_out[b:] = g_reg
    net.zero_grad()
    net.backward(g_out)
    return float(np.sum(data_loss)), float(np.sum(reg))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


def init_train_state(net: Network, dc: DataConsistency, latents: LatentCode, cfg: TrainConfig,
                     scale: float = 1.0) -> TrainState:
    lam1 = cfg.lam1
    if lam1 is None:
        rng = np.random.default_rng([cfg.seed, 2])
        frames = rng.choice(len(latents), size=min(cfg.batch_size, len(latents)), replace=False)
        eta = rng.standard_normal((frames.size, LATENT_DIM))
        d0, r0 = batch_loss_and_grad(net, dc, latents.z[frames], frames, eta, 0.0, cfg.sigma)
        lam1 = cfg.lam1_ratio * d0 / r0 if r0 > 0 else 0.0
        log.info("auto lambda1 = %.4g (data %.4g, reg %.4g)", lam1, d0, r0)
    return TrainState(params=net.params.copy(), adam=AdamState.zeros_like(net.params), lam1=float(lam1),
                      batch_size=cfg.batch_size, scale=scale)


def _epoch_batches(rng: np.random.Generator, m: int, batch_size: int, probs):
    if probs is None:
        order = rng.permutation(m)
        return [order[s:s + batch_size] for s in range(0, m, batch_size)]
    k = min(batch_size, m)
    return [rng.choice(m, size=k, replace=False, p=probs) for _ in range(-(-m // k))]


def train_generator(net: Network, dc: DataConsistency, latents: LatentCode, cfg: TrainConfig,
                    state: TrainState | None = None, on_epoch=None, frame_probs=None) -> TrainState:
    """Stochastic minimization of data misfit + lam1 * Jacobian surrogate over the weights.

    Each epoch redraws a seeded random partition of the frames into batches,
    or, with ``frame_probs``, ``ceil(M / batch_size)`` batches drawn with
    those probabilities.
    Training resumes from ``state`` when given; ``on_epoch(state)`` is called
    after every epoch. A non-finite loss raises :class:`TrainingDiverged`
    carrying the last finite state.
    """
    if len(latents) != len(dc):
        raise ValueError(f"{len(latents)} latent vectors for {len(dc)} frames")
    if state is None:
        state = init_train_state(net, dc, latents, cfg)
    net.set_params(state.params)
    z_all = latents.z
    m = len(latents)
    if frame_probs is not None:
        frame_probs = np.asarray(frame_probs, dtype=np.float64)
        if frame_probs.shape != (m,) or np.any(frame_probs < 0) or not np.isclose(frame_probs.sum(), 1.0):
            raise ValueError(f"frame_probs must be {m} nonnegative values summing to 1")
    while state.epoch < cfg.epochs:
        rng = _epoch_rng(cfg.seed, state.epoch)
        good = (net.params.copy(), AdamState(state.adam.m.copy(), state.adam.v.copy(), state.adam.t))
        data_sum = reg_sum = 0.0
        n_seen = 0
        lr = lr_at(cfg, state.epoch)
        for frames in _epoch_batches(rng, m, state.batch_size, frame_probs):
            eta = rng.standard_normal((frames.size, LATENT_DIM))
            d, r = batch_loss_and_grad(net, dc, z_all[frames], frames, eta, state.lam1, cfg.sigma)
            if not np.isfinite(d + r) or not np.all(np.isfinite(net.grads)):
                state.params, state.adam = good
                raise TrainingDiverged(f"non-finite loss in epoch {state.epoch}", state)
            adam_step(net.params, net.grads, state.adam, lr)
            data_sum += d
            reg_sum += r
            n_seen += frames.size
        state.epoch += 1
        state.params = net.params.copy()
        state.history.append((state.epoch, data_sum / n_seen, reg_sum / n_seen))
        if on_epoch is not None:
            on_epoch(state)
    return state
