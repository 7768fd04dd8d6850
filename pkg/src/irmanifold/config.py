"""Run configuration: nested dataclasses with a JSON round trip and dotted overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .trajectory import SequenceParams

STAGES = ("simulate", "estimate_motion", "reconstruct", "map_t1", "synth_cine")


class ConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    kind: str = "cardiac"  # "cardiac" or "vials"
    params: dict = field(default_factory=dict)  # keyword overrides for the phantom spec

    def __post_init__(self):
        if self.kind not in ("cardiac", "vials"):
            raise ConfigError(f"phantom.kind must be 'cardiac' or 'vials', got {self.kind!r}")


@dataclass
class AcquisitionConfig:
    n_coils: int = 4
    snr_db: float | None = 30.0
    binning: int = 5

    def __post_init__(self):
        if self.n_coils < 1 or self.binning < 1:
            raise ConfigError("n_coils and binning must be positive")


@dataclass
class MotionConfig:
    navigator_radius: float = 1e-3
    latent_dim: int = 2
    epochs: int = 300
    beta: float = 1e-2
    hidden: int = 64
    batch_size: int = 64
    lr: float = 1e-3
    smoothing_window: int = 3
    detrend_taus_ms: list = field(default_factory=lambda: [200.0])


@dataclass
class ReconConfig:
    epochs: int = 40
    batch_size: int = 2
    lr: float = 1e-3
    lr_final: float | None = 1e-5  # cosine decay target after decay_start; None: constant lr
    decay_start: float = 0.6
    lam1: float | None = None
    lam1_ratio: float = 1e-4
    sigma: float = 0.1
    channels: list | None = None
    scale_target: float = 0.6
    checkpoint_every: int = 5
    contrast_form: str = "log"  # "linear" sawtooth or "log" warp of the time since inversion
    contrast_tau_ms: float = 40.0
    sample_tau_ms: float | None = 50.0  # batch frames with probability ~ 1/(dt + tau); None: uniform
    skip_blocks: int = 1  # leading inversion blocks left out of training, before the periodic steady state
    motion_scale: float = 0.1  # multiplier on the z-scored motion latents fed to the generator

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("recon.epochs and recon.batch_size must be positive")
        if self.contrast_form not in ("linear", "log"):
            raise ConfigError(f"recon.contrast_form must be 'linear' or 'log', got {self.contrast_form!r}")
        if self.contrast_tau_ms <= 0:
            raise ConfigError("recon.contrast_tau_ms must be positive")
        if self.skip_blocks < 0 or self.motion_scale <= 0:
            raise ConfigError("recon.skip_blocks must be >= 0 and recon.motion_scale positive")
        if self.sample_tau_ms is not None and self.sample_tau_ms <= 0:
            raise ConfigError("recon.sample_tau_ms must be positive or null")
        if not 0.0 <= self.decay_start <= 1.0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ConfigError("recon.decay_start must lie in [0, 1] and recon.lr_final be positive or null")


@dataclass
class MappingConfig:
    t1_grid: str = "auto"  # "auto", "default", "vials"
    threshold: float = 0.05
    pixel_mm: float = 2.0
    border_fraction: float = 0.2
    n_sectors: int = 6
    cine_frames: int = 24
    cardiac_percentile: float = 10.0  # cardiac latent scan range [p, 100 - p] for the T1 map
    cine_percentile: float = 2.0  # same, for the CINE diastole/systole search at full recovery

    def __post_init__(self):
        if not (0 <= self.cardiac_percentile < 50 and 0 <= self.cine_percentile < 50):
            raise ConfigError("mapping.cardiac_percentile and mapping.cine_percentile must lie in [0, 50)")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    sequence: SequenceParams = field(default_factory=SequenceParams)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed derived deterministically from the global seed."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        ss = np.random.SeedSequence([self.seed, STAGES.index(stage)])
        return int(ss.generate_state(1)[0])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, prefix + name + ".")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'}: {err}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return RunConfig.from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VAL")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in override {key!r}")
            node = node[p]
        if parts[-1] not in node and not (len(parts) > 1 and parts[-2] == "params"):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return RunConfig.from_dict(d)
