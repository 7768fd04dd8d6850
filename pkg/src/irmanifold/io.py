"""Artifact files: raw little-endian arrays with JSON sidecars, CSV tables, PGM previews.

An array artifact ``stem`` is the pair ``stem.bin`` + ``stem.json``; the
sidecar records dtype and shape plus any metadata. JSON is written with
sorted keys and no timestamps so identical content gives identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoding import KSpaceSeries
from .motion import LatentSignals
from .nn import AdamState, Network
from .phantom import GroundTruth
from .relaxometry import Dictionary, T1Map
from .trajectory import SequenceParams, TrajectorySchedule, golden_angle_schedule

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """Missing, truncated or inconsistent artifact."""


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ArtifactError(f"corrupt JSON in {path}: {err}") from None


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_array(stem, array: np.ndarray, dtype: str, meta: dict | None = None) -> list:
    """Write ``stem.bin`` in little-endian ``dtype`` and ``stem.json``; returns both paths."""
    stem = Path(stem)
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(arr.tobytes())
    write_json(json_path, {"format_version": FORMAT_VERSION, "dtype": np.dtype(dtype).name,
                           "shape": list(arr.shape), "meta": meta or {}})
    return [bin_path, json_path]


def read_array(stem):
    """Inverse of :func:`write_array`; returns ``(array, meta)``."""
    stem = Path(stem)
    side = read_json(stem.with_suffix(".json"))
    bin_path = stem.with_suffix(".bin")
    if not bin_path.exists():
        raise ArtifactError(f"missing file {bin_path}")
    try:
        dtype = np.dtype(side["dtype"]).newbyteorder("<")
        shape = tuple(side["shape"])
    except (KeyError, TypeError) as err:
        raise ArtifactError(f"malformed sidecar {stem.with_suffix('.json')}: {err}") from None
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ArtifactError(f"{bin_path} holds {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, side.get("meta", {})


# ---- domain artifacts --------------------------------------------------------

def save_schedule(stem, schedule: TrajectorySchedule) -> list:
    meta = {"params": asdict(schedule.params), "hash": schedule.content_hash(),
            "tr_ms": schedule.params.tr_ms, "flip_deg": schedule.params.flip_deg,
            "inversion_times_ms": schedule.inversion_times_ms,
            "counts": {"interleaves": len(schedule), "inversions": schedule.params.n_inversions,
                       "samples_per_interleaf": schedule.params.samples_per_interleaf}}
    return write_array(stem, schedule.coords(), "f8", meta)


def load_schedule(stem) -> TrajectorySchedule:
    coords, meta = read_array(stem)
    schedule = golden_angle_schedule(SequenceParams(**meta["params"]))
    if schedule.content_hash() != meta["hash"] or not np.allclose(schedule.coords(), coords, atol=1e-12):
        raise ArtifactError(f"schedule {stem} does not match its recorded parameters")
    return schedule


def save_ground_truth(stem, truth: GroundTruth) -> list:
    stem = Path(stem)
    meta = {"tissue_names": list(truth.tissue_names), "n_frames": len(truth)}
    paths = write_array(stem, truth.frames, "c8", meta)
    paths += write_array(stem.with_name(stem.name + "_t1"), truth.t1_map, "f8")
    paths += write_array(stem.with_name(stem.name + "_labels"), truth.labels, "i4")
    table = np.column_stack([truth.frame_times_ms, truth.cardiac_signal, truth.resp_signal])
    paths += write_array(stem.with_name(stem.name + "_signals"), table, "f8",
                         {"columns": ["frame_time_ms", "cardiac", "resp"]})
    paths += write_array(stem.with_name(stem.name + "_amplitudes"), truth.tissue_amplitudes, "f8")
    return paths


def load_ground_truth(stem) -> GroundTruth:
    stem = Path(stem)
    frames, meta = read_array(stem)
    t1, _ = read_array(stem.with_name(stem.name + "_t1"))
    labels, _ = read_array(stem.with_name(stem.name + "_labels"))
    table, _ = read_array(stem.with_name(stem.name + "_signals"))
    amps, _ = read_array(stem.with_name(stem.name + "_amplitudes"))
    return GroundTruth(frames=frames, cardiac_signal=table[:, 1], resp_signal=table[:, 2], t1_map=t1,
                       labels=labels, tissue_names=tuple(meta["tissue_names"]),
                       frame_times_ms=table[:, 0], tissue_amplitudes=amps)


def save_series(stem, series: KSpaceSeries) -> list:
    stem = Path(stem)
    meta = {"binning": series.binning, "noise_sigma": series.noise_sigma, "seed": series.seed,
            "schedule_hash": series.schedule_hash, "flip_deg": series.flip_deg,
            "frame_times_ms": series.frame_times_ms, "interleaf_index": series.interleaf_index}
    paths = write_array(stem, series.data, "c8", meta)
    paths += write_array(stem.with_name(stem.name + "_coords"), series.coords, "f8")
    return paths


def load_series(stem) -> KSpaceSeries:
    stem = Path(stem)
    data, meta = read_array(stem)
    coords, _ = read_array(stem.with_name(stem.name + "_coords"))
    if coords.shape[:2] != (data.shape[0], data.shape[2]):
        raise ArtifactError("k-space data and coordinates disagree in shape")
    return KSpaceSeries(coords=coords, data=data, frame_times_ms=np.asarray(meta["frame_times_ms"]),
                        binning=int(meta["binning"]), flip_deg=float(meta["flip_deg"]),
                        noise_sigma=float(meta["noise_sigma"]), seed=int(meta["seed"]),
                        schedule_hash=meta["schedule_hash"],
                        interleaf_index=np.asarray(meta["interleaf_index"], dtype=np.int64))


def save_coils(stem, maps: np.ndarray) -> list:
    return write_array(stem, maps, "c16")


def save_dictionary(stem, d: Dictionary) -> list:
    meta = {"t1_grid_ms": d.t1_grid_ms, "schedule_hash": d.schedule_hash,
            "frame_binning": d.frame_binning, "folded": d.folded, "skipped_blocks": d.skipped_blocks}
    return write_array(stem, d.atoms, "f4", meta)


def load_dictionary(stem) -> Dictionary:
    atoms, meta = read_array(stem)
    return Dictionary(t1_grid_ms=np.asarray(meta["t1_grid_ms"], dtype=np.float64),
                      atoms=atoms.astype(np.float64), schedule_hash=meta["schedule_hash"],
                      frame_binning=int(meta["frame_binning"]), folded=bool(meta["folded"]),
                      skipped_blocks=int(meta["skipped_blocks"]))


def write_pgm(path, image: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    """8-bit binary PGM; NaN pixels are black."""
    img = np.asarray(image, dtype=np.float64)
    finite = np.isfinite(img)
    lo = np.nanmin(img[finite]) if vmin is None and finite.any() else (vmin or 0.0)
    hi = np.nanmax(img[finite]) if vmax is None and finite.any() else (vmax if vmax is not None else 1.0)
    span = hi - lo if hi > lo else 1.0
    scaled = np.where(finite, np.clip((img - lo) / span, 0, 1) * 255, 0)
    data = np.round(scaled).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ArtifactError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def save_t1map(stem, m: T1Map, vmax_ms: float = 3000.0) -> list:
    stem = Path(stem)
    paths = write_array(stem, m.t1_ms, "f4", {"units": "ms", "nan": "no valid match"})
    paths += write_array(stem.with_name(stem.name + "_correlation"), m.correlation, "f4")
    preview = stem.with_suffix(".pgm")
    write_pgm(preview, m.t1_ms, 0.0, vmax_ms)
    return paths + [preview]


def load_t1map(stem) -> T1Map:
    stem = Path(stem)
    t1, _ = read_array(stem)
    corr, _ = read_array(stem.with_name(stem.name + "_correlation"))
    valid = np.isfinite(t1)
    return T1Map(t1_ms=t1.astype(np.float64), correlation=corr.astype(np.float64),
                 scale=np.full(t1.shape, np.nan), valid=valid)


def save_latents(stem, latents: LatentSignals) -> list:
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_time_ms", "cardiac", "resp"])
        for row in zip(latents.frame_times_ms, latents.cardiac, latents.resp):
            w.writerow([repr(float(v)) for v in row])
    json_path = stem.with_suffix(".json")
    write_json(json_path, latents.metadata)
    return [csv_path, json_path]


def load_latents(stem) -> LatentSignals:
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    if not csv_path.exists():
        raise ArtifactError(f"missing file {csv_path}")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 3:
        raise ArtifactError(f"{csv_path} must have 3 columns")
    return LatentSignals(table[:, 0], table[:, 1], table[:, 2], read_json(stem.with_suffix(".json")))


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def save_checkpoint(stem, net: Network, adam: AdamState, seed: int, extra: dict | None = None) -> list:
    """Flat float32 parameters and Adam moments plus an architecture/optimizer sidecar."""
    stem = Path(stem)
    blob = np.concatenate([net.params, adam.m, adam.v]).astype(np.float32)
    meta = {"architecture": net.describe(), "n_params": net.n_params, "seed": int(seed),
            "adam_t": int(adam.t), "layout": ["params", "adam_m", "adam_v"], "extra": extra or {}}
    return write_array(stem, blob, "f4", meta)


def load_checkpoint(stem):
    """Returns ``(net, adam_state, meta)``."""
    blob, meta = read_array(stem)
    arch = meta["architecture"]
    net = Network(arch["layers"], arch["input_shape"], dtype=np.dtype(arch.get("dtype", "float32")))
    n = net.n_params
    if blob.shape != (3 * n,):
        raise ArtifactError(f"checkpoint {stem} has {blob.size} values, expected {3 * n}")
    net.set_params(blob[:n])
    adam = AdamState(blob[n:2 * n].astype(net.dtype), blob[2 * n:].astype(net.dtype), int(meta["adam_t"]))
    return net, adam, meta


def write_training_log(path, history) -> None:
    write_csv(path, ["epoch", "data_loss", "reg_loss"], [(int(e), float(d), float(r)) for e, d, r in history])


def read_training_log(path) -> list:
    rows = read_csv(path)[1:]
    return [(int(r[0]), float(r[1]), float(r[2])) for r in rows]
