"""Metrics, recording ingestion, block segmentation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DegenerateSignalError,
    IngestionError,
    InvalidInputError,
    LengthMismatchError,
    NonFiniteValueError,
    RecordingParseError,
)

BYTES_PER_SAMPLE = 8  # raw size accounting assumes float64 storage


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsRecord:
    cr: float
    prd: float
    prdn: float
    qs: float
    raw_bytes: int
    compressed_bytes: int

    @property
    def qs_infinite(self) -> bool:
        return math.isinf(self.qs)

    def row(self, recording_id="") -> list:
        return [recording_id, self.cr, self.prd, self.prdn, self.qs, self.raw_bytes, self.compressed_bytes]


METRICS_HEADER = ["recording", "cr", "prd", "prdn", "qs", "raw_bytes", "compressed_bytes"]


def _values(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Recording) else x, dtype=np.float64)


def _sums(original, reconstructed):
    o, r = _values(original), _values(reconstructed)
    if o.shape != r.shape:
        raise InvalidInputError(f"shape mismatch: original {o.shape}, reconstructed {r.shape}")
    err = float(np.sum((o - r) ** 2))
    energy = float(np.sum(o**2))
    spread = float(np.sum((o - o.mean()) ** 2))
    return err, energy, spread


def _record(err, energy, spread, raw_bytes, compressed_bytes) -> MetricsRecord:
    if compressed_bytes <= 0:
        raise InvalidInputError("compressed size must be positive")
    if energy == 0.0:
        raise DegenerateSignalError("original signal is identically zero; PRD is undefined")
    if spread == 0.0:
        raise DegenerateSignalError("original signal has zero variance; PRDN is undefined")
    prd = 100.0 * math.sqrt(err / energy)
    prdn = 100.0 * math.sqrt(err / spread)
    cr = raw_bytes / compressed_bytes
    qs = cr / prd if prd > 0 else math.inf
    return MetricsRecord(cr, prd, prdn, qs, int(raw_bytes), int(compressed_bytes))


def compute_metrics(original, reconstructed, raw_bytes: int, compressed_bytes: int) -> MetricsRecord:
    """CR, PRD, PRDN and QS pooled over every channel and sample.

    ``original`` and ``reconstructed`` are :class:`Recording` objects or arrays
    of equal shape.
    """
    return _record(*_sums(original, reconstructed), raw_bytes, compressed_bytes)


def pooled_metrics(pairs, raw_bytes: int, compressed_bytes: int) -> MetricsRecord:
    """Metrics over several recordings from pooled sums (not averaged ratios).

    The mean used by PRDN is the mean of the pooled original.
    """
    originals = [_values(o).ravel() for o, _ in pairs]
    recons = [_values(r).ravel() for _, r in pairs]
    return compute_metrics(np.concatenate(originals), np.concatenate(recons), raw_bytes, compressed_bytes)


def average_metrics(records) -> MetricsRecord:
    """Table-style reduction: arithmetic mean of per-recording metrics."""
    records = list(records)
    if not records:
        raise InvalidInputError("no metrics to average")
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in records]))  # noqa: E731
    return MetricsRecord(
        mean("cr"), mean("prd"), mean("prdn"), mean("qs"),
        sum(r.raw_bytes for r in records), sum(r.compressed_bytes for r in records),
    )


def write_metrics_csv(path, rows):
    """``rows`` is an iterable of ``(recording_id, MetricsRecord)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for rid, rec in rows:
            w.writerow(rec.row(rid))


# -- recordings -----------------------------------------------------------------


@dataclass
class Recording:
    data: np.ndarray  # (C, M)
    names: list = field(default_factory=list)
    sample_rate: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise IngestionError(f"recording must be 2-D (channels x samples), got {self.data.shape}")
        if not self.names:
            self.names = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.names) != self.data.shape[0]:
            raise LengthMismatchError(f"{len(self.names)} names for {self.data.shape[0]} channels")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError("recording contains non-finite samples")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]


_DTYPES = {"f32": "<f4", "f64": "<f8"}


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _detect_format(path: Path) -> str:
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def load_recording(path, fmt: str | None = None) -> Recording:
    """Read a CSV (header of channel names, one row per sample) or a raw
    little-endian binary file described by a ``<file>.json`` manifest.

    A CSV may begin with a ``# sample_rate=<Hz>`` comment line.
    """
    path = Path(path)
    fmt = fmt or _detect_format(path)
    if not path.exists():
        raise IngestionError(f"recording not found: {path}")
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "binary":
        return _load_binary(path)
    raise IngestionError(f"unknown recording format {fmt!r}")


def _load_csv(path: Path) -> Recording:
    rate = 1.0
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        meta = lines.pop(0).lstrip("#").strip()
        for item in meta.split(","):
            key, _, val = item.partition("=")
            if key.strip() == "sample_rate":
                try:
                    rate = float(val)
                except ValueError:
                    raise RecordingParseError(f"bad sample rate {val!r} in {path}") from None
    rows = list(csv.reader(lines))
    if not rows:
        raise RecordingParseError(f"{path} is empty")
    names = [n.strip() for n in rows[0]]
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names):
            raise LengthMismatchError(f"{path}:{lineno}: {len(row)} fields, header has {len(names)}")
        try:
            values.append([float(v) for v in row])
        except ValueError as exc:
            raise RecordingParseError(f"{path}:{lineno}: {exc}") from None
    data = np.array(values, dtype=np.float64).reshape(-1, len(names)).T
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path} contains non-finite samples")
    return Recording(data, names, rate)


def _load_binary(path: Path) -> Recording:
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
        C, M = int(manifest["channels"]), int(manifest["samples"])
        dtype = _DTYPES[manifest.get("dtype", "f64")]
        rate = float(manifest.get("sample_rate", 1.0))
        names = list(manifest.get("names") or [])
    except FileNotFoundError:
        raise IngestionError(f"missing manifest {mpath}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise RecordingParseError(f"bad manifest {mpath}: {exc}") from None
    raw = path.read_bytes()
    expected = C * M * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise LengthMismatchError(f"{path} has {len(raw)} bytes, manifest requires {expected}")
    data = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(M, C).T
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path} contains non-finite samples")
    return Recording(data, names, rate)


def save_recording(rec: Recording, path, fmt: str | None = None, dtype: str = "f64"):
    path = Path(path)
    fmt = fmt or _detect_format(path)
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# sample_rate={rec.sample_rate!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(rec.names)
        for row in rec.data.T:
            w.writerow([repr(float(v)) for v in row])
        path.write_text(buf.getvalue())
    elif fmt == "binary":
        path.write_bytes(np.ascontiguousarray(rec.data.T).astype(_DTYPES[dtype]).tobytes())
        manifest = {
            "channels": rec.channels,
            "samples": rec.samples,
            "dtype": dtype,
            "sample_rate": rec.sample_rate,
            "names": rec.names,
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=1) + "\n")
    else:
        raise IngestionError(f"unknown recording format {fmt!r}")


def segment_frames(rec, L: int, standardize: bool = False) -> np.ndarray:
    """Non-overlapping ``C x L`` frames, shape ``(floor(M / L), C, L)``.

    Trailing samples that do not fill a block are dropped. With
    ``standardize`` each channel is shifted and scaled to zero mean, unit
    variance first.
    """
    if L < 1:
        raise InvalidInputError(f"block length must be >= 1, got {L}")
    data = _values(rec)
    if standardize:
        std = data.std(axis=1, keepdims=True)
        data = (data - data.mean(axis=1, keepdims=True)) / np.where(std > 0, std, 1.0)
    C, M = data.shape
    F = M // L
    return data[:, : F * L].reshape(C, F, L).transpose(1, 0, 2).copy()


def reassemble(frames) -> np.ndarray:
    """Inverse of :func:`segment_frames`: ``(F, C, L) -> (C, F * L)``."""
    frames = np.asarray(frames, dtype=np.float64)
    F, C, L = frames.shape
    return frames.transpose(1, 0, 2).reshape(C, F * L)


def synthetic_recording(channels=8, samples=64 * 512, sample_rate=160.0, noise=0.05,
                        amplitude=1.0, sources=4, band=(1.0, 30.0), seed=0) -> Recording:
    """EEG-like test signal: a few band-limited sinusoidal sources mixed into
    every channel, scaled to RMS ``amplitude``, plus white noise at ``noise``
    times that RMS."""
    rng = np.random.default_rng(seed)
    t = np.arange(samples) / sample_rate
    freqs = rng.uniform(*band, size=sources)
    phases = rng.uniform(0, 2 * np.pi, size=sources)
    amps = rng.uniform(0.5, 1.5, size=sources)
    src = amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])
    mix = rng.normal(size=(channels, sources))
    clean = mix @ src / np.sqrt(sources)
    clean *= amplitude / np.sqrt(np.mean(clean**2))
    data = clean + noise * amplitude * rng.normal(size=clean.shape)
    return Recording(data, sample_rate=sample_rate)


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")
ARCH_KEYS = ("L", "C", "N", "h")


@dataclass
class Checkpoint:
    params: dict  # name -> float64 array; "enc.*" and "dec.*"
    hyper: dict  # L, C, N, h, lambda, epsilon, rho, tau, omega
    version: int = CKPT_VERSION

    def encoder(self):
        from .encoder import EncoderParams

        return EncoderParams.from_dict(_strip(self.params, "enc."))

    def decoder(self):
        from .decoder import DecoderParams

        return DecoderParams.from_dict(_strip(self.params, "dec."))

    @classmethod
    def from_models(cls, enc, dec, hyper: dict) -> "Checkpoint":
        params = {"enc." + k: v for k, v in enc.as_dict().items()}
        params.update({"dec." + k: v for k, v in dec.as_dict().items()})
        return cls({k: np.array(v, dtype=np.float64) for k, v in params.items()}, dict(hyper))


def _strip(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _expected_shapes(hyper) -> dict:
    L, C, N, h = (int(hyper[k]) for k in ARCH_KEYS)
    if h < 1 or C % h:
        raise ArchitectureMismatchError(f"C={C} is not divisible by h={h}")
    D = C // h
    return {
        "enc.lin_w": (L, L), "enc.lin_b": (L,), "enc.t": (N, L), "enc.v": (N, L), "enc.fuse_w": (N,),
        "dec.fb_f": (C - 1, L), "dec.fb_g": (C - 1, L), "dec.post_w": (C, C), "dec.post_b": (C,),
        "dec.dec_t": (L,), "dec.out_w": (L, L), "dec.out_b": (L,),
        "dec.mha.wq": (h, C, D), "dec.mha.wk": (h, C, D), "dec.mha.wv": (h, C, D),
        "dec.mha.bq": (D,), "dec.mha.bk": (D,), "dec.mha.bv": (D,), "dec.mha.wo": (C, C),
    }


def _validate_architecture(params, hyper):
    missing = [k for k in ARCH_KEYS if k not in hyper]
    if missing:
        raise CheckpointError(f"checkpoint hyperparameters lack {missing}")
    expected = _expected_shapes(hyper)
    for name, shape in expected.items():
        if name not in params:
            raise ArchitectureMismatchError(f"checkpoint lacks tensor {name}")
        got = tuple(params[name].shape)
        # per-channel encoder sets carry a leading C axis
        if got != shape and not (name.startswith("enc.") and got == (int(hyper["C"]),) + shape):
            raise ArchitectureMismatchError(f"tensor {name} has shape {got}, architecture needs {shape}")


def checkpoint_save(ckpt: Checkpoint, path):
    _validate_architecture(ckpt.params, ckpt.hyper)
    names = sorted(ckpt.params)
    tensors = [np.ascontiguousarray(ckpt.params[n], dtype="<f8") for n in names]
    manifest = {
        "hyper": ckpt.hyper,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in zip(names, tensors)],
        "data_bytes": int(sum(t.nbytes for t in tensors)),
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, ckpt.version, len(text)))
        fh.write(text)
        for t in tensors:
            fh.write(t.tobytes())


def checkpoint_load(path, expect: dict | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` maps architecture keys (L, C, N, h) to
    values the caller's session requires."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEAD.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the checkpoint header")
    magic, version, mlen = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = _CKPT_HEAD.size
    if len(blob) < start + mlen:
        raise CheckpointTruncatedError(f"{path}: manifest cut short")
    try:
        manifest = json.loads(blob[start:start + mlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from None
    data = blob[start + mlen:]
    if len(data) != manifest["data_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: manifest declares {manifest['data_bytes']} data bytes, file has {len(data)}"
        )
    params, offset = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        params[entry["name"]] = np.frombuffer(data, "<f8", count=n // 8, offset=offset).reshape(shape).copy()
        offset += n
    if offset != len(data):
        raise CheckpointTruncatedError(f"{path}: tensor table does not cover the data section")
    hyper = manifest["hyper"]
    for key, want in (expect or {}).items():
        if key in hyper and hyper[key] != want:
            raise ArchitectureMismatchError(f"checkpoint has {key}={hyper[key]}, session needs {want}")
    _validate_architecture(params, hyper)
    return Checkpoint(params, hyper, version)
