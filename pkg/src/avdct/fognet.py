"""Edge-to-fog transport.

The edge segments a recording, encodes and quantizes each ``C x L`` frame,
and writes the serialized frames as length-prefixed messages with sequence
numbers 0, 1, 2, ... followed by a zero-length end marker. The fog reads
them back strictly in order, decodes and reassembles the channels.

Offline encode/decode goes through the same generator and reader, so a
bitstream file and a socket session produce identical reconstructions.
"""

from __future__ import annotations

import contextlib
import logging
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from .bitstream import (
    dequantize,
    frame_parse,
    frame_serialize,
    iter_messages,
    parse_header,
    quantize,
    write_end,
    write_message,
)
from .decoder import decode_frame
from .encoder import encode_frame
from .errors import (
    ArchitectureMismatchError,
    ConfigError,
    DuplicateSequenceError,
    InvalidParameterError,
    SequenceGapError,
    SessionError,
)
from .evalkit import BYTES_PER_SAMPLE, Recording, compute_metrics, save_recording, segment_frames

log = logging.getLogger(__name__)

MODES = ("loopback", "tcp-client", "tcp-server", "simulated")


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class SessionConfig:
    mode: str = "loopback"
    endpoint: str | None = None
    link_bandwidth: float | None = None  # bytes/s
    link_latency: float = 0.0  # s
    tau: int | None = None
    omega: float | None = None
    checkpoint: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown session mode {self.mode!r}; expected one of {MODES}")
        if self.mode.startswith("tcp") and not self.endpoint:
            raise ConfigError(f"{self.mode} session needs an endpoint")
        if self.mode == "simulated" and self.link_bandwidth is None:
            raise ConfigError("simulated session needs a link bandwidth")

    def coding(self, hyper: dict | None = None) -> tuple[int, float]:
        """``(tau, omega)``: explicit overrides first, then the checkpoint's values."""
        hyper = hyper or {}
        tau = self.tau if self.tau is not None else hyper.get("tau")
        omega = self.omega if self.omega is not None else hyper.get("omega")
        if tau is None or omega is None:
            raise ConfigError("tau and omega are neither set nor recorded in the checkpoint")
        return int(tau), float(omega)


@dataclass
class LinkReport:
    frames_sent: int = 0
    bytes_sent: int = 0  # serialized frame bytes, excluding length prefixes
    frame_sizes: list = field(default_factory=list)
    transfer_time: float | None = None  # only when a link model is given
    throughput: float | None = None

    def summary(self) -> str:
        text = f"frames={self.frames_sent} bytes={self.bytes_sent}"
        if self.transfer_time is not None:
            text += f" time={self.transfer_time:.6g}s throughput={self.throughput:.6g}B/s"
        return text


def simulate_link(frame_sizes, bandwidth: float, latency: float = 0.0) -> LinkReport:
    """Transfer time of frames sent back to back: ``sum(latency + size / bandwidth)``."""
    if not bandwidth > 0:
        raise InvalidParameterError(f"bandwidth must be positive, got {bandwidth}")
    if not latency >= 0:
        raise InvalidParameterError(f"latency must be non-negative, got {latency}")
    sizes = [int(s) for s in frame_sizes]
    if any(s < 0 for s in sizes):
        raise InvalidParameterError("frame sizes must be non-negative")
    total = sum(sizes)
    elapsed = sum(latency + s / bandwidth for s in sizes)
    return LinkReport(len(sizes), total, sizes, elapsed, total / elapsed if elapsed > 0 else 0.0)


# -- edge ---------------------------------------------------------------------


def iter_wire_frames(recording, enc, tau: int, omega: float):
    """Serialized frames for ``recording``, one per ``C x L`` block, in sequence order."""
    frames = segment_frames(recording, enc.block_length)
    for seq, frame in enumerate(frames):
        yield frame_serialize(quantize(encode_frame(frame, enc), tau, omega), seq, enc.subbands)


def encode_recording(recording, enc, tau: int, omega: float) -> list[bytes]:
    return list(iter_wire_frames(recording, enc, tau, omega))


def write_frames(stream, frames) -> LinkReport:
    """Write frames and the end marker; a broken connection becomes :class:`SessionError`."""
    report = LinkReport()
    last = None
    try:
        for seq, frame in enumerate(frames):
            write_message(stream, frame)
            last = seq
            report.frames_sent += 1
            report.bytes_sent += len(frame)
            report.frame_sizes.append(len(frame))
        write_end(stream)
        stream.flush()
    except OSError as exc:
        raise SessionError(f"connection lost after sequence {last}: {exc}", last) from exc
    return report


@contextlib.contextmanager
def _open_stream(session: SessionConfig, mode: str):
    """Byte stream for a tcp session; the client connects, the server accepts one peer."""
    host, port = parse_endpoint(session.endpoint)
    try:
        if session.mode == "tcp-client":
            sock = socket.create_connection((host, port))
        else:
            with socket.create_server((host, port)) as server:
                sock, _ = server.accept()
    except OSError as exc:
        raise SessionError(f"cannot open {session.mode} session on {session.endpoint}: {exc}") from exc
    with sock, sock.makefile(mode) as stream:
        yield stream


def edge_stream(recording, enc, session: SessionConfig, stream=None, hyper=None) -> LinkReport:
    """Encode and send ``recording``; returns what went over the wire.

    ``stream`` is any writable binary file object (required for loopback).
    With a link bandwidth set, the report also carries the modelled
    transfer time.
    """
    session.validate()
    tau, omega = session.coding(hyper)
    frames = iter_wire_frames(recording, enc, tau, omega)
    if stream is not None:
        report = write_frames(stream, frames)
    elif session.mode.startswith("tcp"):
        with _open_stream(session, "wb") as s:
            report = write_frames(s, frames)
    elif session.mode == "simulated":
        sizes = [len(f) for f in frames]
        report = LinkReport(len(sizes), sum(sizes), sizes)
    else:
        raise ConfigError("loopback session needs a stream")
    if session.link_bandwidth is not None:
        timing = simulate_link(report.frame_sizes, session.link_bandwidth, session.link_latency)
        report.transfer_time, report.throughput = timing.transfer_time, timing.throughput
    log.info("edge sent %s", report.summary())
    return report


# -- fog ----------------------------------------------------------------------


def decode_messages(messages, dec, subbands: int | None = None, names=None, sample_rate=1.0):
    """Decode wire frames in strict sequence order.

    Returns ``(recording, compressed_bytes)``. Frames whose header disagrees
    with the decoder (channels, block length, subbands) are refused.
    """
    C, L = dec.channels, dec.block_length
    blocks, expected, nbytes = [], 0, 0
    for msg in messages:
        h = parse_header(msg)
        if h.sequence < expected:
            raise DuplicateSequenceError(
                f"duplicate frame: expected sequence {expected}, got {h.sequence}", expected, h.sequence
            )
        if h.sequence > expected:
            raise SequenceGapError(
                f"missing frame: expected sequence {expected}, got {h.sequence}", expected, h.sequence
            )
        if (h.channels, h.block_length) != (C, L) or (subbands is not None and h.subbands != subbands):
            raise ArchitectureMismatchError(
                f"frame {h.sequence} is {h.channels}x{h.block_length} with N={h.subbands}, "
                f"checkpoint expects {C}x{L} with N={subbands}"
            )
        q, _ = frame_parse(msg)
        blocks.append(decode_frame(dequantize(q), dec))
        nbytes += len(msg)
        expected += 1
    data = np.concatenate(blocks, axis=1) if blocks else np.zeros((C, 0))
    return Recording(data, list(names) if names else [], sample_rate), nbytes


def session_metrics(original, reconstruction: Recording, compressed_bytes: int):
    """Metrics against the part of ``original`` that was actually encoded."""
    orig = original.data if isinstance(original, Recording) else np.asarray(original, dtype=np.float64)
    C, M = reconstruction.data.shape
    if orig.shape[0] != C or orig.shape[1] < M:
        raise ConfigError(f"original {orig.shape} does not cover the reconstruction {(C, M)}")
    raw = C * M * BYTES_PER_SAMPLE
    return compute_metrics(orig[:, :M], reconstruction.data, raw, compressed_bytes)


def fog_receive(dec, session: SessionConfig | None = None, output_path=None, original=None,
                stream=None, subbands=None):
    """Receive, decode and optionally save a session; returns ``(recording, metrics)``.

    ``metrics`` is None unless ``original`` is given. Channel names and the
    sample rate are taken from the original when available.
    """
    names, rate = (original.names, original.sample_rate) if isinstance(original, Recording) else (None, 1.0)
    if stream is not None:
        rec, nbytes = decode_messages(iter_messages(stream), dec, subbands, names, rate)
    else:
        if session is None or not session.mode.startswith("tcp"):
            raise ConfigError("fog_receive needs a stream or a tcp session")
        session.validate()
        with _open_stream(session, "rb") as s:
            rec, nbytes = decode_messages(iter_messages(s), dec, subbands, names, rate)
    log.info("fog received %d samples per channel, %d bytes", rec.samples, nbytes)
    if output_path is not None:
        save_recording(rec, output_path)
    metrics = session_metrics(original, rec, nbytes) if original is not None else None
    return rec, metrics


def run_loopback(recording, ckpt, session: SessionConfig | None = None, output_path=None, original=None):
    """Edge and fog in one process over a socket pair.

    Returns ``(link_report, reconstruction, metrics)``.
    """
    session = session or SessionConfig()
    enc, dec = ckpt.encoder(), ckpt.decoder()
    edge_sock, fog_sock = socket.socketpair()
    outcome = {}

    def edge():
        try:
            with edge_sock, edge_sock.makefile("wb") as out:
                outcome["report"] = edge_stream(recording, enc, session, out, ckpt.hyper)
        except BaseException as exc:  # surfaced in the calling thread
            outcome["error"] = exc

    worker = threading.Thread(target=edge, name="avdct-edge", daemon=True)
    worker.start()
    try:
        with fog_sock, fog_sock.makefile("rb") as inp:
            rec, metrics = fog_receive(dec, output_path=output_path, original=original,
                                       stream=inp, subbands=ckpt.hyper.get("N"))
    finally:
        worker.join()
    if "error" in outcome:
        raise outcome["error"]
    return outcome["report"], rec, metrics


def bitstream_sizes(path) -> list[int]:
    """Sizes of the wire frames stored in a bitstream file."""
    with open(path, "rb") as fh:
        return [len(m) for m in iter_messages(fh)]



def evaluate_recordings(ckpt, recordings, tau=None, omega=None):
    """Offline encode/decode of each ``(name, Recording)``; returns ``[(name, MetricsRecord)]``."""
    tau, omega = SessionConfig(tau=tau, omega=omega).coding(ckpt.hyper)
    enc, dec = ckpt.encoder(), ckpt.decoder()
    rows = []
    for name, rec in recordings:
        wire = encode_recording(rec, enc, tau, omega)
        recon, nbytes = decode_messages(wire, dec, ckpt.hyper.get("N"), rec.names, rec.sample_rate)
        rows.append((name, session_metrics(rec, recon, nbytes)))
    return rows
