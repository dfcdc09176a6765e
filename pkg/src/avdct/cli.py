"""Command line entry point: ``avdct <command> ...``.

Exit status: 0 success, 2 configuration error, 3 ingestion error,
4 protocol or bitstream error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .bitstream import iter_messages, write_end, write_message
from .errors import AvdctError, ConfigError, IngestionError
from .evalkit import (
    METRICS_HEADER,
    checkpoint_load,
    checkpoint_save,
    load_recording,
    manifest_path,
    save_recording,
    segment_frames,
    write_metrics_csv,
)
from .fognet import (
    SessionConfig,
    bitstream_sizes,
    decode_messages,
    edge_stream,
    encode_recording,
    fog_receive,
    run_loopback,
    session_metrics,
    simulate_link,
)
from .objective import LossConfig, init_model, train

log = logging.getLogger("avdct")


def _recording_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise IngestionError(f"{path}: no such file or directory")
    # binary recordings are recognised by their json manifest
    files = sorted(
        p for p in path.iterdir()
        if p.is_file() and (p.suffix.lower() in (".csv", ".txt") or manifest_path(p).exists())
    )
    if not files:
        raise IngestionError(f"{path}: no recordings found")
    return files


def _print_metrics(m):
    print(f"CR={m.cr:.4f} PRD={m.prd:.4f} PRDN={m.prdn:.4f} QS={m.qs:.4f} "
          f"raw_bytes={m.raw_bytes} compressed_bytes={m.compressed_bytes}")


def cmd_train(args):
    cfg = LossConfig(lam=args.lam, epsilon=args.epsilon, rho=args.rho, kl_direction=args.kl,
                     max_epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     tau=args.tau, omega=args.omega)
    cfg.validate()
    recs = [load_recording(p) for p in _recording_files(Path(args.data))]
    channels = {r.channels for r in recs}
    if len(channels) != 1:
        raise ConfigError(f"recordings disagree on channel count: {sorted(channels)}")
    frames = np.concatenate([segment_frames(r, args.block) for r in recs])
    if frames.shape[0] == 0:
        raise IngestionError(f"recordings are shorter than one {args.block}-sample block")
    log.info("training on %d frames of %d x %d", *frames.shape)
    enc, dec = init_model(frames.shape[1], args.block, args.subbands, args.heads, seed=args.seed)
    ckpt, history = train(frames, enc, dec, cfg, seed=args.seed)
    checkpoint_save(ckpt, args.out)
    if args.history:
        history.write_csv(args.history)
    last = history.records[-1] if history.records else None
    if last is not None:
        print(f"epochs={len(history)} loss={last.loss:.6g} zero_fraction={last.zero_fraction:.4f} "
              f"stopped_by_rho={history.stopped_by_rho}")


def _session(args, **kw) -> SessionConfig:
    return SessionConfig(tau=getattr(args, "tau", None), omega=getattr(args, "omega", None),
                         checkpoint=args.ckpt, **kw)


def cmd_encode(args):
    ckpt = checkpoint_load(args.ckpt)
    rec = load_recording(args.inp)
    tau, omega = _session(args).coding(ckpt.hyper)
    frames = encode_recording(rec, ckpt.encoder(), tau, omega)
    with open(args.out, "wb") as fh:
        for f in frames:
            write_message(fh, f)
        write_end(fh)
    print(f"frames={len(frames)} bytes={sum(map(len, frames))}")


def cmd_decode(args):
    ckpt = checkpoint_load(args.ckpt)
    original = load_recording(args.original) if args.original else None
    names, rate = (original.names, original.sample_rate) if original else (None, 1.0)
    with open(args.inp, "rb") as fh:
        rec, nbytes = decode_messages(iter_messages(fh), ckpt.decoder(), ckpt.hyper.get("N"), names, rate)
    save_recording(rec, args.out)
    print(f"samples={rec.samples} channels={rec.channels}")
    if original is not None:
        _print_metrics(session_metrics(original, rec, nbytes))


def cmd_eval(args):
    original = load_recording(args.original)
    recon = load_recording(args.reconstructed)
    m = session_metrics(original, recon, sum(bitstream_sizes(args.compressed)))
    _print_metrics(m)
    if args.csv:
        write_metrics_csv(args.csv, [(Path(args.original).stem, m)])


def cmd_edge(args):
    ckpt = checkpoint_load(args.ckpt)
    rec = load_recording(args.inp)
    if args.loopback:
        session = _session(args, mode="loopback", link_bandwidth=args.bandwidth, link_latency=args.latency)
        report, _, metrics = run_loopback(rec, ckpt, session, output_path=args.out, original=rec)
        print(report.summary())
        _print_metrics(metrics)
    else:
        session = _session(args, mode="tcp-client", endpoint=args.connect,
                           link_bandwidth=args.bandwidth, link_latency=args.latency)
        print(edge_stream(rec, ckpt.encoder(), session, hyper=ckpt.hyper).summary())


def cmd_fog(args):
    ckpt = checkpoint_load(args.ckpt)
    original = load_recording(args.original) if args.original else None
    session = SessionConfig(mode="tcp-server", endpoint=args.listen, checkpoint=args.ckpt)
    rec, metrics = fog_receive(ckpt.decoder(), session, args.out, original, subbands=ckpt.hyper.get("N"))
    print(f"samples={rec.samples} channels={rec.channels}")
    if metrics is not None:
        _print_metrics(metrics)


def _parse_sizes(text: str) -> list[int]:
    path = Path(text)
    if path.is_file():
        text = path.read_text()
    try:
        return [int(tok) for tok in text.replace("\n", ",").split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"frame sizes must be integers: {exc}") from None


def cmd_simulate(args):
    r = simulate_link(_parse_sizes(args.sizes), args.bandwidth, args.latency)
    print(r.summary())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avdct", description="Variational DCT codec for multi-channel EEG.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a codec and write a checkpoint")
    t.add_argument("--data", required=True, help="recording file or directory of recordings")
    t.add_argument("--out", required=True)
    t.add_argument("--lambda", dest="lam", type=float, default=1e-5)
    t.add_argument("--rho", type=float, default=0.6)
    t.add_argument("--epsilon", type=float, default=LossConfig.epsilon)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--kl", choices=("forward", "reverse"), default="forward")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--block", type=int, default=64)
    t.add_argument("--subbands", type=int, default=3)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--tau", type=int, default=2)
    t.add_argument("--omega", type=float, default=1.2)
    t.add_argument("--history", help="write per-epoch history to this CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress a recording to a bitstream file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=int)
    e.add_argument("--omega", type=float)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a recording from a bitstream file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--original", help="take channel names and sample rate from this recording")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="CR, PRD, PRDN and QS for a reconstruction")
    v.add_argument("--original", required=True)
    v.add_argument("--reconstructed", required=True)
    v.add_argument("--compressed", required=True, help="bitstream file")
    v.add_argument("--csv", help="write a metrics row (" + ",".join(METRICS_HEADER) + ")")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("edge", help="stream a recording to a fog node")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", dest="inp", required=True)
    where = g.add_mutually_exclusive_group(required=True)
    where.add_argument("--connect", metavar="HOST:PORT")
    where.add_argument("--loopback", action="store_true", help="run edge and fog in this process")
    g.add_argument("--out", help="loopback only: write the reconstruction here")
    g.add_argument("--tau", type=int)
    g.add_argument("--omega", type=float)
    g.add_argument("--bandwidth", type=float, help="model a link of this many bytes/s")
    g.add_argument("--latency", type=float, default=0.0)
    g.set_defaults(func=cmd_edge)

    f = sub.add_parser("fog", help="receive one edge session and reconstruct it")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--listen", required=True, metavar="HOST:PORT")
    f.add_argument("--out", required=True)
    f.add_argument("--original")
    f.set_defaults(func=cmd_fog)

    s = sub.add_parser("simulate", help="transfer time of frames over a modelled link")
    s.add_argument("--sizes", required=True, help="comma-separated sizes or a file of them")
    s.add_argument("--bandwidth", type=float, required=True)
    s.add_argument("--latency", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AvdctError as exc:
        print(f"avdct: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"avdct: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
