"""Command-line entry point: ``hmmgrid <command> ...``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 protocol/auth, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chunks import DEFAULT_ITERATIONS, KeyRing, bench_encryption, derive_key
from .errors import ArgumentError, DistributedRunError, VsgError
from .evaluation import evaluate_run, iterative_threshold_baseline
from .hmm import QuantizationParams, SegConfig, segment_slab
from .phantom import (
    Volume,
    cirs_spec,
    generate_phantom,
    nema_spec,
    read_header,
    read_truth,
    read_volume,
    write_truth,
    write_volume,
)

log = logging.getLogger("hmmgrid")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 1, 2, 3, 4
PASSWORD_ENV = "VSG_PASSWORD_FILE"


class UsageError(ArgumentError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_password(path: str | None) -> bytes:
    path = path or os.environ.get(PASSWORD_ENV)
    if not path:
        raise UsageError(f"no password file: pass --password-file or set {PASSWORD_ENV}")
    data = Path(path).read_bytes().rstrip(b"\r\n")
    if not data:
        raise UsageError(f"password file {path} is empty")
    return data


def _seg_config(args) -> SegConfig:
    return SegConfig(args.states, args.symbols, args.iters, args.tol)


# --- commands ----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    if args.kind == "nema":
        spec = nema_spec(args.spacing_mm, args.noise_sigma, args.seed)
    else:
        config = json.loads(Path(args.cirs_config).read_text()) if args.cirs_config else None
        spec = cirs_spec(args.spacing_mm, args.noise_sigma, args.seed, config)
    volume, truth = generate_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = out / args.kind
    write_volume(volume, base)
    write_truth(truth, base, {"phantom": args.kind, "noise_sigma": args.noise_sigma,
                              "seed": args.seed, "spacing_mm": args.spacing_mm})
    print(f"wrote {base}.raw, {base}.json, {base}.truth.json ({len(truth)} spheres)")
    return EXIT_OK


def _segment_distributed(volume: Volume, quant, cfg, args):
    from .gridnet import TcpTransport, TlsConfig, coordinator_run, plan_partition, volume_digest

    endpoints = [e.strip() for e in (args.workers or "").split(",") if e.strip()]
    if not endpoints:
        raise UsageError("distributed mode needs --workers host:port[,host:port...]")
    password = load_password(args.password_file)
    secret = derive_key(password, iterations=args.kdf_iterations)
    tls_cfg = None
    if args.tls:
        tls_cfg = TlsConfig(ca_file=args.tls_ca, cert_file=args.tls_cert, key_file=args.tls_key,
                            server_hostname=args.tls_server_name)
    transport = TcpTransport(tls=args.tls, tls_config=tls_cfg)
    plan = plan_partition(volume.dims, len(endpoints), endpoints, quant, cfg, args.split,
                          volume_digest(volume.data))
    return coordinator_run(volume, plan, secret, transport, max_retries=args.max_retries), plan


def cmd_segment(args) -> int:
    volume = read_volume(args.in_path)
    cfg = _seg_config(args)
    quant = QuantizationParams.from_data(volume.data, cfg.n_symbols)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "mode": args.mode,
        "input": str(args.in_path),
        "seg": cfg.to_json(),
        "quant": quant.to_json(),
        "config_digest": cfg.digest(quant),
        "split": args.split,
        "chunks_per_slice": args.split * args.split,
        "dims": list(volume.dims),
        "version": __version__,
    }
    t0 = time.perf_counter()
    if args.mode == "local":
        labels = Volume(segment_slab(volume.data, quant, cfg), volume.spacing)
    elif args.mode == "threshold":
        labels = iterative_threshold_baseline(volume)
        manifest["seg"] = {"method": "iterative-threshold", "n_states": 2}
    else:
        manifest["workers"] = args.workers
        manifest["tls"] = bool(args.tls)
        try:
            labels, plan = _segment_distributed(volume, quant, cfg, args)
        except DistributedRunError as exc:
            manifest["status"] = "failed"
            manifest["error"] = str(exc)
            manifest["partial"] = exc.report
            manifest["timing_s"] = time.perf_counter() - t0
            _write_json(out / "manifest.json", manifest)
            partial = getattr(exc, "partial", None)
            if partial is not None:
                write_volume(partial, out / "labels.partial")
            raise
        manifest["slab_sizes"] = plan.slab_sizes
    manifest["timing_s"] = time.perf_counter() - t0
    manifest["status"] = "ok"
    n_states = 2 if args.mode == "threshold" else cfg.n_states
    write_volume(labels, out / "labels", {"K": n_states, "cfg_digest": manifest["config_digest"],
                                          "z_offset": 0})
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {out / 'labels.raw'} ({args.mode}, {manifest['timing_s']:.2f} s)")
    return EXIT_OK


def cmd_worker(args) -> int:
    from .gridnet import TlsConfig, worker_serve

    password = load_password(args.password_file)
    tls_cfg = None
    if args.tls_cert or args.tls_key:
        if not (args.tls_cert and args.tls_key):
            raise UsageError("--tls-cert and --tls-key go together")
        tls_cfg = TlsConfig(ca_file=args.tls_ca, cert_file=args.tls_cert, key_file=args.tls_key)
    else:
        log.warning("worker running without TLS (test mode)")
    worker_serve(args.listen, KeyRing(password, args.kdf_iterations), tls_cfg)
    return EXIT_OK


def cmd_eval(args) -> int:
    labels = read_volume(args.labels)
    truth = read_truth(args.truth)
    header = read_header(args.labels)
    lesion = args.lesion_label
    if lesion is None:
        lesion = int(header.get("K", 3)) - 1
    report = evaluate_run(labels, truth, lesion, config_digest=header.get("cfg_digest"))
    doc = report.to_json()
    doc["lesion_label"] = lesion
    _write_json(Path(args.report), doc)
    print(report.to_table())
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.what == "crypto":
        rng = np.random.default_rng(args.seed)
        image = rng.integers(0, 65536, size=(args.size, args.size), dtype=np.uint16)
        rows = bench_encryption(image, args.splits, args.reps)
        doc = [r.to_json() for r in rows]
        for r in rows:
            print(f"k={r.k:2d} chunks={r.chunks:3d} total={r.total_ms:.4f} ms "
                  f"per_chunk={r.per_chunk_us:.2f} us")
    else:
        from .gridnet.speedup import measure_speedup

        if not args.in_path:
            raise UsageError("bench speedup needs --in VOL")
        volume = read_volume(args.in_path)
        doc = measure_speedup(volume, args.workers_list, args.reps, SegConfig(),
                              args.split, iterations=args.kdf_iterations)
        for r in doc["rows"]:
            print(f"workers={r['workers']:2d} median={r['median_s']:.3f} s speedup={r['speedup']:.2f}")
    _write_json(Path(args.report), doc)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmmgrid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate a synthetic phantom volume")
    ph.add_argument("kind", choices=["nema", "cirs"])
    ph.add_argument("--spacing-mm", type=float, default=1.0)
    ph.add_argument("--noise-sigma", type=float, default=0.0)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--cirs-config", help="JSON file overriding the lesion group table")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    sg = sub.add_parser("segment", help="segment a volume locally or across workers")
    sg.add_argument("mode", choices=["local", "distributed", "threshold"])
    sg.add_argument("--in", dest="in_path", required=True)
    sg.add_argument("--out", required=True)
    sg.add_argument("--states", type=int, default=3)
    sg.add_argument("--symbols", type=int, default=32)
    sg.add_argument("--iters", type=int, default=20)
    sg.add_argument("--tol", type=float, default=1e-4)
    sg.add_argument("--split", type=int, default=4, help="k for the k x k chunk grid")
    sg.add_argument("--workers", help="comma-separated host:port list")
    sg.add_argument("--max-retries", type=int, default=2)
    sg.add_argument("--password-file")
    sg.add_argument("--kdf-iterations", type=int, default=DEFAULT_ITERATIONS)
    sg.add_argument("--tls", action="store_true", help="TLS 1.3 to workers (needs --tls-ca)")
    sg.add_argument("--tls-ca")
    sg.add_argument("--tls-cert", help="client certificate for mutual TLS")
    sg.add_argument("--tls-key")
    sg.add_argument("--tls-server-name")
    sg.set_defaults(func=cmd_segment)

    wk = sub.add_parser("worker", help="run a segmentation worker")
    wk.add_argument("action", choices=["serve"])
    wk.add_argument("--listen", default="127.0.0.1:7460")
    wk.add_argument("--password-file")
    wk.add_argument("--kdf-iterations", type=int, default=DEFAULT_ITERATIONS)
    wk.add_argument("--tls-cert")
    wk.add_argument("--tls-key")
    wk.add_argument("--tls-ca", help="require client certificates signed by this CA")
    wk.set_defaults(func=cmd_worker)

    ev = sub.add_parser("eval", help="measure lesion diameters against ground truth")
    ev.add_argument("--labels", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--lesion-label", type=int)
    ev.set_defaults(func=cmd_eval)

    bn = sub.add_parser("bench", help="crypto timing or distributed speedup")
    bn.add_argument("what", choices=["crypto", "speedup"])
    bn.add_argument("--splits", type=_int_list, default=[1, 3, 5, 7, 9])
    bn.add_argument("--reps", type=int, default=30)
    bn.add_argument("--size", type=int, default=128, help="crypto: slice edge in pixels")
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--in", dest="in_path")
    bn.add_argument("--workers-list", type=_int_list, default=[1, 2, 4, 8])
    bn.add_argument("--split", type=int, default=4)
    bn.add_argument("--kdf-iterations", type=int, default=DEFAULT_ITERATIONS)
    bn.add_argument("--report", required=True)
    bn.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hmmgrid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VsgError as exc:
        print(f"hmmgrid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hmmgrid: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
