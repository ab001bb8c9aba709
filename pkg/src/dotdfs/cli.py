"""``dotdfs`` command-line tool.

Exit codes: 0 success, 1 transfer failure, 2 usage or configuration error
(including a port that cannot be bound), 3 authentication failure.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import signal
import socket
import sys
import tempfile
import threading
import time
from pathlib import Path

from . import dotsec, wanmodel, wire
from .connection import RemoteUrl, Security
from .errors import AuthFailed, BindFailed, ConfigError, DotDfsError, PartialFailure

log = logging.getLogger("dotdfs")

EXIT_OK = 0
EXIT_TRANSFER = 1
EXIT_USAGE = 2
EXIT_AUTH = 3

JSON_SCHEMA = 1
DEFAULT_WINDOW = 4 * 1024 * 1024
PASSWORD_ENV = "DOTDFS_PASSWORD"
USER_ENV = "DOTDFS_USER"

_SUFFIXES = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30, "T": 1 << 40}


class UsageError(Exception):
    pass


def parse_size(text: str) -> int:
    """``4M``, ``256K``, ``1G`` or plain bytes (binary multiples)."""
    t = text.strip().upper().removesuffix("IB").removesuffix("B")
    unit = t[-1] if t and t[-1] in _SUFFIXES else ""
    number = t[:-1] if unit else t
    try:
        value = float(number) * _SUFFIXES[unit]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if value < 0 or not value.is_integer():
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(value)


def parse_range(text: str) -> tuple[int, int]:
    off, sep, length = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("range must be OFFSET:LENGTH")
    return parse_size(off), parse_size(length)


def mbit(bw: float) -> float:
    """Throughput in Mbit/s rounded to 3 significant digits (shared by text and JSON output)."""
    return float(f"{wanmodel.to_mbit(bw):.3g}")


# -- credentials -----------------------------------------------------------------

def resolve_security(args, url_user: str | None = None) -> Security:
    user = url_user or args.user or os.environ.get(USER_ENV) or getpass.getuser()
    if args.password_file:
        password = Path(args.password_file).read_text("utf-8").rstrip("\r\n")
    elif os.environ.get(args.password_env):
        password = os.environ[args.password_env]
    elif sys.stdin.isatty():
        password = getpass.getpass(f"password for {user}: ")
    else:
        raise UsageError(f"no password: set {args.password_env}, pass --password-file, or run interactively")
    suite = dotsec.SUITES_BY_NAME[args.suite]
    protection = {"auto": None, "semi": wire.Protection.SEMI_SECURE,
                  "encrypted": wire.Protection.ENCRYPTED}[args.protection]
    return Security(dotsec.Credential(user, password), suite, protection)


def _remote(text: str) -> RemoteUrl:
    try:
        return RemoteUrl.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps({"schema": JSON_SCHEMA, **payload}, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _transfer_payload(report) -> dict:
    return {
        "direction": report.direction,
        "bytes": report.bytes_moved,
        "seconds": round(report.elapsed, 3),
        "mbit_per_s": mbit(report.throughput),
        "bw_bytes_per_s": report.throughput,
        "n": report.n,
        "block": report.block,
        "window": report.window,
        "granted_window": report.granted_window,
        "per_stream": list(report.per_stream),
        "verified": report.verified,
    }


def _transfer_lines(p: dict) -> list[str]:
    split = " ".join(str(b) for b in p["per_stream"])
    return [f"{p['direction']}: {p['bytes']} bytes in {p['seconds']} s, {p['mbit_per_s']} Mbit/s, "
            f"n={p['n']} per-stream [{split}]" + (" verified" if p["verified"] else "")]


# -- subcommands -------------------------------------------------------------

def cmd_serve(args) -> int:
    from .server import DotDfsServer, ServerConfig

    overrides = {"root": args.root, "host": args.host, "port": args.port, "keypair": args.keypair,
                 "credentials": args.credentials, "session_cap": args.session_cap,
                 "wlm_timeout": args.wlm_timeout, "log_level": args.log_level, "grace": args.grace}
    if args.config:
        config = ServerConfig.from_file(args.config, **overrides)
    else:
        config = ServerConfig(**{k: v for k, v in overrides.items() if v is not None})
    logging.getLogger().setLevel(config.log_level.upper())
    if not Path(config.root).is_dir():
        raise ConfigError(f"root {config.root} is not a directory")
    server = DotDfsServer(config)
    server.start()
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    while not stop.wait(0.5):
        pass
    log.info("shutting down, grace %.1f s", config.grace)
    server.stop()
    return EXIT_OK


def cmd_keygen(args) -> int:
    dotsec.save_keypair(dotsec.generate_keypair(), args.path)
    print(f"wrote {args.path}")
    return EXIT_OK


def cmd_adduser(args) -> int:
    path = Path(args.credentials)
    store = dotsec.CredentialStore.load(path) if path.exists() else dotsec.CredentialStore(path)
    security = resolve_security(argparse.Namespace(**{**vars(args), "suite": "aes256-sha256",
                                                      "protection": "auto"}), args.username)
    store.add_user(args.username, security.credential.password, args.perms)
    store.save(path)
    print(f"added {args.username} to {path}")
    return EXIT_OK


def cmd_cp(args) -> int:
    from . import client

    src_remote, dst_remote = RemoteUrl.is_remote(args.src), RemoteUrl.is_remote(args.dst)
    if src_remote == dst_remote:
        raise UsageError("exactly one of SRC and DST must be a dotdfs:// URL")
    offset, length = args.range or (0, 0)
    kwargs = dict(n=args.streams, window=args.window, block=args.block, offset=offset,
                  length=length, verify=args.verify, timeout=args.timeout)
    if dst_remote:
        url = _remote(args.dst)
        report = client.upload(url.endpoint, resolve_security(args, url.user), args.src, url.path, **kwargs)
    else:
        url = _remote(args.src)
        report = client.download(url.endpoint, resolve_security(args, url.user), url.path, args.dst, **kwargs)
    payload = _transfer_payload(report)
    _emit(args, payload, _transfer_lines(payload))
    return EXIT_OK


def cmd_cpdir(args) -> int:
    from . import dirtree

    src_remote, dst_remote = RemoteUrl.is_remote(args.src), RemoteUrl.is_remote(args.dst)
    if src_remote == dst_remote:
        raise UsageError("exactly one of SRC and DST must be a dotdfs:// URL")
    kwargs = dict(m=args.channels, n=args.streams, window=args.window, block=args.block,
                  timeout=args.timeout, manifest=args.manifest)
    try:
        if dst_remote:
            url = _remote(args.dst)
            report = dirtree.upload_tree(url.endpoint, resolve_security(args, url.user), args.src, url.path, **kwargs)
        else:
            url = _remote(args.src)
            report = dirtree.download_tree(url.endpoint, resolve_security(args, url.user), url.path, args.dst, **kwargs)
    except PartialFailure as exc:
        _emit_tree(args, exc.report)
        for f in exc.report.failed:
            print(f"failed: {f.path}: {f.error}", file=sys.stderr)
        return EXIT_TRANSFER
    _emit_tree(args, report)
    return EXIT_OK


def _emit_tree(args, report) -> None:
    payload = report.to_dict()
    payload["seconds"] = round(report.elapsed, 3)
    payload["mbit_per_s"] = mbit(report.throughput)
    lines = [f"{report.direction}: {payload['files_ok']} files ok, {payload['files_failed']} failed, "
             f"{report.bytes_moved} bytes in {payload['seconds']} s, {payload['mbit_per_s']} Mbit/s "
             f"(m={report.m}, n={report.n})"]
    _emit(args, payload, lines)


def _pathm(args, text):
    from .pathm import PathClient

    url = _remote(text)
    return url, PathClient.connect(url.endpoint, resolve_security(args, url.user), timeout=args.timeout)


def cmd_ls(args) -> int:
    url, pc = _pathm(args, args.url)
    with pc:
        entries = pc.listdir(url.path)
    payload = {"path": url.path, "entries": [{"name": e.name, "kind": e.kind.name.lower(), "size": e.size}
                                             for e in entries]}
    lines = [f"{'d' if e.kind.name == 'DIRECTORY' else '-'} {e.size:>12} {e.name}" for e in entries]
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_mkdir(args) -> int:
    url, pc = _pathm(args, args.url)
    with pc:
        pc.mkdir(url.path)
    _emit(args, {"created": url.path}, [])
    return EXIT_OK


def cmd_rm(args) -> int:
    url, pc = _pathm(args, args.url)
    with pc:
        if args.dir:
            pc.rmdir(url.path)
        else:
            pc.delete_file(url.path)
    _emit(args, {"removed": url.path}, [])
    return EXIT_OK


def loopback_baseline(nbytes: int, chunk: int = 256 * 1024) -> float:
    """Raw TCP throughput over a loopback socket pair (bytes/s)."""
    a, b = socket.socketpair()
    buf = bytes(chunk)

    def drain():
        left = nbytes
        while left > 0:
            left -= len(b.recv(min(chunk, left)))

    t = threading.Thread(target=drain, daemon=True)
    started = time.perf_counter()
    t.start()
    left = nbytes
    while left > 0:
        n = min(chunk, left)
        a.sendall(buf[:n])
        left -= n
    t.join()
    elapsed = time.perf_counter() - started
    a.close()
    b.close()
    return nbytes / elapsed if elapsed > 0 else 0.0


def cmd_bench(args) -> int:
    from . import client

    url = _remote(args.url)
    security = resolve_security(args, url.user)
    with client.FtsmSession(url.endpoint, security, args.streams, args.window, args.block, args.timeout) as s:
        if args.mem:
            report = (s.upload_memory(args.bytes) if args.direction == "upload"
                      else s.download_memory(args.bytes))
        else:
            with tempfile.TemporaryDirectory() as tmp:
                local = Path(tmp) / "bench.bin"
                with open(local, "wb") as fh:
                    fh.truncate(args.bytes)
                remote = url.path + "dotdfs-bench.bin" if url.path.endswith("/") else url.path
                report = (s.upload(local, remote) if args.direction == "upload" else s.download(remote, local))
    payload = _transfer_payload(report)
    baseline = loopback_baseline(min(args.bytes, 256 << 20)) if args.baseline else None
    lines = _transfer_lines(payload)
    if baseline:
        payload["baseline_mbit_per_s"] = mbit(baseline)
        payload["utilization"] = round(report.throughput / baseline, 3)
        lines.append(f"loopback baseline {payload['baseline_mbit_per_s']} Mbit/s, "
                     f"utilization {payload['utilization']}")
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_model(args) -> int:
    if args.model_cmd in ("eq1", "eq3"):
        params = wanmodel.ThroughputParams(args.mss, args.rtt, args.p, args.c, args.n if args.model_cmd == "eq3" else 1)
        bw = wanmodel.single_stream_bw(params) if args.model_cmd == "eq1" else wanmodel.parallel_bw(params)
        payload = {"model": args.model_cmd, "mss": args.mss, "rtt": args.rtt, "c": args.c, "p": args.p,
                   "n": params.n, "bw_bytes_per_s": bw, "mbit_per_s": mbit(bw)}
        _emit(args, payload, [f"{bw:.6f} B/s ({payload['mbit_per_s']} Mbit/s)"])
        return EXIT_OK
    samples = wanmodel.load_samples(args.csv)
    surface = wanmodel.fit_surface(samples)
    payload = {"model": "fit", "samples": len(samples), "grid": [len(surface.ns), len(surface.windows)]}
    lines = [f"fitted {len(surface.ns)}x{len(surface.windows)} grid from {len(samples)} samples"]
    if args.export:
        wanmodel.export_surface(surface, args.export, args.resolution)
        payload["export"] = str(args.export)
    if args.recommend:
        rec = wanmodel.recommend(surface)
        payload.update({"n": rec.n, "window": rec.window, "bw_bytes_per_s": rec.bw, "mbit_per_s": mbit(rec.bw)})
        lines.append(f"recommend n={rec.n:.4g} window={rec.window:.0f} -> {payload['mbit_per_s']} Mbit/s")
    _emit(args, payload, lines)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dotdfs", description="Parallel-stream file transfer client and server.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    auth = argparse.ArgumentParser(add_help=False)
    auth.add_argument("--user", help=f"user name (else the URL's user@, ${USER_ENV}, or the login name)")
    auth.add_argument("--password-file", help="read the password from this file")
    auth.add_argument("--password-env", default=PASSWORD_ENV, help="environment variable holding the password")
    auth.add_argument("--suite", choices=sorted(dotsec.SUITES_BY_NAME), default="aes256-sha256")
    auth.add_argument("--protection", choices=("auto", "semi", "encrypted"), default="auto",
                      help="semi: control encrypted, bulk data in plaintext")
    auth.add_argument("--timeout", type=float, default=30.0)
    auth.add_argument("--json", action="store_true", help="print a machine-readable report")

    tuning = argparse.ArgumentParser(add_help=False)
    tuning.add_argument("-n", "--streams", type=int, default=1, help="parallel TCP streams")
    tuning.add_argument("-w", "--window", type=parse_size, default=DEFAULT_WINDOW, help="TCP buffer size")
    tuning.add_argument("-b", "--block", type=parse_size, default=wire.DEFAULT_BLOCK, help="frame payload size")

    p = sub.add_parser("serve", help="run the server")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--root")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--keypair", help="PEM RSA private key")
    p.add_argument("--credentials", help="credential file")
    p.add_argument("--session-cap", type=int)
    p.add_argument("--wlm-timeout", type=float)
    p.add_argument("--grace", type=float)
    p.add_argument("--log-level")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("keygen", help="write a new RSA-2048 server key")
    p.add_argument("path")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("adduser", parents=[auth], help="add or update a user in a credential file")
    p.add_argument("credentials")
    p.add_argument("username")
    p.add_argument("--perms", default="rw", help="subset of 'rw'")
    p.set_defaults(func=cmd_adduser)

    p = sub.add_parser("cp", parents=[auth, tuning], help="copy one file to or from a server")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--range", type=parse_range, metavar="OFFSET:LENGTH")
    p.add_argument("--verify", action="store_true", help="compare checksums after the copy")
    p.set_defaults(func=cmd_cp)

    p = sub.add_parser("cpdir", parents=[auth, tuning], help="copy a directory tree")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("-m", "--channels", type=int, default=4, help="PathM channels for small files")
    p.add_argument("--manifest", help="write a per-file JSON-lines manifest")
    p.set_defaults(func=cmd_cpdir)

    for name, func, helptext in (("ls", cmd_ls, "list a remote directory"),
                                 ("mkdir", cmd_mkdir, "create a remote directory"),
                                 ("rm", cmd_rm, "delete a remote file")):
        p = sub.add_parser(name, parents=[auth], help=helptext)
        p.add_argument("url")
        if name == "rm":
            p.add_argument("--dir", action="store_true", help="remove an empty directory")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", parents=[auth, tuning], help="measure transfer throughput")
    p.add_argument("url")
    p.add_argument("--bytes", type=parse_size, default=1 << 30)
    p.add_argument("--mem", action="store_true", help="memory to memory: no disk on either side")
    p.add_argument("--direction", choices=("upload", "download"), default="upload")
    p.add_argument("--no-baseline", dest="baseline", action="store_false")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("model", help="throughput model and (n, W) tuning")
    msub = p.add_subparsers(dest="model_cmd", required=True)
    for name in ("eq1", "eq3"):
        q = msub.add_parser(name, help="single stream" if name == "eq1" else "n identical streams")
        q.add_argument("--mss", type=float, required=True)
        q.add_argument("--rtt", type=float, required=True, help="seconds")
        q.add_argument("--p", type=float, required=True, help="loss ratio")
        q.add_argument("--c", type=float, default=wanmodel.C_DELAYED_ACK,
                       help=f"{wanmodel.C_DELAYED_ACK} delayed ACK, {wanmodel.C_EVERY_ACK} every segment")
        q.add_argument("--n", type=int, default=1)
        q.add_argument("--json", action="store_true")
    q = msub.add_parser("fit", help="fit a surface to n,window_bytes,bw_bytes_per_s samples")
    q.add_argument("csv")
    q.add_argument("--recommend", action="store_true")
    q.add_argument("--export", help="write the fitted grid as CSV")
    q.add_argument("--resolution", type=int, help="resample the export on a square grid")
    q.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_model)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except AuthFailed as exc:
        print(f"dotdfs: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except (UsageError, BindFailed, ConfigError, argparse.ArgumentTypeError, wanmodel.DomainError,
            wanmodel.DegenerateGrid) as exc:
        print(f"dotdfs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DotDfsError, OSError) as exc:
        print(f"dotdfs: {exc}", file=sys.stderr)
        return EXIT_TRANSFER


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
