"""Random DFSM op programs, replayed against a remote handle and a local file."""

import os
import random

from dotdfs.dfsm import FileAccess, FileMode, Whence

OPS = ("write", "read", "seek", "truncate", "flush")


def make_program(rng: random.Random, length: int = 12) -> list[tuple]:
    prog = []
    for _ in range(rng.randint(1, length)):
        op = rng.choice(OPS)
        if op == "write":
            prog.append(("write", rng.randbytes(rng.randint(0, 300))))
        elif op == "read":
            prog.append(("read", rng.randint(0, 400)))
        elif op == "seek":
            whence = rng.choice(list(Whence))
            offset = rng.randint(0, 500) if whence == Whence.BEGIN else rng.randint(-50, 200)
            prog.append(("seek", offset, whence))
        elif op == "truncate":
            prog.append(("truncate", rng.randint(0, 600)))
        else:
            prog.append(("flush",))
    return prog


def run_local(path, prog, initial: bytes) -> tuple[bytes, list]:
    with open(path, "wb") as fh:
        fh.write(initial)
    outputs = []
    with open(path, "r+b", buffering=0) as fh:
        for step in prog:
            outputs.append(_apply(fh, step, local=True))
    with open(path, "rb") as fh:
        return fh.read(), outputs


def run_remote(client, remote_path, prog) -> list:
    handle = client.open(remote_path, FileMode.OPEN, FileAccess.READ_WRITE)
    try:
        return [_apply(handle, step, local=False) for step in prog]
    finally:
        handle.close()


def _apply(fh, step, local):
    op = step[0]
    if op == "write":
        fh.write(step[1])
        return fh.tell()
    if op == "read":
        return fh.read(step[1]) if step[1] else b""
    if op == "seek":
        offset, whence = step[1], step[2]
        target = {Whence.BEGIN: 0, Whence.CURRENT: fh.tell(), Whence.END: None}[whence]
        if target is None:
            target = os.fstat(fh.fileno()).st_size if local else None
        if target is not None and target + offset < 0:
            return "invalid"
        try:
            return fh.seek(offset, int(whence))
        except (OSError, ValueError):
            return "invalid"
        except Exception as exc:  # remote InvalidOffset
            return "invalid" if type(exc).__name__ == "InvalidOffset" else repr(exc)
    if op == "truncate":
        if local:
            fh.truncate(step[1])
        else:
            fh.set_length(step[1])
        return None
    fh.flush()
    return None
