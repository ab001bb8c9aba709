"""The hex vectors in docs/ must match what the codecs produce."""

import re
from pathlib import Path

import pytest

from dotdfs import dotsec, pathm, wire
from dotdfs.wire import Direction, SessionParams, TransferFrame

DOCS = Path(__file__).resolve().parent.parent / "docs"
GUID = bytes(range(16))


def _flat(text: str) -> str:
    return re.sub(r"\s+", " ", text.replace("`", " "))


def _hex(data: bytes) -> str:
    return data.hex(" ")


def _varuints(*values):
    return b"".join(wire.encode_varuint(v) for v in values)


VECTORS = {
    "wire.md": [
        *(wire.encode_varuint(v) for v in (0, 1, 255, 256, 300, 65535, 65536, 2**32 - 1, 2**64 - 1)),
        wire.encode_frame(TransferFrame(0, b"abc")),
        wire.encode_frame_header(65536, 256),
        wire.SENTINEL,
        wire.encode_error_frame("busy"),
        wire.encode_status(0),
        wire.encode_status(1, "nope"),
        SessionParams(GUID, 4, 0, Direction.UPLOAD, "/a.bin", 0, 0, 65536).encode(),
        SessionParams(GUID, 2, 8, Direction.DOWNLOAD, "/d", 1024, 300, 0).encode(),
        wire.encode_params_ack(4, 1 << 20),
        wire.DfsmMethodHeader(wire.DfsmMethod.READ, _varuints(3, 0, 4096)).encode(),
    ],
    "dfsm.md": [wire.DfsmMethodHeader(wire.DfsmMethod.READ, _varuints(3, 0, 4096)).encode()],
    "pathm.md": [
        pathm.PathOp.make(pathm.Op.RENAME, "/a", "/b").encode(),
        pathm.PathReply(0, b"\x01").encode(),
        pathm.encode_listing([pathm.DirEntry("x", pathm.Kind.FILE, 5),
                              pathm.DirEntry("d", pathm.Kind.DIRECTORY, 0)]),
    ],
    "dotsec.md": [
        dotsec.tsi_seal(b"abc", dotsec.SessionKey(bytes(range(32)), bytes(range(16))), dotsec.DEFAULT_SUITE),
        b"\x03\x01\x00\x01",
    ],
}


@pytest.mark.parametrize("doc", sorted(VECTORS))
def test_vectors_in_docs(doc):
    text = _flat((DOCS / doc).read_text())
    for vec in VECTORS[doc]:
        assert _hex(vec) in text, f"{doc} lacks {_hex(vec)}"
