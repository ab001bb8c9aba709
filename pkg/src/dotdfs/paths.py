"""Confinement of client-supplied paths to the server's root directory."""

from __future__ import annotations

import os
from pathlib import Path

from .errors import PathOutsideRoot


class FsRoot:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(os.path.realpath(root))
        if not self.root.is_dir():
            raise NotADirectoryError(f"root {root} is not a directory")

    def resolve(self, path: str) -> Path:
        """Map a protocol path (``/`` separated, rooted or not) into the root.

        Symlinks are resolved before the containment check, so a link that
        points outside the root is rejected like a ``..`` escape.
        """
        if "\x00" in path:
            raise PathOutsideRoot("NUL byte in path")
        rel = path.replace("\\", "/").lstrip("/")
        candidate = os.path.realpath(os.path.join(self.root, rel))
        if os.path.commonpath([candidate, self.root]) != str(self.root):
            raise PathOutsideRoot(f"{path!r} escapes the server root")
        return Path(candidate)

    def relative(self, path: Path) -> str:
        return "/" + path.relative_to(self.root).as_posix()
