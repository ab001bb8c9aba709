"""DotDFS: parallel-stream file transfer with remote path and file-stream access."""

from .client import FtsmSession, TransferReport, download, upload
from .connection import Endpoint, RemoteUrl, Security
from .dotsec import Credential, CredentialStore, generate_keypair, load_keypair
from .server import DotDfsServer, ServerConfig

__version__ = "0.1.0"

__all__ = [
    "Credential", "CredentialStore", "DotDfsServer", "Endpoint", "FtsmSession", "RemoteUrl",
    "Security", "ServerConfig", "TransferReport", "download", "generate_keypair", "load_keypair",
    "upload",
]
