"""Wire protocol and TCP runtime for networked federation."""

from .codec import Ack, Assign, Bye, Join, Report, Update, decode, encode, read_frame
from .runtime import ParameterServer, ServeResult, run_client, serve

__all__ = [
    "Ack",
    "Assign",
    "Bye",
    "Join",
    "Report",
    "Update",
    "decode",
    "encode",
    "read_frame",
    "ParameterServer",
    "ServeResult",
    "run_client",
    "serve",
]
