"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to:
0 success, 1 usage, 2 I/O, 3 protocol/auth, 4 numeric.
"""

from __future__ import annotations


class VsgError(Exception):
    exit_code = 1


class ArgumentError(VsgError, ValueError):
    exit_code = 1


class GeometryError(VsgError, ValueError):
    exit_code = 1


class ResolutionError(GeometryError):
    pass


class FormatError(VsgError):
    exit_code = 2


class NumericError(VsgError, ArithmeticError):
    exit_code = 4


class DecodeError(NumericError):
    """No state path has non-zero probability."""


class DegenerateInputError(NumericError):
    pass


class AssemblyError(VsgError):
    exit_code = 3


class AuthenticationError(VsgError):
    exit_code = 3


class ProtocolError(VsgError):
    exit_code = 3
    code = "protocol"


class BadMagic(ProtocolError):
    code = "magic"


class BadVersion(ProtocolError):
    code = "version"


class OversizeFrame(ProtocolError):
    code = "oversize"


class TruncatedFrame(ProtocolError):
    code = "truncated"


class UnknownMessageType(ProtocolError):
    code = "msg_type"


class MalformedPayload(ProtocolError):
    code = "payload"


class UnexpectedMessage(ProtocolError):
    code = "sequence"


class NonceReuse(ProtocolError):
    code = "nonce"


class ConnectionFailure(VsgError, ConnectionError):
    exit_code = 3


class RemoteError(VsgError):
    """The peer answered with an ERROR frame."""

    exit_code = 3

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class DistributedRunError(VsgError):
    exit_code = 3

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}
