"""Byte channels: TCP, TLS 1.3 over TCP, and an in-process loopback."""

from __future__ import annotations

import logging
import socket
import ssl
import threading
from dataclasses import dataclass
from typing import Callable

from ..errors import ArgumentError, ConnectionFailure, TruncatedFrame

log = logging.getLogger(__name__)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ArgumentError(f"endpoint must look like host:port, got {endpoint!r}")
    return host.strip("[]"), int(port)


@dataclass(frozen=True)
class TlsConfig:
    """Certificate material for one side of a TLS 1.3 connection.

    Clients need ``ca_file``; servers need ``cert_file`` and ``key_file``.
    Setting both on either side turns on mutual authentication.
    """

    ca_file: str | None = None
    cert_file: str | None = None
    key_file: str | None = None
    server_hostname: str | None = None

    def client_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_3
        ctx.maximum_version = ssl.TLSVersion.TLSv1_3
        if self.ca_file is None:
            raise ArgumentError("TLS client needs a trust root (ca_file)")
        ctx.load_verify_locations(self.ca_file)
        if self.cert_file:
            ctx.load_cert_chain(self.cert_file, self.key_file)
        return ctx

    def server_context(self) -> ssl.SSLContext:
        if not (self.cert_file and self.key_file):
            raise ArgumentError("TLS server needs cert_file and key_file")
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_3
        ctx.maximum_version = ssl.TLSVersion.TLSv1_3
        ctx.load_cert_chain(self.cert_file, self.key_file)
        if self.ca_file:
            ctx.load_verify_locations(self.ca_file)
            ctx.verify_mode = ssl.CERT_REQUIRED
        return ctx


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._closed = False

    @property
    def tls_version(self) -> str | None:
        return self.sock.version() if isinstance(self.sock, ssl.SSLSocket) else None

    def settimeout(self, seconds: float | None) -> None:
        self.sock.settimeout(seconds)

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except socket.timeout as exc:
            raise TimeoutError("send timed out") from exc
        except OSError as exc:
            raise ConnectionFailure(f"send failed: {exc}") from exc

    def recv_exact(self, n: int, allow_eof: bool = False) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                part = self.sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout as exc:
                raise TimeoutError("receive timed out") from exc
            except OSError as exc:
                raise ConnectionFailure(f"receive failed: {exc}") from exc
            if not part:
                if allow_eof and not buf:
                    return None
                raise TruncatedFrame(f"stream ended after {len(buf)} of {n} bytes")
            buf += part
        return bytes(buf)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def transport_connect(endpoint: str, tls: bool = False, tls_config: TlsConfig | None = None,
                      timeout: float | None = 30.0) -> SocketChannel:
    host, port = parse_endpoint(endpoint)
    try:
        raw = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectionFailure(f"cannot reach {endpoint}: {exc}") from exc
    raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if not tls:
        log.warning("connection to %s is plaintext TCP (test mode)", endpoint)
        return SocketChannel(raw)
    cfg = tls_config or TlsConfig()
    try:
        sock = cfg.client_context().wrap_socket(raw, server_hostname=cfg.server_hostname or host)
    except (ssl.SSLError, ssl.CertificateError, OSError) as exc:
        raw.close()
        raise ConnectionFailure(f"TLS handshake with {endpoint} failed: {exc}") from exc
    return SocketChannel(sock)


class TcpTransport:
    """Connect-by-endpoint factory over TCP, optionally TLS 1.3."""

    def __init__(self, tls: bool = False, tls_config: TlsConfig | None = None,
                 timeout: float | None = 30.0):
        self.tls = tls
        self.tls_config = tls_config
        self.timeout = timeout

    def connect(self, endpoint: str) -> SocketChannel:
        return transport_connect(endpoint, self.tls, self.tls_config, self.timeout)


# --- loopback ------------------------------------------------------------------

class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()

    def write(self, data: bytes) -> None:
        with self.cond:
            if self.closed:
                raise ConnectionFailure("loopback peer closed")
            self.buf += data
            self.cond.notify_all()

    def read_exact(self, n: int, allow_eof: bool, timeout: float | None) -> bytes | None:
        with self.cond:
            ok = self.cond.wait_for(lambda: len(self.buf) >= n or self.closed, timeout)
            if not ok:
                raise TimeoutError("loopback receive timed out")
            if len(self.buf) < n:
                if allow_eof and not self.buf:
                    return None
                raise TruncatedFrame(f"stream ended after {len(self.buf)} of {n} bytes")
            out = bytes(self.buf[:n])
            del self.buf[:n]
            return out

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class LoopbackChannel:
    def __init__(self, inbound: _Pipe, outbound: _Pipe):
        self.inbound = inbound
        self.outbound = outbound
        self.timeout: float | None = None
        self.tls_version = None

    @classmethod
    def pair(cls) -> tuple["LoopbackChannel", "LoopbackChannel"]:
        a, b = _Pipe(), _Pipe()
        return cls(a, b), cls(b, a)

    def settimeout(self, seconds: float | None) -> None:
        self.timeout = seconds

    def send(self, data: bytes) -> None:
        self.outbound.write(data)

    def recv_exact(self, n: int, allow_eof: bool = False) -> bytes | None:
        return self.inbound.read_exact(n, allow_eof, self.timeout)

    def close(self) -> None:
        self.outbound.close()
        self.inbound.close()


class LoopbackNetwork:
    """In-process stand-in for TCP: endpoints map to connection handlers.

    Each ``connect`` runs the endpoint's handler on a fresh daemon thread with
    the server end of a new channel pair.  ``taps`` receive every byte sent
    in either direction, which lets tests scan transcripts.
    """

    def __init__(self):
        self.handlers: dict[str, Callable] = {}
        self.threads: list[threading.Thread] = []
        self.taps: list[Callable[[str, bytes], None]] = []

    def register(self, endpoint: str, handler: Callable) -> None:
        self.handlers[endpoint] = handler

    def connect(self, endpoint: str) -> LoopbackChannel:
        handler = self.handlers.get(endpoint)
        if handler is None:
            raise ConnectionFailure(f"no loopback endpoint {endpoint!r}")
        client, server = LoopbackChannel.pair()
        if self.taps:
            client = _TappedChannel(client, "up", self.taps)
            server = _TappedChannel(server, "down", self.taps)

        def run():
            try:
                handler(server)
            finally:
                server.close()

        t = threading.Thread(target=run, name=f"loopback-{endpoint}", daemon=True)
        t.start()
        self.threads.append(t)
        return client

    def join(self, timeout: float | None = None) -> None:
        for t in self.threads:
            t.join(timeout)


class _TappedChannel:
    def __init__(self, inner, direction: str, taps):
        self.inner = inner
        self.direction = direction
        self.taps = taps
        self.tls_version = None

    def settimeout(self, seconds):
        self.inner.settimeout(seconds)

    def send(self, data: bytes) -> None:
        for tap in self.taps:
            tap(self.direction, data)
        self.inner.send(data)

    def recv_exact(self, n, allow_eof=False):
        return self.inner.recv_exact(n, allow_eof)

    def close(self):
        self.inner.close()
