"""Worker side: decrypt a slab, segment it, return encrypted labels."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

import numpy as np

from ..chunks import ChunkCipher, KeyRing, decrypt_chunk, make_grid, permute_order, reassemble, split_slice
from ..errors import (
    AssemblyError,
    AuthenticationError,
    ConnectionFailure,
    MalformedPayload,
    NumericError,
    ProtocolError,
    UnexpectedMessage,
    VsgError,
)
from ..hmm import segment_slab
from .jobs import JobHeader, canonical_index, context_for
from .protocol import VERSION, Message, MsgType, read_frame, write_frame
from .transport import SocketChannel, TlsConfig, parse_endpoint

log = logging.getLogger(__name__)

CAPABILITIES = ["aes-256-gcm", "pbkdf2-sha256", "hmm-discrete"]


def _expect(msg: Message | None, *types: MsgType) -> Message:
    if msg is None:
        raise UnexpectedMessage(f"stream ended while waiting for {types[0].name}")
    if msg.msg_type not in types:
        raise UnexpectedMessage(f"expected {'/'.join(t.name for t in types)}, got {msg.msg_type.name}")
    return msg


def _receive_slab(channel, job: JobHeader, keyring: KeyRing) -> np.ndarray:
    """Collect, authenticate, order-check and reassemble a job's chunks."""
    nx, ny, nz = job.dims
    z0 = job.z_range[0]
    k = job.k
    grid = make_grid((ny, nx), k)
    ctx = context_for("vol", job.job_id, job.attempt)
    secret = None
    perm = None
    per_slice: list[list] = [[] for _ in range(nz)]
    for pos in range(job.chunk_count):
        msg = _expect(read_frame(channel), MsgType.CHUNK)
        ec = msg.body
        if secret is None:
            secret = keyring.for_salt(ec.salt, job.kdf_iterations)
            perm = permute_order(job.chunk_count, secret)
        plain = decrypt_chunk(ec, secret, ctx)
        cid = plain.chunk_id
        zl = cid.slice_index - z0
        if not (0 <= zl < nz and cid.row < k and cid.col < k):
            raise AssemblyError(f"chunk {cid} does not belong to job {job.job_id}")
        if canonical_index(zl, cid.row, cid.col, k) != perm[pos]:
            raise AssemblyError(f"chunk {cid} arrived out of the agreed order")
        per_slice[zl].append(plain)
    end = _expect(read_frame(channel), MsgType.JOB_END)
    if end.body.get("job_id") != job.job_id:
        raise MalformedPayload("JOB_END names a different job")
    slab = np.empty((nz, ny, nx), dtype="<u2")
    for zl in range(nz):
        slab[zl] = reassemble(per_slice[zl], grid, "<u2")
    return slab


def _send_labels(channel, job: JobHeader, labels: np.ndarray, cipher: ChunkCipher) -> None:
    nx, ny, nz = job.dims
    grid = make_grid((ny, nx), job.k)
    ctx = context_for("lab", job.job_id, job.attempt)
    chunks = []
    for zl in range(nz):
        chunks.extend(split_slice(labels[zl], grid, job.z_range[0] + zl))
    perm = permute_order(len(chunks), cipher.secret)
    write_frame(channel, Message(MsgType.RESULT_HEADER, {
        "job_id": job.job_id, "attempt": job.attempt, "z_range": list(job.z_range),
        "k": job.k, "chunk_count": len(chunks), "kdf_iterations": cipher.secret.iterations,
    }))
    for idx in perm:
        write_frame(channel, Message(MsgType.RESULT_CHUNK, cipher.encrypt(chunks[idx], context=ctx)))
    write_frame(channel, Message(MsgType.RESULT_END, {"job_id": job.job_id, "attempt": job.attempt}))


def serve_connection(channel, keyring: KeyRing, segmenter=segment_slab) -> VsgError | None:
    """Run the worker protocol on one connection until the peer hangs up.

    Returns the error that ended the connection (after an ERROR frame has
    been sent to the peer), or ``None`` on a clean close.
    """
    cipher: ChunkCipher | None = None
    try:
        hello = _expect(read_frame(channel), MsgType.HELLO)
        if hello.body.get("version") != VERSION:
            write_frame(channel, Message.error("version", f"worker speaks version {VERSION}"))
            return ProtocolError(f"peer requested version {hello.body.get('version')!r}")
        write_frame(channel, Message.hello(ack=True, capabilities=CAPABILITIES))
        while True:
            msg = read_frame(channel)
            if msg is None:
                return None
            job = JobHeader.from_json(_expect(msg, MsgType.JOB_HEADER).body)
            slab = _receive_slab(channel, job, keyring)
            labels = segmenter(slab, job.quant, job.seg, job.z_range[0])
            if cipher is None or cipher.secret.iterations != job.kdf_iterations:
                cipher = ChunkCipher(keyring.fresh(job.kdf_iterations))
            _send_labels(channel, job, labels, cipher)
    except AuthenticationError as exc:
        return _fail(channel, "auth", exc)
    except ProtocolError as exc:
        return _fail(channel, exc.code, exc)
    except AssemblyError as exc:
        return _fail(channel, "assembly", exc)
    except NumericError as exc:
        return _fail(channel, "numeric", exc)
    except (ConnectionFailure, TimeoutError) as exc:
        log.info("connection dropped: %s", exc)
        return exc if isinstance(exc, VsgError) else ConnectionFailure(str(exc))
    except VsgError as exc:
        return _fail(channel, "error", exc)
    except Exception as exc:  # never let a peer's bytes take the worker down
        log.exception("internal worker error")
        return _fail(channel, "internal", VsgError(f"internal error: {exc!r}"))


def _fail(channel, code: str, exc: VsgError) -> VsgError:
    log.info("closing connection with ERROR %s: %s", code, exc)
    try:
        write_frame(channel, Message.error(code, str(exc)[:512]))
    except (ConnectionFailure, TimeoutError, OSError):
        pass
    return exc


class WorkerServer:
    """Threaded TCP (optionally TLS 1.3) listener running ``serve_connection``."""

    def __init__(self, endpoint: str, keyring: KeyRing, tls_config: TlsConfig | None = None,
                 segmenter=segment_slab):
        host, port = parse_endpoint(endpoint)
        self.keyring = keyring
        self.segmenter = segmenter
        self.ssl_context = tls_config.server_context() if tls_config else None
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                if outer.ssl_context is not None:
                    try:
                        sock = outer.ssl_context.wrap_socket(sock, server_side=True)
                    except OSError as exc:
                        log.info("TLS handshake failed: %s", exc)
                        return
                channel = SocketChannel(sock)
                try:
                    serve_connection(channel, outer.keyring, outer.segmenter)
                finally:
                    channel.close()

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self.server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def serve_forever(self) -> None:
        self.server.serve_forever(poll_interval=0.2)

    def start(self) -> "WorkerServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def worker_serve(endpoint: str, keyring: KeyRing, tls_config: TlsConfig | None = None) -> None:
    """Listen on ``endpoint`` until interrupted."""
    server = WorkerServer(endpoint, keyring, tls_config)
    log.info("worker listening on %s (%s)", server.endpoint, "TLS 1.3" if tls_config else "plaintext")
    try:
        server.serve_forever()
    finally:
        server.server.server_close()
