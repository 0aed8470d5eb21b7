"""Coordinator: ships encrypted slabs to workers and rebuilds the label volume."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..chunks import MIN_ITERATIONS, ChunkCipher, KeyRing, SessionSecret, apply_order, decrypt_chunk, make_grid, permute_order, reassemble, split_slice
from ..errors import (
    AuthenticationError,
    ConnectionFailure,
    DistributedRunError,
    MalformedPayload,
    ProtocolError,
    RemoteError,
    UnexpectedMessage,
    VsgError,
)
from ..phantom import Volume
from .jobs import MAX_KDF_ITERATIONS, MAX_RETRIES, JobHeader, JobState, JobStatus, SlabJob, WorkPlan, canonical_index, context_for
from .protocol import VERSION, Message, MsgType, read_frame, require, write_frame

log = logging.getLogger(__name__)


def _read(channel, *types: MsgType) -> Message:
    msg = read_frame(channel)
    if msg is None:
        raise ConnectionFailure("worker closed the connection")
    if msg.msg_type == MsgType.ERROR:
        raise RemoteError(str(msg.body.get("code", "?")), str(msg.body.get("message", "")))
    if msg.msg_type not in types:
        raise UnexpectedMessage(f"expected {'/'.join(t.name for t in types)}, got {msg.msg_type.name}")
    return msg


def _raise_pending_error(channel) -> None:
    """After a failed send, surface an ERROR frame the worker may have left."""
    try:
        channel.settimeout(1.0)
        msg = read_frame(channel)
    except (VsgError, OSError):
        return
    if msg is not None and msg.msg_type == MsgType.ERROR:
        raise RemoteError(str(msg.body.get("code", "?")), str(msg.body.get("message", "")))


def handshake(channel) -> dict:
    write_frame(channel, Message.hello(capabilities=["aes-256-gcm"]))
    reply = _read(channel, MsgType.HELLO)
    if reply.body.get("version") != VERSION or not reply.body.get("ack"):
        raise ProtocolError(f"bad HELLO reply {reply.body!r}")
    return reply.body


def send_job(channel, volume: Volume, job: SlabJob, attempt: int, cipher: ChunkCipher) -> JobHeader:
    """Stream JOB_HEADER, the slab's encrypted chunks in keyed order, JOB_END."""
    nx, ny, _ = volume.dims
    z0, z1 = job.z_range
    grid = make_grid((ny, nx), job.k)
    chunks = []
    for z in range(z0, z1):
        chunks.extend(split_slice(volume.data[z], grid, z))
    header = JobHeader(job.job_id, attempt, (z0, z1), (nx, ny, z1 - z0), volume.spacing.as_tuple(),
                       job.quant, job.seg, job.k, len(chunks), cipher.secret.iterations)
    write_frame(channel, Message(MsgType.JOB_HEADER, header.to_json()))
    ctx = context_for("vol", job.job_id, attempt)
    for ch in apply_order(chunks, permute_order(len(chunks), cipher.secret)):
        write_frame(channel, Message(MsgType.CHUNK, cipher.encrypt(ch, context=ctx)))
    write_frame(channel, Message(MsgType.JOB_END, {"job_id": job.job_id, "attempt": attempt}))
    return header


def receive_result(channel, header: JobHeader, keyring: KeyRing) -> np.ndarray:
    """Read RESULT_* frames for ``header`` and return the decrypted label slab."""
    head = _read(channel, MsgType.RESULT_HEADER).body
    if require(head, "job_id", str) != header.job_id or require(head, "attempt", int) != header.attempt:
        raise MalformedPayload("result belongs to another job or a superseded attempt")
    if require(head, "chunk_count", int) != header.chunk_count:
        raise MalformedPayload("result chunk count mismatch")
    iters = require(head, "kdf_iterations", int)
    if not MIN_ITERATIONS <= iters <= MAX_KDF_ITERATIONS:
        raise MalformedPayload(f"result kdf_iterations {iters} out of range")
    nx, ny, nz = header.dims
    z0 = header.z_range[0]
    k = header.k
    grid = make_grid((ny, nx), k)
    ctx = context_for("lab", header.job_id, header.attempt)
    per_slice: list[list] = [[] for _ in range(nz)]
    secret = perm = None
    for pos in range(header.chunk_count):
        ec = _read(channel, MsgType.RESULT_CHUNK).body
        if secret is None:
            secret = keyring.for_salt(ec.salt, iters)
            perm = permute_order(header.chunk_count, secret)
        plain = decrypt_chunk(ec, secret, ctx)
        cid = plain.chunk_id
        zl = cid.slice_index - z0
        if not (0 <= zl < nz and cid.row < k and cid.col < k):
            raise MalformedPayload(f"result chunk {cid} outside job {header.job_id}")
        if canonical_index(zl, cid.row, cid.col, k) != perm[pos]:
            raise MalformedPayload(f"result chunk {cid} out of the agreed order")
        per_slice[zl].append(plain)
    end = _read(channel, MsgType.RESULT_END).body
    if end.get("job_id") != header.job_id or end.get("attempt") != header.attempt:
        raise MalformedPayload("RESULT_END does not match the job")
    out = np.empty((nz, ny, nx), dtype=np.uint8)
    for zl in range(nz):
        out[zl] = reassemble(per_slice[zl], grid, np.uint8)
    return out


class Coordinator:
    """Runs a work plan: one task per job, retries on other workers on failure."""

    def __init__(self, volume: Volume, plan: WorkPlan, secret: SessionSecret, transport,
                 max_retries: int = MAX_RETRIES, timeout_s: float | None = None):
        self.volume = volume
        self.plan = plan
        self.secret = secret
        self.transport = transport
        self.max_retries = max_retries
        self.timeout_s = timeout_s
        self.keyring = KeyRing(secret.password, secret.iterations)
        self.cipher = ChunkCipher(secret)
        self.states = {j.job_id: JobState(j.job_id, endpoint=j.endpoint) for j in plan.jobs}
        endpoints = list(plan.endpoints) or [j.endpoint for j in plan.jobs if j.endpoint]
        self.load = {ep: 0 for ep in endpoints}
        self._lock = threading.Lock()

    def _least_loaded(self, avoid: str | None) -> str:
        with self._lock:
            choices = [ep for ep in self.load if ep != avoid] or list(self.load)
            # stable: first endpoint wins ties
            return min(choices, key=lambda ep: self.load[ep])

    def _attempt(self, job: SlabJob, attempt: int, endpoint: str) -> np.ndarray:
        state = self.states[job.job_id]
        timeout = self.timeout_s if self.timeout_s is not None else job.timeout_s
        channel = self.transport.connect(endpoint)
        try:
            channel.settimeout(timeout)
            state.deadline = time.monotonic() + timeout
            handshake(channel)
            try:
                header = send_job(channel, self.volume, job, attempt, self.cipher)
            except (ConnectionFailure, TimeoutError):
                _raise_pending_error(channel)
                raise
            state.status = JobStatus.SENT
            labels = receive_result(channel, header, self.keyring)
            return labels
        finally:
            channel.close()

    def _run_job(self, job: SlabJob) -> np.ndarray | None:
        state = self.states[job.job_id]
        endpoint = job.endpoint or self._least_loaded(None)
        attempt = 0
        while True:
            state.attempt = attempt
            state.endpoint = endpoint
            state.history.append(endpoint)
            with self._lock:
                self.load[endpoint] = self.load.get(endpoint, 0) + 1
            try:
                labels = self._attempt(job, attempt, endpoint)
                state.status = JobStatus.DONE
                return labels
            except AuthenticationError as exc:
                state.status, state.error = JobStatus.FAILED, f"auth: {exc}"
                return None
            except RemoteError as exc:
                if exc.code == "auth":
                    state.status, state.error = JobStatus.FAILED, f"auth: {exc}"
                    return None
                err = exc
            except (ConnectionFailure, TimeoutError, ProtocolError, OSError) as exc:
                err = exc
            finally:
                with self._lock:
                    self.load[endpoint] -= 1
            log.warning("job %s attempt %d on %s failed: %s", job.job_id, attempt, endpoint, err)
            state.error = f"{type(err).__name__}: {err}"
            if attempt >= self.max_retries:
                state.status = JobStatus.FAILED
                return None
            state.status = JobStatus.REASSIGNED
            attempt += 1
            endpoint = self._least_loaded(endpoint)

    def run(self) -> Volume:
        nx, ny, nz = self.volume.dims
        if self.plan.dims != (nx, ny, nz):
            raise ProtocolError(f"plan dims {self.plan.dims} do not match volume {self.volume.dims}")
        out = np.zeros((nz, ny, nx), dtype=np.uint8)
        jobs = list(self.plan.jobs)
        with ThreadPoolExecutor(max_workers=max(1, len(jobs))) as pool:
            results = list(pool.map(self._run_job, jobs))
        # single writer: slabs land here only after every job task returned
        for job, labels in zip(jobs, results):
            if labels is not None:
                out[job.z_range[0]:job.z_range[1]] = labels
        failed = [s for s in self.states.values() if s.status != JobStatus.DONE]
        if failed:
            report = self.report()
            err = DistributedRunError(f"{len(failed)} of {len(jobs)} jobs failed", report)
            err.partial = Volume(out, self.volume.spacing)
            auth = any((s.error or "").startswith("auth") for s in failed)
            if auth:
                err.code = "auth"
            raise err
        return Volume(out, self.volume.spacing)

    def report(self) -> dict:
        return {
            "volume_digest": self.plan.volume_digest,
            "jobs": [s.to_json() for s in self.states.values()],
            "completed_z_ranges": [list(j.z_range) for j in self.plan.jobs
                                   if self.states[j.job_id].status == JobStatus.DONE],
        }


def coordinator_run(volume: Volume, plan: WorkPlan, secret: SessionSecret, transport,
                    max_retries: int = MAX_RETRIES, timeout_s: float | None = None) -> Volume:
    return Coordinator(volume, plan, secret, transport, max_retries, timeout_s).run()
