"""Work plans, slab jobs and the JSON job header exchanged with workers."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..chunks import MIN_ITERATIONS
from ..errors import ArgumentError, MalformedPayload
from ..hmm import QuantizationParams, SegConfig
from .protocol import require

MAX_JOB_VOXELS = 1 << 31
MAX_KDF_ITERATIONS = 10_000_000
JOB_TIMEOUT_BASE_S = 60.0
JOB_TIMEOUT_PER_SLICE_S = 2.0
MAX_RETRIES = 2


@dataclass(frozen=True)
class SlabJob:
    job_id: str
    endpoint: str | None
    z_range: tuple[int, int]
    quant: QuantizationParams
    seg: SegConfig
    k: int

    @property
    def n_slices(self) -> int:
        return self.z_range[1] - self.z_range[0]

    @property
    def timeout_s(self) -> float:
        return JOB_TIMEOUT_BASE_S + JOB_TIMEOUT_PER_SLICE_S * self.n_slices


@dataclass(frozen=True)
class WorkPlan:
    volume_digest: str
    dims: tuple[int, int, int]
    jobs: tuple[SlabJob, ...]
    endpoints: tuple[str, ...] = ()

    @property
    def slab_sizes(self) -> list[int]:
        return [j.n_slices for j in self.jobs]


def volume_digest(data: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr(tuple(data.shape)).encode())
    h.update(str(data.dtype).encode())
    h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def balanced_slabs(nz: int, n_workers: int) -> list[tuple[int, int]]:
    """Contiguous z ranges whose sizes differ by at most one slice."""
    if n_workers < 1:
        raise ArgumentError("need at least one worker")
    if nz < 1:
        raise ArgumentError("volume has no slices")
    n = min(nz, n_workers)
    base, extra = divmod(nz, n)
    out, z = [], 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        out.append((z, z + size))
        z += size
    return out


def plan_partition(volume_dims, n_workers, endpoints=None, quant: QuantizationParams | None = None,
                   seg: SegConfig | None = None, k: int = 4, digest: str = "") -> WorkPlan:
    """Split ``volume_dims = (nx, ny, nz)`` into one axial slab per worker.

    ``endpoints`` (one per worker) are assigned in order; surplus workers
    receive no job when the volume has fewer slices than workers.
    """
    nx, ny, nz = volume_dims
    if endpoints is not None and len(endpoints) != n_workers:
        raise ArgumentError("need exactly one endpoint per worker")
    seg = seg or SegConfig()
    quant = quant or QuantizationParams(0.0, 65535.0, seg.n_symbols)
    jobs = []
    for i, zr in enumerate(balanced_slabs(nz, n_workers)):
        ep = endpoints[i] if endpoints else None
        jobs.append(SlabJob(f"job-{i:04d}", ep, zr, quant, seg, k))
    return WorkPlan(digest, (nx, ny, nz), tuple(jobs), tuple(endpoints or ()))


class JobStatus(str, enum.Enum):
    PENDING = "pending"
    SENT = "sent"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    REASSIGNED = "reassigned"


@dataclass
class JobState:
    """Coordinator bookkeeping for one job.

    ``attempt`` is the tag of the latest try (0 for the first send), so it
    also counts the retries spent and never exceeds ``max_retries``.
    """

    job_id: str
    status: JobStatus = JobStatus.PENDING
    attempt: int = 0
    endpoint: str | None = None
    deadline: float | None = None
    history: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict:
        return {"job_id": self.job_id, "status": self.status.value, "attempt": self.attempt,
                "endpoint": self.endpoint, "error": self.error, "history": self.history}


# --- job header ----------------------------------------------------------------

@dataclass(frozen=True)
class JobHeader:
    job_id: str
    attempt: int
    z_range: tuple[int, int]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    quant: QuantizationParams
    seg: SegConfig
    k: int
    chunk_count: int
    kdf_iterations: int

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "attempt": self.attempt,
            "z_range": list(self.z_range),
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "quant": self.quant.to_json(),
            "seg": self.seg.to_json(),
            "k": self.k,
            "chunk_count": self.chunk_count,
            "kdf_iterations": self.kdf_iterations,
        }

    @classmethod
    def from_json(cls, body: dict) -> "JobHeader":
        """Parse and sanity-check a JOB_HEADER body; any defect is a payload error."""
        where = "JOB_HEADER"
        job_id = require(body, "job_id", str, where)
        attempt = require(body, "attempt", int, where)
        z_range = require(body, "z_range", list, where)
        dims = require(body, "dims", list, where)
        spacing = require(body, "spacing", list, where)
        k = require(body, "k", int, where)
        chunk_count = require(body, "chunk_count", int, where)
        iters = require(body, "kdf_iterations", int, where)
        quant = require(body, "quant", dict, where)
        seg = require(body, "seg", dict, where)
        ints = lambda xs: all(isinstance(x, int) and not isinstance(x, bool) for x in xs)
        if len(z_range) != 2 or not ints(z_range) or len(dims) != 3 or not ints(dims):
            raise MalformedPayload("z_range/dims must be integer lists")
        if len(spacing) != 3 or not all(isinstance(s, (int, float)) and s > 0 for s in spacing):
            raise MalformedPayload("spacing must be three positive numbers")
        z0, z1 = z_range
        nx, ny, nz = dims
        if not (0 <= z0 < z1 < 1 << 32) or nz != z1 - z0:
            raise MalformedPayload(f"inconsistent z_range {z_range} for dims {dims}")
        if not 1 <= k <= min(nx, ny, 0xFFFF) or min(nx, ny) > 0xFFFF:
            raise MalformedPayload(f"grid order {k} does not fit a {nx}x{ny} slice")
        if nx * ny * nz > MAX_JOB_VOXELS:
            raise MalformedPayload("job too large")
        if chunk_count != nz * k * k:
            raise MalformedPayload(f"chunk_count {chunk_count} != {nz}*{k}^2")
        if not MIN_ITERATIONS <= iters <= MAX_KDF_ITERATIONS:
            raise MalformedPayload(f"kdf_iterations {iters} out of range")
        if attempt < 0:
            raise MalformedPayload("attempt must be >= 0")
        try:
            q = QuantizationParams.from_json(quant)
            s = SegConfig.from_json(seg)
        except (KeyError, TypeError, ValueError, ArgumentError) as exc:
            raise MalformedPayload(f"bad quant/seg config: {exc}") from None
        return cls(job_id, attempt, (z0, z1), (nx, ny, nz), tuple(float(v) for v in spacing),
                   q, s, k, chunk_count, iters)


def context_for(kind: str, job_id: str, attempt: int) -> bytes:
    """Associated-data prefix binding a chunk to its direction, job and attempt."""
    return f"vsg/{kind}|{job_id}|{attempt}|".encode()


def canonical_index(z_local: int, row: int, col: int, k: int) -> int:
    return z_local * k * k + row * k + col
