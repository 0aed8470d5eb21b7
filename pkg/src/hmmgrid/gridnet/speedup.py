"""Wall-clock speedup of distributed runs against local worker processes."""

from __future__ import annotations

import multiprocessing as mp
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ..chunks import KeyRing, derive_key
from ..hmm import QuantizationParams, SegConfig
from ..phantom import Volume
from .coordinator import coordinator_run
from .jobs import plan_partition, volume_digest
from .transport import TcpTransport
from .worker import WorkerServer


def _worker_main(password: bytes, iterations: int, queue) -> None:
    server = WorkerServer("127.0.0.1:0", KeyRing(password, iterations))
    queue.put(server.endpoint)
    server.serve_forever()


@dataclass
class LocalWorkers:
    """Worker processes listening on loopback TCP ports."""

    processes: list = field(default_factory=list)
    endpoints: list[str] = field(default_factory=list)

    @classmethod
    def spawn(cls, n: int, password: bytes, iterations: int, timeout: float = 120.0) -> "LocalWorkers":
        ctx = mp.get_context("spawn")
        queue = ctx.Queue()
        self = cls()
        for _ in range(n):
            p = ctx.Process(target=_worker_main, args=(password, iterations, queue), daemon=True)
            p.start()
            self.processes.append(p)
        try:
            for _ in range(n):
                self.endpoints.append(queue.get(timeout=timeout))
        except Exception:
            self.stop()
            raise
        return self

    def stop(self) -> None:
        for p in self.processes:
            if p.is_alive():
                p.terminate()
        for p in self.processes:
            p.join(5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def measure_speedup(volume: Volume, worker_counts, repetitions: int = 3, seg: SegConfig | None = None,
                    k: int = 4, password: bytes = b"speedup", iterations: int = 100_000) -> dict:
    """Median end-to-end time per worker count and speedup relative to one worker.

    Label volumes from every run are compared against the first; the report
    records whether all of them were bit-identical.
    """
    seg = seg or SegConfig()
    counts = sorted(set(worker_counts) | {1})
    quant = QuantizationParams.from_data(volume.data, seg.n_symbols)
    digest = volume_digest(volume.data)
    secret = derive_key(password, iterations=iterations)
    transport = TcpTransport(tls=False)
    rows = []
    reference = None
    identical = True
    with LocalWorkers.spawn(max(counts), password, iterations) as workers:
        # warm-up: every worker process loads its compiled kernels once
        warm = plan_partition(volume.dims, len(workers.endpoints), workers.endpoints, quant, seg, k, digest)
        coordinator_run(volume, warm, secret, transport)
        for n in counts:
            plan = plan_partition(volume.dims, n, workers.endpoints[:n], quant, seg, k, digest)
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                labels = coordinator_run(volume, plan, secret, transport)
                samples.append(time.perf_counter() - t0)
                if reference is None:
                    reference = labels.data
                elif not np.array_equal(reference, labels.data):
                    identical = False
            rows.append({"workers": n, "median_s": statistics.median(samples), "samples_s": samples})
    t1 = rows[0]["median_s"]
    for r in rows:
        r["speedup"] = t1 / r["median_s"]
    return {
        "volume_dims": list(volume.dims),
        "cpu_count": os.cpu_count(),
        "repetitions": repetitions,
        "rows": rows,
        "identical_outputs": identical,
    }
