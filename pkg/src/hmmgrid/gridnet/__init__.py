"""Coordinator/worker distribution over a framed, encrypted wire protocol."""

from .coordinator import Coordinator, coordinator_run
from .jobs import JobHeader, JobState, JobStatus, SlabJob, WorkPlan, plan_partition, volume_digest
from .protocol import MAGIC, MAX_PAYLOAD, Message, MsgType, frame_decode, frame_encode
from .transport import LoopbackNetwork, TcpTransport, TlsConfig, transport_connect
from .worker import WorkerServer, serve_connection, worker_serve

__all__ = [
    "Coordinator", "coordinator_run", "JobHeader", "JobState", "JobStatus", "SlabJob", "WorkPlan",
    "plan_partition", "volume_digest", "MAGIC", "MAX_PAYLOAD", "Message", "MsgType",
    "frame_decode", "frame_encode", "LoopbackNetwork", "TcpTransport", "TlsConfig",
    "transport_connect", "WorkerServer", "serve_connection", "worker_serve",
]
