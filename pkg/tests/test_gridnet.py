import threading

import numpy as np
import pytest
from conftest import TEST_ITERATIONS, loopback_cluster
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmgrid.chunks import ChunkCipher, KeyRing
from hmmgrid.errors import (
    ArgumentError,
    AuthenticationError,
    BadVersion,
    ConnectionFailure,
    DistributedRunError,
    MalformedPayload,
)
from hmmgrid.gridnet import (
    Coordinator,
    JobHeader,
    LoopbackNetwork,
    Message,
    MsgType,
    TcpTransport,
    TlsConfig,
    WorkerServer,
    coordinator_run,
    frame_encode,
    plan_partition,
    serve_connection,
)
from hmmgrid.gridnet.coordinator import handshake, receive_result, send_job
from hmmgrid.gridnet.jobs import balanced_slabs
from hmmgrid.gridnet.protocol import frame_decode_prefix, read_frame, write_frame
from hmmgrid.gridnet.tlsutil import make_test_pki
from hmmgrid.gridnet.transport import LoopbackChannel
from hmmgrid.hmm import segment_slab
from hmmgrid.phantom import Volume


def plan_for(volume, quant, seg, endpoints, k=4):
    return plan_partition(volume.dims, len(endpoints), endpoints, quant, seg, k)


def decode_stream(buf):
    msgs = []
    while buf:
        m, used = frame_decode_prefix(buf)
        msgs.append(m)
        buf = buf[used:]
    return msgs


# --- planning ---------------------------------------------------------------------

def test_partition_hundred_over_eight():
    assert plan_partition((8, 8, 100), 8).slab_sizes == [13, 13, 13, 13, 12, 12, 12, 12]


def test_partition_one_slice_each():
    assert plan_partition((8, 8, 16), 16).slab_sizes == [1] * 16


def test_partition_surplus_workers_idle():
    plan = plan_partition((8, 8, 5), 8)
    assert len(plan.jobs) == 5
    assert plan.slab_sizes == [1] * 5


def test_partition_rejects_zero_workers():
    with pytest.raises(ArgumentError):
        plan_partition((8, 8, 5), 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 40))
def test_partition_covers_and_balances(nz, n):
    slabs = balanced_slabs(nz, n)
    assert slabs[0][0] == 0 and slabs[-1][1] == nz
    assert all(a[1] == b[0] for a, b in zip(slabs, slabs[1:]))
    sizes = [b - a for a, b in slabs]
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
    assert len(slabs) == min(nz, n)


def test_job_timeout_policy():
    job = plan_partition((8, 8, 10), 1).jobs[0]
    assert job.timeout_s == 60 + 2 * 10


def test_job_header_validation(nema2mm_quant, seg_cfg):
    good = JobHeader("j", 0, (4, 6), (16, 16, 2), (1.0, 1.0, 1.0), nema2mm_quant, seg_cfg, 4, 32,
                     TEST_ITERATIONS).to_json()
    assert JobHeader.from_json(good).chunk_count == 32
    for key, bad in [("chunk_count", 31), ("k", 0), ("z_range", [6, 4]), ("kdf_iterations", 10),
                     ("attempt", -1), ("dims", [16, 16]), ("quant", {"lo": 0})]:
        with pytest.raises(MalformedPayload):
            JobHeader.from_json({**good, key: bad})


# --- loopback end-to-end ---------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_loopback_matches_local(n, nema2mm, nema2mm_quant, seg_cfg, secret, keyring, nema2mm_local):
    vol = nema2mm[0]
    net, eps = loopback_cluster(n, keyring)
    out = coordinator_run(vol, plan_for(vol, nema2mm_quant, seg_cfg, eps), secret, net)
    assert out.data.tobytes() == nema2mm_local.tobytes()


def test_two_slice_job_on_worker(nema2mm, nema2mm_quant, seg_cfg, secret, keyring):
    vol = nema2mm[0]
    small = Volume(vol.data[15:17].copy(), vol.spacing)
    net, eps = loopback_cluster(1, keyring)
    out = coordinator_run(small, plan_for(small, nema2mm_quant, seg_cfg, eps, k=3), secret, net)
    np.testing.assert_array_equal(out.data, segment_slab(small.data, nema2mm_quant, seg_cfg))


def _dead(channel):
    channel.close()


def _hang(channel):
    try:
        channel.recv_exact(1 << 30, allow_eof=True)
    except Exception:
        pass


def test_dead_worker_job_reassigned(nema2mm, nema2mm_quant, seg_cfg, secret, keyring, nema2mm_local):
    vol = nema2mm[0]
    net, eps = loopback_cluster(2, keyring)
    net.register("dead", _dead)
    coord = Coordinator(vol, plan_for(vol, nema2mm_quant, seg_cfg, ["dead", *eps]), secret, net)
    out = coord.run()
    assert out.data.tobytes() == nema2mm_local.tobytes()
    state = coord.states["job-0000"]
    assert state.history[0] == "dead" and state.history[1] != "dead"
    assert state.attempt == 1 and state.status.value == "done"


def test_hung_worker_times_out_and_is_replaced(nema2mm, nema2mm_quant, seg_cfg, secret, keyring,
                                              nema2mm_local):
    vol = nema2mm[0]
    net, eps = loopback_cluster(1, keyring)
    net.register("hang", _hang)
    coord = Coordinator(vol, plan_for(vol, nema2mm_quant, seg_cfg, ["hang", *eps]), secret, net,
                        timeout_s=2.0)
    assert coord.run().data.tobytes() == nema2mm_local.tobytes()
    assert coord.states["job-0000"].history == ["hang", "w0"]


def test_retry_budget_exhausted(nema2mm, nema2mm_quant, seg_cfg, secret):
    vol = nema2mm[0]
    net = LoopbackNetwork()
    for ep in ("d0", "d1"):
        net.register(ep, _dead)
    with pytest.raises(DistributedRunError) as info:
        coordinator_run(vol, plan_for(vol, nema2mm_quant, seg_cfg, ["d0", "d1"]), secret, net)
    jobs = info.value.report["jobs"]
    assert all(j["status"] == "failed" and j["attempt"] == 2 for j in jobs)
    assert info.value.report["completed_z_ranges"] == []
    assert info.value.partial.dims == vol.dims


def test_partial_report_keeps_finished_slabs(nema2mm, nema2mm_quant, seg_cfg, secret, keyring,
                                             nema2mm_local):
    vol = nema2mm[0]
    net, eps = loopback_cluster(1, keyring)
    net.register("d", _dead)
    plan = plan_for(vol, nema2mm_quant, seg_cfg, [eps[0], "d"])
    # pin the second job to the dead endpoint only
    coord = Coordinator(vol, plan, secret, net, max_retries=0)
    with pytest.raises(DistributedRunError) as info:
        coord.run()
    z0, z1 = plan.jobs[0].z_range
    assert info.value.report["completed_z_ranges"] == [[z0, z1]]
    np.testing.assert_array_equal(info.value.partial.data[z0:z1], nema2mm_local[z0:z1])


def test_wrong_password_gets_auth_error_and_no_results(nema2mm, nema2mm_quant, seg_cfg, secret):
    vol = nema2mm[0]
    net, eps = loopback_cluster(1, KeyRing(b"not the password", TEST_ITERATIONS))
    down = bytearray()
    net.taps.append(lambda d, data: down.extend(data) if d == "down" else None)
    with pytest.raises(DistributedRunError) as info:
        coordinator_run(vol, plan_for(vol, nema2mm_quant, seg_cfg, eps), secret, net)
    net.join(5)
    assert info.value.code == "auth"
    assert info.value.report["jobs"][0]["attempt"] == 0
    types = [m.msg_type for m in decode_stream(bytes(down))]
    assert types == [MsgType.HELLO, MsgType.ERROR]
    assert decode_stream(bytes(down))[-1].body["code"] == "auth"


def test_transcript_has_no_plaintext(nema2mm, nema2mm_quant, seg_cfg, secret, keyring,
                                     nema2mm_local):
    vol = nema2mm[0]
    net, eps = loopback_cluster(2, keyring)
    wire = {"up": bytearray(), "down": bytearray()}
    net.taps.append(lambda d, data: wire[d].extend(data))
    coordinator_run(vol, plan_for(vol, nema2mm_quant, seg_cfg, eps, k=2), secret, net)
    up, down = bytes(wire["up"]), bytes(wire["down"])
    for m in decode_stream(up) + decode_stream(down):
        if m.msg_type in (MsgType.CHUNK, MsgType.RESULT_CHUNK):
            assert len(m.body.ciphertext) > 16
    # 32x32 uint16 tile rows are 64 bytes; label rows are 32 bytes
    raw = vol.data.astype("<u2").tobytes()
    for i in range(0, len(raw), 4096):
        assert raw[i:i + 64] not in up
    labels = nema2mm_local.tobytes()
    for i in range(0, len(labels), 2048):
        run = labels[i:i + 32]
        if len(set(run)) > 1:
            assert run not in down


def _job_result_frames(volume, quant, seg, secret, keyring, attempt):
    client, server = LoopbackChannel.pair()
    t = threading.Thread(target=serve_connection, args=(server, keyring), daemon=True)
    t.start()
    handshake(client)
    job = plan_partition(volume.dims, 1, ["x"], quant, seg, 2).jobs[0]
    header = send_job(client, volume, job, attempt, ChunkCipher(secret))
    frames = []
    while True:
        m = read_frame(client)
        frames.append(m)
        if m.msg_type == MsgType.RESULT_END:
            break
    client.close()
    t.join(5)
    return header, frames


def test_stale_attempt_result_discarded(nema2mm, nema2mm_quant, seg_cfg, secret, keyring):
    vol = Volume(nema2mm[0].data[10:12].copy(), nema2mm[0].spacing)
    header0, frames = _job_result_frames(vol, nema2mm_quant, seg_cfg, secret, keyring, 0)
    header1 = JobHeader(**{**header0.__dict__, "attempt": 1})

    def replay(frames):
        a, b = LoopbackChannel.pair()
        for m in frames:
            write_frame(a, m)
        return b

    labels = receive_result(replay(frames), header0, keyring)
    np.testing.assert_array_equal(labels, segment_slab(vol.data, nema2mm_quant, seg_cfg))
    with pytest.raises(MalformedPayload):
        receive_result(replay(frames), header1, keyring)
    # relabelled header: the chunks' associated data still names attempt 0
    forged = [Message(m.msg_type, {**m.body, "attempt": 1}) if m.msg_type in
              (MsgType.RESULT_HEADER, MsgType.RESULT_END) else m for m in frames]
    with pytest.raises(AuthenticationError):
        receive_result(replay(forged), header1, keyring)


# --- handshake ---------------------------------------------------------------------------

def _serve_pair(keyring):
    client, server = LoopbackChannel.pair()
    result = {}

    def run():
        result["err"] = serve_connection(server, keyring)
        server.close()

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return client, t, result


def test_hello_ack(keyring):
    client, t, result = _serve_pair(keyring)
    write_frame(client, Message.hello())
    reply = read_frame(client)
    assert reply.msg_type == MsgType.HELLO and reply.body["ack"] is True
    assert reply.body["version"] == 1 and "aes-256-gcm" in reply.body["capabilities"]
    client.close()
    t.join(5)
    assert result["err"] is None


def test_hello_wrong_version(keyring):
    client, t, result = _serve_pair(keyring)
    write_frame(client, Message(MsgType.HELLO, {"version": 2}))
    reply = read_frame(client)
    assert reply.msg_type == MsgType.ERROR and reply.body["code"] == "version"
    t.join(5)
    assert result["err"] is not None


def test_frame_with_bad_version_byte(keyring):
    client, t, result = _serve_pair(keyring)
    buf = bytearray(frame_encode(Message.hello()))
    buf[4] = 9
    client.send(bytes(buf))
    reply = read_frame(client)
    assert reply.body["code"] == "version"
    t.join(5)
    assert isinstance(result["err"], BadVersion)


def test_job_before_hello_is_sequence_error(keyring):
    client, t, _ = _serve_pair(keyring)
    write_frame(client, Message(MsgType.JOB_END, {}))
    assert read_frame(client).body["code"] == "sequence"
    t.join(5)


# --- transports ----------------------------------------------------------------------------

def test_loopback_carries_ten_thousand_frames():
    a, b = LoopbackChannel.pair()
    msgs = [Message(MsgType.JOB_END, {"i": i, "pad": "x" * (i % 97)}) for i in range(10_000)]

    def writer():
        for m in msgs:
            write_frame(a, m)
        a.close()

    t = threading.Thread(target=writer)
    t.start()
    got = []
    while (m := read_frame(b)) is not None:
        got.append(m)
    t.join()
    assert got == msgs


def test_tcp_plaintext_job(nema2mm, nema2mm_quant, seg_cfg, secret, keyring, nema2mm_local):
    vol = nema2mm[0]
    with WorkerServer("127.0.0.1:0", keyring) as w1, WorkerServer("127.0.0.1:0", keyring) as w2:
        plan = plan_for(vol, nema2mm_quant, seg_cfg, [w1.endpoint, w2.endpoint])
        out = coordinator_run(vol, plan, secret, TcpTransport(tls=False))
    assert out.data.tobytes() == nema2mm_local.tobytes()


def test_unreachable_endpoint():
    with pytest.raises(ConnectionFailure):
        TcpTransport().connect("127.0.0.1:1")


@pytest.fixture(scope="module")
def pki(tmp_path_factory):
    return make_test_pki(tmp_path_factory.mktemp("pki"))


def test_tls_job_completes(pki, nema2mm, nema2mm_quant, seg_cfg, secret, keyring):
    vol = Volume(nema2mm[0].data[14:18].copy(), nema2mm[0].spacing)
    server_cfg = TlsConfig(cert_file=str(pki["server_cert"]), key_file=str(pki["server_key"]))
    with WorkerServer("127.0.0.1:0", keyring, server_cfg) as w:
        channel = TcpTransport(True, TlsConfig(ca_file=str(pki["ca"]))).connect(w.endpoint)
        assert channel.tls_version == "TLSv1.3"
        channel.close()
        transport = TcpTransport(True, TlsConfig(ca_file=str(pki["ca"])))
        out = coordinator_run(vol, plan_for(vol, nema2mm_quant, seg_cfg, [w.endpoint]), secret, transport)
    np.testing.assert_array_equal(out.data, segment_slab(vol.data, nema2mm_quant, seg_cfg))


def test_tls_mutual_auth(pki, keyring):
    server_cfg = TlsConfig(ca_file=str(pki["ca"]), cert_file=str(pki["server_cert"]),
                           key_file=str(pki["server_key"]))
    client_cfg = TlsConfig(ca_file=str(pki["ca"]), cert_file=str(pki["client_cert"]),
                           key_file=str(pki["client_key"]))
    with WorkerServer("127.0.0.1:0", keyring, server_cfg) as w:
        ch = TcpTransport(True, client_cfg).connect(w.endpoint)
        write_frame(ch, Message.hello())
        assert read_frame(ch).body["ack"] is True
        ch.close()


def test_tls_wrong_ca_rejected(pki, tmp_path, keyring):
    other = make_test_pki(tmp_path / "other")
    server_cfg = TlsConfig(cert_file=str(pki["server_cert"]), key_file=str(pki["server_key"]))
    with WorkerServer("127.0.0.1:0", keyring, server_cfg) as w:
        with pytest.raises(ConnectionFailure):
            TcpTransport(True, TlsConfig(ca_file=str(other["ca"]))).connect(w.endpoint)
