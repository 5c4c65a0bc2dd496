import socket
import statistics
import threading
import time

import numpy as np
import pytest

from irrlab import protocol
from irrlab.protocol import NetworkMessage
from irrlab.render import ServerSceneState, decode_frame, render_scene
from irrlab.testbed import (
    ClientState,
    RenderServer,
    SessionConfig,
    SessionError,
    load_template,
    read_measurement_log,
    run_local_session,
    run_session,
    server_handle_message,
    write_measurement_log,
)

SMALL = (64, 64)


def test_server_rotates_and_echoes_guid():
    s = ServerSceneState()
    req = NetworkMessage("d", protocol.new_guid())
    resp = server_handle_message(s, req)
    assert s.angle_degrees == 5
    assert resp.id == req.id
    assert resp.kind == protocol.FRAME_RESULT
    assert np.array_equal(decode_frame(resp.frame), render_scene(5))


def test_left_then_right_returns_to_same_frame():
    s = ServerSceneState(angle_degrees=40, resolution=SMALL)
    at_45 = server_handle_message(s, NetworkMessage("d", bytes(16))).frame
    at_40 = server_handle_message(s, NetworkMessage("a", bytes(16))).frame
    assert s.angle_degrees == 40
    assert at_40 != at_45
    again_45 = server_handle_message(s, NetworkMessage("d", bytes(16))).frame
    assert again_45 == at_45


def test_full_turn_wraps_to_zero():
    s = ServerSceneState(resolution=(8, 8))
    for _ in range(72):
        server_handle_message(s, NetworkMessage("d", bytes(16)))
    assert s.angle_degrees == 0


def test_unknown_interaction_error_leaves_state():
    s = ServerSceneState(angle_degrees=10)
    resp = server_handle_message(s, NetworkMessage("x", bytes(16)))
    assert resp.kind == protocol.ERROR
    assert s.angle_degrees == 10


def test_quit_echoes_shutdown():
    resp = server_handle_message(ServerSceneState(), NetworkMessage("q", b"g" * 16, kind=protocol.SHUTDOWN))
    assert resp.kind == protocol.SHUTDOWN and resp.id == b"g" * 16 and resp.frame == b""


class FakeWire:
    def __init__(self):
        self.sent = []

    def __call__(self, m):
        self.sent.append(m)


def test_submit_creates_pending_and_sends():
    wire = FakeWire()
    c = ClientState(send=wire)
    guid = c.submit_interaction("a")
    assert len(c.cib) == 1 and c.cib[guid].timer.running
    assert len(wire.sent) == 1 and wire.sent[0].id == guid and wire.sent[0].frame == b""


def test_submit_validates_before_send():
    wire = FakeWire()
    c = ClientState(send=wire)
    with pytest.raises(ValueError):
        c.submit_interaction("x")
    assert wire.sent == [] and c.cib == {}


def test_thousand_distinct_guids():
    c = ClientState(send=FakeWire())
    guids = {c.submit_interaction("ad"[i % 2]) for i in range(1000)}
    assert len(guids) == 1000


def test_send_failure_is_session_error():
    def broken(m):
        raise BrokenPipeError("gone")

    with pytest.raises(SessionError):
        ClientState(send=broken).submit_interaction("a")


def test_fixed_update_empty_is_noop():
    c = ClientState()
    assert c.fixed_update() == []
    assert c.results == []


def test_fixed_update_completes_one_per_tick():
    c = ClientState(send=FakeWire())
    g1, g2 = c.submit_interaction("a"), c.submit_interaction("d")
    frame = server_handle_message(ServerSceneState(resolution=SMALL), NetworkMessage("a", g1)).frame
    c.cfb.append(NetworkMessage("a", g1, frame, protocol.FRAME_RESULT))
    c.cfb.append(NetworkMessage("d", g2, frame, protocol.FRAME_RESULT))
    time.sleep(0.005)
    done = c.fixed_update()
    assert len(done) == 1 and done[0].guid == g1.hex() and done[0].il_ms >= 5
    assert len(c.cfb) == 1
    assert c.display_surface.shape == (64, 64, 3)
    assert c.cib[g1].frame == frame
    assert done[0].frame_bytes == len(frame)
    c.fixed_update()
    assert [m.index for m in c.results] == [0, 1]


def test_unknown_guid_counted_and_dropped():
    c = ClientState(send=FakeWire())
    c.submit_interaction("a")
    c.cfb.append(NetworkMessage("a", b"?" * 16, b"", protocol.FRAME_RESULT))
    assert c.fixed_update() == []
    assert c.protocol_errors == 1 and c.results == []


def test_template_loading(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("a\nd\n\na\n")
    assert load_template(p) == ["a", "d", "a"]
    p.write_text("")
    with pytest.raises(ValueError):
        load_template(p)
    p.write_text("a\nx\n")
    with pytest.raises(ValueError, match=":2:"):
        load_template(p)


def test_measurement_log_round_trip(tmp_path):
    r = run_local_session(SessionConfig(rate_hz=50, resolution=SMALL), ["a", "d", "a"])
    path = tmp_path / "log.csv"
    write_measurement_log(path, r.measurements)
    assert path.read_text().splitlines()[0] == "index,guid,interaction,submit_us,complete_us,il_ms"
    back = read_measurement_log(path)
    assert [m.guid for m in back] == [m.guid for m in r.measurements]
    assert all(abs(a.il_ms - b.il_ms) < 1e-3 for a, b in zip(back, r.measurements))


def test_session_conservation_and_order():
    seq = list("adadaddaad")
    r = run_local_session(SessionConfig(rate_hz=40, resolution=SMALL), seq)
    assert r.complete
    assert len(r.measurements) == len(seq) == r.submitted
    assert [m.interaction for m in r.measurements] == seq
    assert r.arrival_guids == r.submitted_guids
    assert all(m.il_ms > 0 for m in r.measurements)
    assert all(m.complete_us - m.submit_us == pytest.approx(m.il_ms * 1000, abs=1) for m in r.measurements)


@pytest.mark.parametrize("path", ["request", "split", "response"])
def test_delay_paths_add_the_same_latency(path):
    seq = ["a", "d"] * 10
    base = run_local_session(SessionConfig(rate_hz=40, resolution=SMALL), seq)
    delayed = run_local_session(SessionConfig(rate_hz=40, resolution=SMALL, delay_ms=40, delay_path=path), seq)
    assert delayed.complete
    shift = statistics.fmean(delayed.il_ms) - statistics.fmean(base.il_ms)
    assert abs(shift - 40) < 4


def test_sync_mode_builds_backlog_in_session():
    seq = ["a"] * 6
    r = run_local_session(SessionConfig(rate_hz=50, resolution=SMALL, delay_ms=40, mode="sync"), seq)
    il = r.il_ms
    # 20 ms send spacing against 40 ms delay: every message waits ~20 ms longer than the last
    growth = [b - a for a, b in zip(il, il[1:])]
    assert statistics.fmean(growth) == pytest.approx(20, abs=4)


def test_wire_level_bad_interaction_gets_error_response():
    server = RenderServer(port=0, resolution=SMALL)
    t = server.start_background()
    with socket.create_connection(("127.0.0.1", server.port)) as s:
        payload = bytearray(protocol.encode_message(NetworkMessage("a", b"k" * 16)))
        payload[17] = ord("x")
        s.sendall(protocol.frame_payload(bytes(payload)))
        reply = protocol.recv_message(s)
        assert reply.kind == protocol.ERROR and reply.id == b"k" * 16
        protocol.send_message(s, NetworkMessage("d", b"m" * 16))
        reply = protocol.recv_message(s)
        assert reply.kind == protocol.FRAME_RESULT and reply.id == b"m" * 16
        protocol.send_message(s, NetworkMessage("q", b"z" * 16, kind=protocol.SHUTDOWN))
        assert protocol.recv_message(s).kind == protocol.SHUTDOWN
    t.join(5)
    # the quit echo counts as handled
    assert server.errors == 1 and server.handled == 2


def test_shutdown_flushes_delayed_responses():
    server = RenderServer(port=0, resolution=SMALL, delay_ms=80)
    t = server.start_background()
    with socket.create_connection(("127.0.0.1", server.port)) as s:
        ids = [bytes([i]) * 16 for i in range(3)]
        for g in ids:
            protocol.send_message(s, NetworkMessage("a", g))
        protocol.send_message(s, NetworkMessage("q", b"q" * 16, kind=protocol.SHUTDOWN))
        got = []
        while (m := protocol.recv_message(s)) is not None:
            got.append(m)
    t.join(5)
    assert [m.id for m in got] == ids + [b"q" * 16]
    assert got[-1].kind == protocol.SHUTDOWN


def test_timeout_returns_partial_results():
    # a server that accepts but never answers
    lsock = socket.create_server(("127.0.0.1", 0))
    port = lsock.getsockname()[1]
    conns = []
    threading.Thread(target=lambda: conns.append(lsock.accept()), daemon=True).start()
    try:
        r = run_session(SessionConfig(rate_hz=100, timeout_s=0.3), ["a", "d"], port=port)
    finally:
        lsock.close()
        for c, _ in conns:
            c.close()
    assert not r.complete
    assert r.measurements == [] and r.submitted == 2


def test_unreachable_server():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(SessionError):
        run_session(SessionConfig(), ["a"], port=port)


def test_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(rate_hz=0)
    with pytest.raises(ValueError):
        SessionConfig(delay_path="sideways")
