"""Miniature interactive remote rendering system with integrated measurement.

The client tags every interaction with a GUID and starts a stopwatch; the
server rotates its cube, renders, encodes and echoes the GUID back with the
frame; the client stops the matching stopwatch when it dequeues the result.
A :class:`~irrlab.simulator.LatencySimulator` can be placed on the request
path, the response path, or split across both.
"""
from __future__ import annotations

import collections
import csv
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import protocol
from .protocol import NetworkMessage, ProtocolError
from .render import LOSSLESS, ServerSceneState, decode_frame, encode_frame
from .simulator import ASYNC, LatencySimulator, LatencySimulatorResult
from .timing import Stopwatch, now_us, sleep_until

log = logging.getLogger(__name__)

DEFAULT_PORT = 7667
RESPONSE_PATH = "response"
REQUEST_PATH = "request"
SPLIT_PATH = "split"
DELAY_PATHS = (RESPONSE_PATH, REQUEST_PATH, SPLIT_PATH)
LOG_HEADER = ["index", "guid", "interaction", "submit_us", "complete_us", "il_ms"]


class SessionError(RuntimeError):
    pass


@dataclass
class SessionConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    delay_ms: float = 0.0
    mode: str = ASYNC
    delay_path: str = RESPONSE_PATH
    rate_hz: float = 10.0
    template_path: str | None = None
    resolution: tuple[int, int] = (256, 256)
    rotation_step: float = 5.0
    codec: str = LOSSLESS
    timeout_s: float = 30.0
    tick_ms: float = 1.0

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be > 0")
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        if self.delay_path not in DELAY_PATHS:
            raise ValueError(f"delay_path must be one of {DELAY_PATHS}")
        self.resolution = tuple(int(v) for v in self.resolution)


# -- server -----------------------------------------------------------------


def server_handle_message(state: ServerSceneState, m: NetworkMessage,
                          codec: str = LOSSLESS) -> NetworkMessage:
    """Apply one interaction to the scene and build the response message."""
    if m.interaction == protocol.ROTATE_LEFT:
        state.rotate(-state.rotation_step)
    elif m.interaction == protocol.ROTATE_RIGHT:
        state.rotate(state.rotation_step)
    elif m.interaction == protocol.QUIT:
        return NetworkMessage(protocol.QUIT, m.id, b"", protocol.SHUTDOWN)
    else:
        return _error_response(m.id, f"unknown interaction {m.interaction!r}")
    frame = encode_frame(state.render(), codec)
    return NetworkMessage(m.interaction, m.id, frame, protocol.FRAME_RESULT)


def _error_response(guid: bytes, reason: str) -> NetworkMessage:
    return NetworkMessage("e", guid, reason.encode("utf-8"), protocol.ERROR)


class RenderServer:
    """Single-connection render server.

    ``serve`` handles connections one after another; each connection gets a
    fresh scene. Messages on a connection are handled strictly in order.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 delay_ms: float = 0.0, mode: str = ASYNC, delay_path: str = RESPONSE_PATH,
                 rotation_step: float = 5.0, resolution: tuple[int, int] = (256, 256),
                 codec: str = LOSSLESS):
        if delay_path not in DELAY_PATHS:
            raise ValueError(f"delay_path must be one of {DELAY_PATHS}")
        self.host = host
        self.delay_ms = delay_ms
        self.mode = mode
        self.delay_path = delay_path
        self.rotation_step = rotation_step
        self.resolution = tuple(resolution)
        self.codec = codec
        self.handled = 0
        self.errors = 0
        self._sock = socket.create_server((host, port))
        self.port = self._sock.getsockname()[1]
        self._stopping = threading.Event()

    @classmethod
    def from_config(cls, cfg: SessionConfig, port: int | None = None) -> "RenderServer":
        return cls(cfg.host, cfg.port if port is None else port, cfg.delay_ms, cfg.mode,
                   cfg.delay_path, cfg.rotation_step, cfg.resolution, cfg.codec)

    def _simulators(self) -> tuple[LatencySimulator | None, LatencySimulator | None]:
        if self.delay_ms == 0 and self.mode == ASYNC:
            return None, None
        if self.delay_path == RESPONSE_PATH:
            return None, LatencySimulator(self.delay_ms, self.mode)
        if self.delay_path == REQUEST_PATH:
            return LatencySimulator(self.delay_ms, self.mode), None
        half = self.delay_ms / 2
        return LatencySimulator(half, self.mode), LatencySimulator(half, self.mode)

    def serve(self, max_connections: int | None = None) -> None:
        served = 0
        self._sock.settimeout(0.2)
        try:
            while not self._stopping.is_set():
                if max_connections is not None and served >= max_connections:
                    return
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    return
                served += 1
                with conn:
                    conn.settimeout(None)
                    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    self._serve_connection(conn)
        finally:
            self.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        state = ServerSceneState(rotation_step=self.rotation_step, resolution=self.resolution)
        inbound, outbound = self._simulators()
        send_lock = threading.Lock()

        def send(m: NetworkMessage) -> None:
            try:
                with send_lock:
                    protocol.send_message(conn, m)
            except OSError as exc:
                log.warning("send failed: %s", exc)

        def respond(m: NetworkMessage) -> None:
            if outbound is None:
                send(m)
            else:
                outbound.delay(m)

        def handle(m: NetworkMessage) -> None:
            response = server_handle_message(state, m, self.codec)
            if response.kind == protocol.ERROR:
                self.errors += 1
            else:
                self.handled += 1
            respond(response)

        if outbound is not None:
            outbound.on_message_ready(lambda r: send(r.message))
        if inbound is not None:
            inbound.on_message_ready(lambda r: handle(r.message))

        try:
            while True:
                try:
                    payload = protocol.recv_payload(conn)
                except (ProtocolError, OSError) as exc:
                    log.warning("connection dropped: %s", exc)
                    break
                if payload is None:
                    break
                try:
                    m = protocol.decode_message(payload)
                except ProtocolError as exc:
                    self.errors += 1
                    guid = protocol.peek_guid(payload)
                    if guid is not None:
                        respond(_error_response(guid, str(exc)))
                    continue
                if inbound is None:
                    handle(m)
                else:
                    inbound.delay(m)
                if m.interaction == protocol.QUIT:
                    break
        finally:
            # flush everything still held by the simulators before closing
            if inbound is not None:
                inbound.shutdown()
            if outbound is not None:
                outbound.shutdown()

    def stop(self) -> None:
        self._stopping.set()

    def close(self) -> None:
        self._stopping.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def start_background(self, max_connections: int | None = 1) -> threading.Thread:
        t = threading.Thread(target=self.serve, args=(max_connections,),
                             name="render-server", daemon=True)
        t.start()
        return t


# -- client -----------------------------------------------------------------


@dataclass
class PendingInteraction:
    interaction: str
    id: bytes
    index: int
    timer: Stopwatch = field(default_factory=Stopwatch)
    frame: bytes = b""


@dataclass(frozen=True)
class Measurement:
    index: int
    guid: str
    interaction: str
    submit_us: int
    complete_us: int
    il_ms: float
    # encoded size of the result frame; kept for bandwidth stats, not logged
    frame_bytes: int = 0


@dataclass
class ClientState:
    """Client-side buffers.

    ``cib`` maps GUID to :class:`PendingInteraction`; ``cfb`` is the FIFO of
    arrived server messages, the only structure shared with the receiving
    thread.
    """

    send: Callable[[NetworkMessage], None] = lambda m: None
    cib: dict[bytes, PendingInteraction] = field(default_factory=dict)
    cfb: collections.deque = field(default_factory=collections.deque)
    results: list[Measurement] = field(default_factory=list)
    display_surface: np.ndarray | None = None
    protocol_errors: int = 0
    submitted: int = 0

    def submit_interaction(self, interaction: str) -> bytes:
        if interaction not in (protocol.ROTATE_LEFT, protocol.ROTATE_RIGHT):
            raise ValueError(f"interaction must be 'a' or 'd', got {interaction!r}")
        guid = protocol.new_guid()
        while guid in self.cib:
            guid = protocol.new_guid()
        pending = PendingInteraction(interaction, guid, self.submitted)
        self.cib[guid] = pending
        self.submitted += 1
        try:
            self.send(NetworkMessage(interaction, guid))
        except OSError as exc:
            raise SessionError(f"failed to send interaction: {exc}") from exc
        return guid

    def fixed_update(self) -> list[Measurement]:
        """Process at most one arrived message; returns what it completed."""
        try:
            m = self.cfb.popleft()
        except IndexError:
            return []
        pending = self.cib.get(m.id)
        if pending is None or not pending.timer.running:
            self.protocol_errors += 1
            log.warning("result for unknown guid %s dropped", m.id.hex())
            return []
        pending.timer.stop()
        pending.frame = m.frame
        done = Measurement(
            pending.index, m.id.hex(), pending.interaction,
            pending.timer.start_us, pending.timer.stop_us, pending.timer.elapsed_ms,
            len(m.frame),
        )
        self.results.append(done)
        try:
            self.display_surface = decode_frame(m.frame)
        except ValueError as exc:
            log.warning("undecodable frame for %s: %s", m.id.hex(), exc)
        return [done]

    @property
    def outstanding(self) -> int:
        return sum(1 for p in self.cib.values() if p.timer.running)


@dataclass
class SessionResult:
    measurements: list[Measurement]
    submitted: int
    complete: bool
    protocol_errors: int = 0
    error_responses: int = 0
    # GUIDs of results in the order they arrived, for echo/order checks
    arrival_guids: list[str] = field(default_factory=list)
    submitted_guids: list[str] = field(default_factory=list)

    @property
    def il_ms(self) -> list[float]:
        return [m.il_ms for m in self.measurements]


class RenderClient:
    """Connects to a :class:`RenderServer` and drives a measurement session."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.state = ClientState()
        self._sock: socket.socket | None = None
        self._receiver: threading.Thread | None = None
        self._shutdown_echo = threading.Event()
        self._connection_lost = threading.Event()
        self.error_responses = 0

    def connect(self, port: int | None = None) -> None:
        sock = socket.create_connection((self.cfg.host, port or self.cfg.port), timeout=10)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.state.send = lambda m: protocol.send_message(sock, m)
        self._receiver = threading.Thread(target=self._receive_loop, name="client-recv", daemon=True)
        self._receiver.start()

    def _receive_loop(self) -> None:
        try:
            while True:
                m = protocol.recv_message(self._sock)
                if m is None:
                    break
                if m.kind == protocol.SHUTDOWN:
                    self._shutdown_echo.set()
                    break
                if m.kind == protocol.ERROR:
                    self.error_responses += 1
                    continue
                self.state.cfb.append(m)
        except (ProtocolError, OSError) as exc:
            log.warning("receive loop ended: %s", exc)
        finally:
            self._connection_lost.set()

    def run(self, interactions: Sequence[str],
            on_interaction: Callable[[int, str, int], None] | None = None,
            on_tick: Callable[[ClientState], None] | None = None) -> SessionResult:
        """Submit ``interactions`` at the configured rate and collect results.

        ``on_interaction(index, interaction, t_us)`` is called immediately
        before each submission; ``on_tick`` after each fixed update.
        """
        if self._sock is None:
            raise SessionError("client is not connected")
        interactions = list(interactions)
        st = self.state
        period = self.cfg.tick_ms / 1000.0
        spacing = 1.0 / self.cfg.rate_hz
        start = time.perf_counter()
        next_tick = start
        next_index = 0
        last_progress = start
        complete = False
        submitted_guids = []
        while True:
            now = time.perf_counter()
            if next_index < len(interactions) and now >= start + next_index * spacing:
                if on_interaction is not None:
                    on_interaction(next_index, interactions[next_index], now_us())
                guid = st.submit_interaction(interactions[next_index])
                submitted_guids.append(guid.hex())
                next_index += 1
                last_progress = now
            if st.fixed_update():
                last_progress = time.perf_counter()
            if on_tick is not None:
                on_tick(st)
            if next_index == len(interactions) and len(st.results) == len(interactions):
                complete = True
                break
            if time.perf_counter() - last_progress > self.cfg.timeout_s:
                log.error("session stalled for %.1f s; aborting with partial results",
                          self.cfg.timeout_s)
                break
            if self._connection_lost.is_set() and not st.cfb:
                log.error("connection lost; aborting with partial results")
                break
            # overrunning ticks are not compensated
            next_tick = max(next_tick + period, time.perf_counter())
            sleep_until(next_tick)
        return SessionResult(
            measurements=sorted(st.results, key=lambda m: m.index),
            submitted=next_index,
            complete=complete,
            protocol_errors=st.protocol_errors,
            error_responses=self.error_responses,
            arrival_guids=[m.guid for m in st.results],
            submitted_guids=submitted_guids,
        )

    def close(self, wait_s: float = 5.0) -> None:
        if self._sock is None:
            return
        try:
            protocol.send_message(self._sock, NetworkMessage(protocol.QUIT, protocol.new_guid(),
                                                             b"", protocol.SHUTDOWN))
            self._shutdown_echo.wait(wait_s)
        except OSError:
            pass
        finally:
            try:
                self._sock.close()
            except OSError:
                pass
            if self._receiver is not None:
                self._receiver.join(wait_s)
            self._sock = None


def load_template(path: str | Path) -> list[str]:
    """Read an interaction template: one 'a' or 'd' per line, blanks ignored."""
    path = Path(path)
    interactions = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            token = line.strip()
            if not token:
                continue
            if token not in (protocol.ROTATE_LEFT, protocol.ROTATE_RIGHT):
                raise ValueError(f"{path}:{lineno}: expected 'a' or 'd', got {token!r}")
            interactions.append(token)
    if not interactions:
        raise ValueError(f"{path}: template contains no interactions")
    return interactions


def run_session(cfg: SessionConfig, interactions: Iterable[str] | None = None,
                port: int | None = None, **hooks) -> SessionResult:
    """Run one session against an already running server."""
    if interactions is None:
        if cfg.template_path is None:
            raise ValueError("no interactions given and no template_path configured")
        interactions = load_template(cfg.template_path)
    client = RenderClient(cfg)
    try:
        client.connect(port)
    except OSError as exc:
        raise SessionError(f"cannot reach server at {cfg.host}:{port or cfg.port}: {exc}") from exc
    try:
        return client.run(list(interactions), **hooks)
    finally:
        client.close()


def run_local_session(cfg: SessionConfig, interactions: Iterable[str] | None = None,
                      **hooks) -> SessionResult:
    """Start an in-process server on an ephemeral port and run one session."""
    server = RenderServer.from_config(cfg, port=0)
    thread = server.start_background(max_connections=1)
    try:
        return run_session(cfg, interactions, port=server.port, **hooks)
    finally:
        thread.join(10)
        server.close()


def write_measurement_log(path: str | Path, measurements: Iterable[Measurement]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for m in measurements:
            w.writerow([m.index, m.guid, m.interaction, m.submit_us, m.complete_us,
                        f"{m.il_ms:.3f}"])


def read_measurement_log(path: str | Path) -> list[Measurement]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            Measurement(int(r["index"]), r["guid"], r["interaction"], int(r["submit_us"]),
                        int(r["complete_us"]), float(r["il_ms"]))
            for r in reader
        ]
