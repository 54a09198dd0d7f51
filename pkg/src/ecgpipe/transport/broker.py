"""Broker: session registry, batch logging, and fan-out to subscribers.

:class:`BrokerCore` is transport-agnostic -- it turns incoming bytes into
packets and packets into reply frames, so the same state machine serves both
the threaded TCP front end (:class:`TcpBroker`) and the deterministic
in-process driver used for virtual-time experiments.

Per-connection guarantees: a malformed packet (or a protocol violation such
as publishing before CONNECT) closes only that connection; a second CONNECT
with an already-active client id takes over the session and the older
connection is closed; everything received on an active session is appended
to the receive log in arrival order.
"""

from __future__ import annotations

import socket
import threading
import time
from typing import Callable, Optional

from .. import mqtt
from ..vtime import VirtualClock
from .wire import LogWriter, receive_log_record

_AWAIT_CONNECT = "await-connect"
_ACTIVE = "active"
_CLOSED = "closed"


class BrokerCore:
    """Shared session/subscription state plus the receive log appender."""

    def __init__(self, recv_log: Optional[LogWriter] = None,
                 clock: Optional[Callable[[], float]] = None,
                 on_batch: Optional[Callable] = None,
                 max_packet_bytes: int = 1 << 20):
        self.recv_log = recv_log
        self.clock = clock or (lambda: time.time() * 1000.0)
        self.on_batch = on_batch
        self.max_packet_bytes = max_packet_bytes
        self._lock = threading.RLock()
        self._sessions = {}
        self._subscribers = {}

    def connection(self) -> "BrokerConnection":
        return BrokerConnection(self)

    def session_ids(self):
        with self._lock:
            return sorted(self._sessions)

    def _register(self, conn: "BrokerConnection") -> Optional["BrokerConnection"]:
        with self._lock:
            old = self._sessions.get(conn.client_id)
            self._sessions[conn.client_id] = conn
        return old

    def _deregister(self, conn: "BrokerConnection") -> None:
        with self._lock:
            if self._sessions.get(conn.client_id) is conn:
                del self._sessions[conn.client_id]
            for subs in self._subscribers.values():
                subs.discard(conn)

    def _subscribe(self, conn: "BrokerConnection", topic: str) -> None:
        with self._lock:
            self._subscribers.setdefault(topic, set()).add(conn)

    def _route(self, frame: bytes, topic: str, origin: "BrokerConnection") -> None:
        with self._lock:
            targets = [c for c in self._subscribers.get(topic, ()) if c is not origin]
        for conn in targets:
            conn.deliver(frame)

    def _log(self, record: dict) -> None:
        if self.recv_log is not None:
            self.recv_log.append(record)


class BrokerConnection:
    """State machine for one remote connection.

    ``receive_bytes`` returns the reply frames for this connection; frames
    fanned out to subscribers go through their ``transport_write`` hook (or
    pile up in ``outbox`` when no transport is attached, as in tests and the
    virtual driver).
    """

    def __init__(self, core: BrokerCore):
        self.core = core
        self.state = _AWAIT_CONNECT
        self.client_id = None
        self.outbox = []
        self.transport_write: Optional[Callable[[bytes], None]] = None
        self.transport_close: Optional[Callable[[], None]] = None
        self._decoder = mqtt.StreamDecoder()

    @property
    def closed(self) -> bool:
        return self.state == _CLOSED

    def deliver(self, frame: bytes) -> None:
        if self.closed:
            return
        if self.transport_write is not None:
            try:
                self.transport_write(frame)
            except OSError:
                self.close()
        else:
            self.outbox.append(frame)

    def receive_bytes(self, data: bytes, now_ms: Optional[float] = None):
        """Feed raw bytes; returns reply frames for this connection.

        Raises :class:`mqtt.ProtocolError` after closing this connection
        (and only this one) on malformed or out-of-order input.
        """
        if self.closed:
            return []
        try:
            packets = self._decoder.feed(data)
            if self._decoder.pending > self.core.max_packet_bytes:
                raise mqtt.ProtocolError("inbound packet exceeds size limit")
            replies = []
            for packet in packets:
                replies.extend(self._handle(packet, now_ms))
                if self.closed:
                    break
            return replies
        except mqtt.ProtocolError:
            self.close()
            raise

    def _handle(self, packet, now_ms):
        if self.state == _AWAIT_CONNECT:
            if not isinstance(packet, mqtt.Connect):
                raise mqtt.ProtocolError(
                    f"{type(packet).__name__} before CONNECT"
                )
            self.client_id = packet.client_id
            ousted = self.core._register(self)
            if ousted is not None:
                ousted.close()
            self.state = _ACTIVE
            return [mqtt.encode_packet(mqtt.ConnAck(return_code=0))]

        if isinstance(packet, mqtt.Connect):
            raise mqtt.ProtocolError("duplicate CONNECT on active session")
        if isinstance(packet, mqtt.Publish):
            ts = now_ms if now_ms is not None else self.core.clock()
            record = receive_log_record(self.client_id, ts, packet.payload)
            self.core._log(record)
            if self.core.on_batch is not None and "corrupt" not in record:
                self.core.on_batch(self.client_id, record)
            self.core._route(mqtt.encode_packet(packet), packet.topic, self)
            return []
        if isinstance(packet, mqtt.Subscribe):
            self.core._subscribe(self, packet.topic)
            return [mqtt.encode_packet(mqtt.SubAck(packet_id=packet.packet_id))]
        if isinstance(packet, mqtt.PingReq):
            return [mqtt.encode_packet(mqtt.PingResp())]
        if isinstance(packet, mqtt.Disconnect):
            self.close()
            return []
        raise mqtt.ProtocolError(f"client may not send {type(packet).__name__}")

    def close(self) -> None:
        if self.closed:
            return
        self.state = _CLOSED
        if self.client_id is not None:
            self.core._deregister(self)
        if self.transport_close is not None:
            try:
                self.transport_close()
            except OSError:
                pass


class TcpBroker:
    """Threaded TCP front end: one daemon thread per connection."""

    def __init__(self, host="127.0.0.1", port=0, recv_log_path=None, pace=1.0,
                 on_batch=None, connect_timeout_s=10.0):
        self._recv_writer = LogWriter(recv_log_path) if recv_log_path else None
        clock = VirtualClock(pace)
        self.core = BrokerCore(recv_log=self._recv_writer, clock=clock.now_ms,
                               on_batch=on_batch)
        self.host = host
        self._requested_port = port
        self.connect_timeout_s = connect_timeout_s
        self._listener = None
        self._accept_thread = None
        self._conn_threads = []
        self._live = set()
        self._live_lock = threading.Lock()
        self._stopping = threading.Event()

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def start(self) -> "TcpBroker":
        self._listener = socket.create_server((self.host, self._requested_port))
        # Poll with a short timeout: closing a listener does not wake a
        # thread blocked in accept(), so stop() would otherwise hang.
        self._listener.settimeout(0.25)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            thread = threading.Thread(target=self._serve, args=(sock,), daemon=True)
            self._conn_threads.append(thread)
            thread.start()

    def _serve(self, sock: socket.socket):
        conn = self.core.connection()
        write_lock = threading.Lock()

        def write(frame: bytes):
            with write_lock:
                sock.sendall(frame)

        def shut():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

        conn.transport_write = write
        conn.transport_close = shut
        with self._live_lock:
            self._live.add(conn)
        sock.settimeout(self.connect_timeout_s)
        try:
            while not conn.closed:
                try:
                    data = sock.recv(4096)
                except socket.timeout:
                    break  # never completed CONNECT in time, or idle pre-CONNECT
                except OSError:
                    break
                if not data:
                    break
                for frame in conn.receive_bytes(data):
                    write(frame)
                if conn.state == _ACTIVE:
                    sock.settimeout(None)
        except (mqtt.ProtocolError, OSError):
            pass
        finally:
            conn.close()
            with self._live_lock:
                self._live.discard(conn)

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        with self._live_lock:
            live = list(self._live)
        for conn in live:
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        for thread in self._conn_threads:
            thread.join(timeout=2.0)
        if self._recv_writer is not None:
            self._recv_writer.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def broker_serve(host="127.0.0.1", port=1883, recv_log_path="recv.jsonl",
                 pace=1.0, stop_event: Optional[threading.Event] = None) -> None:
    """Serve a broker until ``stop_event`` fires (or forever)."""
    if stop_event is None:
        stop_event = threading.Event()
    with TcpBroker(host=host, port=port, recv_log_path=recv_log_path, pace=pace):
        stop_event.wait()
