"""Publisher client: paced batch publishing over TCP, optional link shim.

The publisher stamps each batch at its scheduled release instant and logs it
*before* the payload touches the (possibly lossy) link, so the send log is
the ground truth of what entered the channel.  When a channel emulator is
attached, impaired payloads are handed to a sender thread that holds each one
back until its delivery time -- pacing of the release schedule is never
blocked by link latency.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Optional

from .. import mqtt
from ..channel import ChannelEmulator
from ..ecg import SampleBatch
from ..vtime import VirtualClock
from .wire import LogWriter, encode_batch_payload, send_log_record, topic_for


class TransportError(Exception):
    pass


class ConnectError(TransportError):
    """Broker unreachable, handshake timeout, or CONNACK refusal."""


class StreamAborted(TransportError):
    """Publishing died mid-stream; ``entries`` holds the partial send log."""

    def __init__(self, message, entries):
        super().__init__(message)
        self.entries = entries


class DelayedSender(threading.Thread):
    """Sends queued frames at their scheduled virtual delivery times."""

    def __init__(self, sock, clock):
        super().__init__(daemon=True)
        self._sock = sock
        self._clock = clock
        self._q = queue.Queue()
        self.error: Optional[OSError] = None

    def run(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            deliver_at_ms, frame = item
            self._clock.sleep_until_ms(deliver_at_ms)
            if self.error is None:
                try:
                    self._sock.sendall(frame)
                except OSError as exc:
                    self.error = exc

    def send_at(self, deliver_at_ms, frame):
        self._q.put((deliver_at_ms, frame))

    def finish(self):
        self._q.put(None)
        self.join()


class PublisherClient:
    def __init__(self, host, port, client_id, pace=1.0,
                 channel: Optional[ChannelEmulator] = None,
                 send_log_path=None, timeout_s=5.0):
        if not client_id:
            raise ValueError("client_id must be non-empty")
        self.host = host
        self.port = port
        self.client_id = client_id
        self.topic = topic_for(client_id)
        self.channel = channel
        self.clock = VirtualClock(pace)
        self.timeout_s = timeout_s
        self._writer = LogWriter(send_log_path) if send_log_path else None
        self._sock = None

    def connect(self) -> None:
        """TCP connect plus MQTT handshake; raises :class:`ConnectError`."""
        try:
            self._sock = socket.create_connection((self.host, self.port), self.timeout_s)
        except (ConnectionRefusedError, socket.timeout, OSError) as exc:
            raise ConnectError(f"broker unreachable at {self.host}:{self.port}: {exc}") from None
        self._sock.settimeout(self.timeout_s)
        decoder = mqtt.StreamDecoder()
        try:
            self._sock.sendall(mqtt.encode_packet(mqtt.Connect(client_id=self.client_id)))
            while True:
                data = self._sock.recv(4096)
                if not data:
                    raise ConnectError("connection closed during handshake")
                packets = decoder.feed(data)
                if packets:
                    ack = packets[0]
                    break
        except socket.timeout:
            self.close()
            raise ConnectError("timed out waiting for CONNACK") from None
        except (OSError, mqtt.ProtocolError) as exc:
            self.close()
            raise ConnectError(f"handshake failed: {exc}") from None
        if not isinstance(ack, mqtt.ConnAck) or ack.return_code != 0:
            self.close()
            raise ConnectError(f"broker refused session: {ack}")

    def publish_batches(self, batches) -> list:
        """Publish batches on their paced schedule; returns send log records.

        Raises :class:`StreamAborted` with the partial log if the socket dies
        mid-stream.
        """
        if self._sock is None:
            raise TransportError("connect() first")
        batches = list(batches)
        entries = []
        if not batches:
            return entries
        sender = None
        if self.channel is not None:
            sender = DelayedSender(self._sock, self.clock)
            sender.start()
        base_v = self.clock.now_ms()
        first_ts = batches[0].send_ts_ms
        try:
            for batch in batches:
                self.clock.sleep_until_ms(base_v + (batch.send_ts_ms - first_ts))
                release_ms = int(self.clock.now_ms())
                stamped = SampleBatch(batch.seq_no, batch.samples, release_ms)
                payload = encode_batch_payload(stamped)
                record = send_log_record(self.client_id, stamped, payload)
                if self._writer is not None:
                    self._writer.append(record)
                entries.append(record)
                if sender is not None:
                    delivery = self.channel.transmit(payload, float(release_ms))
                    if delivery is None:
                        continue  # lost on the link
                    frame = mqtt.encode_packet(mqtt.Publish(self.topic, delivery.payload))
                    sender.send_at(delivery.deliver_at_ms, frame)
                    if sender.error is not None:
                        raise sender.error
                else:
                    self._sock.sendall(mqtt.encode_packet(mqtt.Publish(self.topic, payload)))
        except OSError as exc:
            raise StreamAborted(f"stream aborted after {len(entries)} batches: {exc}",
                                entries) from None
        finally:
            if sender is not None:
                sender.finish()
        if sender is not None and sender.error is not None:
            raise StreamAborted(
                f"stream aborted after {len(entries)} batches: {sender.error}", entries)
        return entries

    def disconnect(self) -> None:
        if self._sock is not None:
            try:
                self._sock.sendall(mqtt.encode_packet(mqtt.Disconnect()))
            except OSError:
                pass
        self.close()

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
        if self._writer is not None:
            self._writer.close()

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.disconnect()


def client_connect(endpoint, client_id, **kwargs) -> PublisherClient:
    """Connect a publisher session to ``(host, port)``; returns the client."""
    host, port = endpoint
    client = PublisherClient(host, port, client_id, **kwargs)
    client.connect()
    return client


def publish_stream(session: PublisherClient, batches) -> list:
    """Publish a batch stream on an active session; returns the send log."""
    return session.publish_batches(batches)
