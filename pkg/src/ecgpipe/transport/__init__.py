"""Publisher/broker transport layer and the JSONL telemetry log formats."""

from .broker import BrokerConnection, BrokerCore, TcpBroker, broker_serve
from .client import (
    ConnectError,
    PublisherClient,
    StreamAborted,
    TransportError,
    client_connect,
    publish_stream,
)
from .wire import (
    PAYLOAD_LEN,
    DecodedBatch,
    LogWriter,
    decode_batch_payload,
    encode_batch_payload,
    inference_log_record,
    payload_digest,
    read_log,
    receive_log_record,
    send_log_record,
    topic_for,
)

__all__ = [
    "BrokerConnection",
    "BrokerCore",
    "TcpBroker",
    "broker_serve",
    "ConnectError",
    "PublisherClient",
    "StreamAborted",
    "TransportError",
    "client_connect",
    "publish_stream",
    "PAYLOAD_LEN",
    "DecodedBatch",
    "LogWriter",
    "decode_batch_payload",
    "encode_batch_payload",
    "inference_log_record",
    "payload_digest",
    "read_log",
    "receive_log_record",
    "send_log_record",
    "topic_for",
]
