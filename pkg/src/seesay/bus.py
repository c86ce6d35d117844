"""Topic-based publish/subscribe backbone and the binary envelope codec.

Every message crossing the system (device frames, audio, transcripts,
answers, status events) travels as an Envelope: a fixed 22-byte header

    magic "SSAY" | version 0x01 | kind | timestamp_ms u64 | message_id u32
    | payload_len u32

followed by the payload, all integers big-endian. The broker is in-process:
bounded per-subscription buffers that drop the oldest entry rather than ever
blocking a publisher.
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator

MAGIC = b"SSAY"
VERSION = 1
HEADER_LEN = 22

_HEADER = struct.Struct(">4sBBQII")

# Canonical topic names.
TOPIC_DEVICE_IMAGE = "seesay/device/image"
TOPIC_DEVICE_AUDIO = "seesay/device/audio"
TOPIC_TRANSCRIPT = "seesay/pipeline/transcript"
TOPIC_DESCRIPTION = "seesay/pipeline/description"
TOPIC_ANSWER_TEXT = "seesay/pipeline/answer/text"
TOPIC_ANSWER_AUDIO = "seesay/pipeline/answer/audio"
TOPIC_EVENT = "seesay/pipeline/event"


class Kind(IntEnum):
    IMAGE = 0x01
    AUDIO = 0x02
    TEXT = 0x03
    EVENT = 0x04


class EnvelopeError(Exception):
    """Base class for codec failures."""


class BadMagicError(EnvelopeError):
    pass


class UnknownVersionError(EnvelopeError):
    pass


class UnknownKindError(EnvelopeError):
    pass


class TruncatedFrameError(EnvelopeError):
    pass


class TrailingBytesError(EnvelopeError):
    pass


class TopicError(Exception):
    """Invalid topic or filter syntax."""


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    timestamp_ms: int
    message_id: int
    payload: bytes

    def text(self) -> str:
        return self.payload.decode("utf-8")


def encode_envelope(envelope: Envelope) -> bytes:
    kind = Kind(envelope.kind)
    if not 0 <= envelope.timestamp_ms < 1 << 64:
        raise ValueError(f"timestamp_ms out of u64 range: {envelope.timestamp_ms}")
    if not 0 <= envelope.message_id < 1 << 32:
        raise ValueError(f"message_id out of u32 range: {envelope.message_id}")
    header = _HEADER.pack(
        MAGIC, VERSION, int(kind), envelope.timestamp_ms, envelope.message_id,
        len(envelope.payload),
    )
    return header + envelope.payload


def decode_envelope(data: bytes) -> Envelope:
    """Decode one complete frame; the buffer must contain exactly one."""
    envelope, consumed = decode_envelope_prefix(data)
    if consumed < len(data):
        raise TrailingBytesError(
            f"{len(data) - consumed} trailing bytes after a {consumed}-byte frame"
        )
    return envelope


def decode_envelope_prefix(data: bytes) -> tuple[Envelope, int]:
    """Decode the frame at the start of ``data``, returning bytes consumed."""
    if len(data) < HEADER_LEN:
        raise TruncatedFrameError(f"need {HEADER_LEN} header bytes, have {len(data)}")
    magic, version, kind_byte, timestamp_ms, message_id, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersionError(f"unknown version {version:#04x}")
    try:
        kind = Kind(kind_byte)
    except ValueError:
        raise UnknownKindError(f"unknown kind byte {kind_byte:#04x}") from None
    end = HEADER_LEN + payload_len
    if len(data) < end:
        raise TruncatedFrameError(
            f"payload declares {payload_len} bytes, only {len(data) - HEADER_LEN} present"
        )
    return (
        Envelope(kind=kind, timestamp_ms=timestamp_ms, message_id=message_id,
                 payload=bytes(data[HEADER_LEN:end])),
        end,
    )


# ----------------------------------------------------------------------
# Topics

def split_topic(topic: str) -> list[str]:
    """Validate and split a concrete (wildcard-free) topic name."""
    segments = topic.split("/")
    for segment in segments:
        if not segment:
            raise TopicError(f"empty segment in topic {topic!r}")
        if "+" in segment or "#" in segment:
            raise TopicError(f"wildcard in topic {topic!r}; wildcards belong in filters")
    return segments


def split_filter(topic_filter: str) -> list[str]:
    """Validate and split a subscription filter.

    '+' stands for exactly one segment; '#' for any remaining segments and
    is only legal as the entire final segment.
    """
    segments = topic_filter.split("/")
    for index, segment in enumerate(segments):
        if not segment:
            raise TopicError(f"empty segment in filter {topic_filter!r}")
        if segment == "#":
            if index != len(segments) - 1:
                raise TopicError(f"'#' must be the final segment in {topic_filter!r}")
        elif segment != "+" and ("+" in segment or "#" in segment):
            raise TopicError(f"wildcard must stand alone in segment {segment!r}")
    return segments


def match_topic(topic_filter: str, topic: str) -> bool:
    """True when the filter matches the topic under MQTT wildcard semantics."""
    fsegs = split_filter(topic_filter)
    tsegs = split_topic(topic)
    index = 0
    for segment in fsegs:
        if segment == "#":
            return True
        if index >= len(tsegs):
            return False
        if segment != "+" and segment != tsegs[index]:
            return False
        index += 1
    return index == len(tsegs)


# ----------------------------------------------------------------------
# Broker

class Subscription:
    """Ordered, bounded stream of (topic, Envelope) for one consumer.

    When the buffer is full, the oldest entry is dropped and counted; a
    publisher is never blocked by a slow consumer.
    """

    def __init__(self, filters: tuple[str, ...], buffer: int):
        self.filters = filters
        self._buffer: deque[tuple[str, Envelope]] = deque()
        self._capacity = buffer
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def matches(self, topic: str) -> bool:
        return any(match_topic(f, topic) for f in self.filters)

    def _offer(self, topic: str, envelope: Envelope) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._buffer) >= self._capacity:
                self._buffer.popleft()
                self.dropped += 1
            self._buffer.append((topic, envelope))
            self._cond.notify()

    def get(self, timeout: float | None = None) -> tuple[str, Envelope] | None:
        """Next message, or None on timeout or after close drains."""
        with self._cond:
            if timeout is None:
                while not self._buffer and not self._closed:
                    self._cond.wait()
            elif not self._buffer and not self._closed:
                self._cond.wait(timeout)
            if self._buffer:
                return self._buffer.popleft()
            return None

    def pending(self) -> int:
        with self._cond:
            return len(self._buffer)

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __iter__(self) -> Iterator[tuple[str, Envelope]]:
        while True:
            item = self.get(timeout=0.2)
            if item is not None:
                yield item
            elif self._closed:
                return


class InProcessBroker:
    """Single-process pub/sub hub with MQTT-style topic filters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._subscriptions: list[Subscription] = []

    def subscribe(self, filters: str | Iterable[str], buffer: int = 64) -> Subscription:
        """Register a consumer for one or more filters sharing a single queue."""
        if isinstance(filters, str):
            filters = (filters,)
        else:
            filters = tuple(filters)
        if not filters:
            raise TopicError("at least one filter is required")
        if buffer < 1:
            raise ValueError(f"buffer must be positive, got {buffer}")
        for topic_filter in filters:
            split_filter(topic_filter)
        subscription = Subscription(filters, buffer)
        with self._lock:
            self._subscriptions.append(subscription)
        return subscription

    def unsubscribe(self, subscription: Subscription) -> None:
        subscription.close()
        with self._lock:
            if subscription in self._subscriptions:
                self._subscriptions.remove(subscription)

    def publish(self, topic: str, envelope: Envelope) -> int:
        """Deliver to every matching subscription; returns how many matched."""
        split_topic(topic)
        with self._lock:
            live = [s for s in self._subscriptions if not s.closed]
            self._subscriptions = live
            targets = [s for s in live if s.matches(topic)]
        for subscription in targets:
            subscription._offer(topic, envelope)
        return len(targets)


@dataclass
class EnvelopeFactory:
    """Stamps envelopes with a per-publisher message_id counter."""

    _next_id: int = 1
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def make(self, kind: Kind, payload: bytes, timestamp_ms: int) -> Envelope:
        with self._lock:
            message_id = self._next_id
            self._next_id = (self._next_id + 1) & 0xFFFFFFFF
        return Envelope(kind=kind, timestamp_ms=timestamp_ms,
                        message_id=message_id, payload=payload)
