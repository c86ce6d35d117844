"""Optional relay between the in-process broker and an external MQTT broker.

The in-process broker is the default deployment; this bridge is the seam
for splitting the system across hosts. Envelope payloads travel as MQTT
message payloads on identical topic names (QoS 1), with the envelope kind
re-derived from the canonical topic on the way back in. Requires the
``mqtt`` extra (paho-mqtt); construction fails with a clear message when it
is missing.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque

from .bus import (
    TOPIC_ANSWER_AUDIO,
    TOPIC_ANSWER_TEXT,
    TOPIC_DESCRIPTION,
    TOPIC_DEVICE_AUDIO,
    TOPIC_DEVICE_IMAGE,
    TOPIC_EVENT,
    TOPIC_TRANSCRIPT,
    EnvelopeFactory,
    InProcessBroker,
    Kind,
)

logger = logging.getLogger(__name__)

_TOPIC_KINDS = {
    TOPIC_DEVICE_IMAGE: Kind.IMAGE,
    TOPIC_DEVICE_AUDIO: Kind.AUDIO,
    TOPIC_TRANSCRIPT: Kind.TEXT,
    TOPIC_DESCRIPTION: Kind.TEXT,
    TOPIC_ANSWER_TEXT: Kind.TEXT,
    TOPIC_ANSWER_AUDIO: Kind.AUDIO,
    TOPIC_EVENT: Kind.EVENT,
}

_SEEN_CAP = 1024


def _default_client():
    try:
        import paho.mqtt.client as mqtt
    except ImportError as exc:
        raise RuntimeError(
            "the MQTT bridge needs paho-mqtt; install the 'mqtt' extra"
        ) from exc
    return mqtt.Client()


class MqttBridge:
    """Relays between in-process topics and an external MQTT 3.1.1 broker.

    Enable one direction per deployment (or disjoint topic sets) to avoid
    echo loops; redelivered inbound messages are suppressed by a bounded
    recently-seen cache, matching the at-least-once contract.
    """

    def __init__(
        self,
        broker: InProcessBroker,
        host: str,
        port: int = 1883,
        outbound: tuple[str, ...] = ("seesay/pipeline/#",),
        inbound: tuple[str, ...] = (),
        client=None,
    ):
        self.broker = broker
        self.host = host
        self.port = port
        self.outbound = outbound
        self.inbound = inbound
        self._client = client if client is not None else _default_client()
        self._factory = EnvelopeFactory()
        self._seen: deque[tuple[str, bytes]] = deque(maxlen=_SEEN_CAP)
        self._subscription = None
        self._thread: threading.Thread | None = None
        self._stopping = threading.Event()

    def start(self) -> None:
        self._client.connect(self.host, self.port)
        for topic_filter in self.inbound:
            self._client.subscribe(topic_filter, qos=1)
        self._client.on_message = self._on_external_message
        if hasattr(self._client, "loop_start"):
            self._client.loop_start()
        if self.outbound:
            self._subscription = self.broker.subscribe(self.outbound, buffer=256)
            self._thread = threading.Thread(
                target=self._relay_outbound, name="mqtt-bridge", daemon=True
            )
            self._thread.start()

    def stop(self) -> None:
        self._stopping.set()
        if self._subscription is not None:
            self.broker.unsubscribe(self._subscription)
        if self._thread is not None:
            self._thread.join(timeout=5)
        if hasattr(self._client, "loop_stop"):
            self._client.loop_stop()
        if hasattr(self._client, "disconnect"):
            self._client.disconnect()

    def _relay_outbound(self) -> None:
        while not self._stopping.is_set():
            item = self._subscription.get(timeout=0.2)
            if item is None:
                continue
            topic, envelope = item
            self._client.publish(topic, payload=envelope.payload, qos=1)

    def _on_external_message(self, _client, _userdata, message) -> None:
        topic = message.topic
        payload = bytes(message.payload)
        key = (topic, payload)
        if key in self._seen:
            logger.debug("duplicate inbound MQTT message on %s dropped", topic)
            return
        self._seen.append(key)
        kind = _TOPIC_KINDS.get(topic)
        if kind is None:
            logger.warning("inbound MQTT message on unmapped topic %s dropped", topic)
            return
        self.broker.publish(topic, self._factory.make(kind, payload, int(time.time() * 1000)))
