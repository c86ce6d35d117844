from __future__ import annotations

import time
from types import SimpleNamespace

from seesay.bridge import MqttBridge
from seesay.bus import (
    TOPIC_ANSWER_TEXT,
    TOPIC_DEVICE_IMAGE,
    Envelope,
    InProcessBroker,
    Kind,
)


class FakeMqttClient:
    """Just enough of the paho surface for the relay logic."""

    def __init__(self):
        self.published: list[tuple[str, bytes, int]] = []
        self.subscriptions: list[tuple[str, int]] = []
        self.connected_to = None
        self.on_message = None

    def connect(self, host, port):
        self.connected_to = (host, port)

    def subscribe(self, topic, qos=0):
        self.subscriptions.append((topic, qos))

    def publish(self, topic, payload=None, qos=0):
        self.published.append((topic, bytes(payload), qos))

    def disconnect(self):
        self.connected_to = None

    def deliver(self, topic, payload: bytes):
        self.on_message(self, None, SimpleNamespace(topic=topic, payload=payload))


def wait_until(predicate, timeout=2.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


def test_outbound_relay_publishes_envelope_payloads_at_qos1():
    broker = InProcessBroker()
    client = FakeMqttClient()
    bridge = MqttBridge(broker, "mqtt.local", outbound=("seesay/pipeline/#",), client=client)
    bridge.start()
    try:
        broker.publish(TOPIC_ANSWER_TEXT, Envelope(Kind.TEXT, 1, 1, b"an answer"))
        assert wait_until(lambda: client.published)
        topic, payload, qos = client.published[0]
        assert topic == TOPIC_ANSWER_TEXT
        assert payload == b"an answer"
        assert qos == 1
    finally:
        bridge.stop()
    assert client.connected_to is None


def test_inbound_relay_wraps_payload_with_topic_kind():
    broker = InProcessBroker()
    sub = broker.subscribe(TOPIC_DEVICE_IMAGE)
    client = FakeMqttClient()
    bridge = MqttBridge(
        broker, "mqtt.local", outbound=(), inbound=("seesay/device/#",), client=client
    )
    bridge.start()
    try:
        assert client.subscriptions == [("seesay/device/#", 1)]
        client.deliver(TOPIC_DEVICE_IMAGE, b"framebytes")
        item = sub.get(timeout=1)
        assert item is not None
        topic, envelope = item
        assert envelope.kind is Kind.IMAGE
        assert envelope.payload == b"framebytes"
    finally:
        bridge.stop()


def test_duplicate_inbound_deliveries_suppressed():
    broker = InProcessBroker()
    sub = broker.subscribe(TOPIC_DEVICE_IMAGE)
    client = FakeMqttClient()
    bridge = MqttBridge(broker, "mqtt.local", outbound=(), inbound=("seesay/#",), client=client)
    bridge.start()
    try:
        client.deliver(TOPIC_DEVICE_IMAGE, b"same")
        client.deliver(TOPIC_DEVICE_IMAGE, b"same")
        assert sub.get(timeout=1) is not None
        assert sub.get(timeout=0.2) is None
    finally:
        bridge.stop()


def test_unmapped_inbound_topic_dropped():
    broker = InProcessBroker()
    sub = broker.subscribe("seesay/#", buffer=8)
    client = FakeMqttClient()
    bridge = MqttBridge(broker, "mqtt.local", outbound=(), inbound=("#",), client=client)
    bridge.start()
    try:
        client.deliver("other/system/topic", b"noise")
        assert sub.get(timeout=0.2) is None
    finally:
        bridge.stop()
