from __future__ import annotations

import json
import os
import socket
import threading
import time

import pytest

from seesay.bus import (
    TOPIC_DEVICE_AUDIO,
    TOPIC_DEVICE_IMAGE,
    TOPIC_TRANSCRIPT,
    BadMagicError,
    Envelope,
    EnvelopeFactory,
    InProcessBroker,
    Kind,
    encode_envelope,
)
from seesay.gateway import (
    CaptureSchedule,
    DeviceLinkServer,
    FrameDecoder,
    ScenarioError,
    decode_device_frame,
    load_scenario,
    run_capture_loop,
    run_scenario,
    scenario_corpus,
)


def write_scenario(root, events, name="test"):
    (root / "scenario.json").write_text(
        json.dumps({"name": name, "events": events}), encoding="utf-8"
    )


def add_frame(root, name, data=b"img", description="a scene"):
    (root / name).write_bytes(data)
    (root / name).with_suffix(".desc.txt").write_text(description, encoding="utf-8")


# ----------------------------------------------------------------------
# scenario loading

class TestLoadScenario:
    def test_kitchen_fixture_loads_in_order(self, kitchen_dir):
        scenario = load_scenario(kitchen_dir)
        assert scenario.name == "kitchen"
        assert len(scenario.events) == 7
        assert len(scenario.frame_events()) == 4
        assert len(scenario.utterance_events()) == 3
        times = [event.at_ms for event in scenario.events]
        assert times == sorted(times)

    def test_empty_events_is_valid(self, tmp_path):
        write_scenario(tmp_path, [])
        scenario = load_scenario(tmp_path)
        assert scenario.events == []
        report = run_scenario(scenario, InProcessBroker(), speed="max")
        assert (report.frames, report.utterances) == (0, 0)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ScenarioError, match="scenario.json"):
            load_scenario(tmp_path)

    def test_missing_referenced_file_names_path(self, tmp_path):
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "frame", "file": "ghost.png"}])
        with pytest.raises(ScenarioError, match="ghost.png"):
            load_scenario(tmp_path)

    def test_unsorted_events_rejected(self, tmp_path):
        add_frame(tmp_path, "a.png")
        add_frame(tmp_path, "b.png")
        write_scenario(tmp_path, [
            {"at_ms": 100, "kind": "frame", "file": "a.png"},
            {"at_ms": 50, "kind": "frame", "file": "b.png"},
        ])
        with pytest.raises(ScenarioError, match="not sorted"):
            load_scenario(tmp_path)

    def test_missing_description_sidecar_names_entry(self, tmp_path):
        (tmp_path / "bare.png").write_bytes(b"img")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "frame", "file": "bare.png"}])
        with pytest.raises(ScenarioError, match="bare.desc.txt"):
            load_scenario(tmp_path)

    def test_missing_transcript_sidecar_names_entry(self, tmp_path):
        (tmp_path / "ask.wav").write_bytes(b"wav")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "utterance", "file": "ask.wav"}])
        with pytest.raises(ScenarioError, match="ask.txt"):
            load_scenario(tmp_path)

    def test_text_utterance_is_its_own_transcript(self, tmp_path):
        (tmp_path / "ask.txt").write_text("Where is it?", encoding="utf-8")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "utterance", "file": "ask.txt"}])
        scenario = load_scenario(tmp_path)
        assert len(scenario.events) == 1

    def test_sidecar_check_can_be_skipped_for_remote_runs(self, tmp_path):
        (tmp_path / "bare.png").write_bytes(b"img")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "frame", "file": "bare.png"}])
        scenario = load_scenario(tmp_path, require_sidecars=False)
        assert len(scenario.events) == 1

    def test_bad_kind_rejected(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"img")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "video", "file": "x.png"}])
        with pytest.raises(ScenarioError, match="kind"):
            load_scenario(tmp_path)

    def test_corpus_maps_digests_to_sidecars(self, kitchen_scenario):
        descriptions, transcripts = scenario_corpus(kitchen_scenario)
        assert len(descriptions) == 4
        assert len(transcripts) == 3
        assert "A kitchen counter with a phone beside the sink." in descriptions.values()
        assert "Remember this person as Mary." in transcripts.values()


# ----------------------------------------------------------------------
# run_scenario

class TestRunScenario:
    def test_kitchen_report_counts(self, kitchen_scenario):
        broker = InProcessBroker()
        sub = broker.subscribe("seesay/#", buffer=64)
        report = run_scenario(kitchen_scenario, broker, speed="max")
        assert (report.frames, report.utterances) == (4, 3)
        received = []
        while (item := sub.get(timeout=0.1)) is not None:
            received.append(item)
        assert len(received) == 7
        image_topics = [t for t, _ in received if t == TOPIC_DEVICE_IMAGE]
        audio_topics = [t for t, _ in received if t == TOPIC_DEVICE_AUDIO]
        assert (len(image_topics), len(audio_topics)) == (4, 3)

    def test_payloads_match_files_and_ids_increase(self, kitchen_scenario):
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_DEVICE_IMAGE, buffer=16)
        run_scenario(kitchen_scenario, broker, speed="max")
        expected = [
            (kitchen_scenario.root / event.file).read_bytes()
            for event in kitchen_scenario.frame_events()
        ]
        received = []
        while (item := sub.get(timeout=0.1)) is not None:
            received.append(item[1])
        assert [envelope.payload for envelope in received] == expected
        ids = [envelope.message_id for envelope in received]
        assert ids == sorted(ids)

    def test_two_max_runs_publish_identical_sequences(self, kitchen_scenario):
        captures = []
        for _ in range(2):
            broker = InProcessBroker()
            sub = broker.subscribe("seesay/#", buffer=64)
            run_scenario(kitchen_scenario, broker, speed="max")
            sequence = []
            while (item := sub.get(timeout=0.1)) is not None:
                topic, envelope = item
                sequence.append((topic, envelope.message_id, envelope.payload))
            captures.append(sequence)
        assert captures[0] == captures[1]

    def test_text_utterances_publish_transcripts(self, tmp_path):
        (tmp_path / "ask.txt").write_text("Where is the mug?\n", encoding="utf-8")
        write_scenario(tmp_path, [{"at_ms": 0, "kind": "utterance", "file": "ask.txt"}])
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_TRANSCRIPT)
        run_scenario(load_scenario(tmp_path), broker, speed="max")
        topic, envelope = sub.get(timeout=1)
        assert envelope.kind is Kind.TEXT
        assert envelope.text() == "Where is the mug?"

    def test_speed_scales_event_spacing(self, tmp_path):
        for name in ("a.png", "b.png", "c.png"):
            add_frame(tmp_path, name)
        write_scenario(tmp_path, [
            {"at_ms": 0, "kind": "frame", "file": "a.png"},
            {"at_ms": 200, "kind": "frame", "file": "b.png"},
            {"at_ms": 400, "kind": "frame", "file": "c.png"},
        ])
        scenario = load_scenario(tmp_path)
        broker = InProcessBroker()
        start = time.monotonic()
        run_scenario(scenario, broker, speed=2.0)
        elapsed = time.monotonic() - start
        # 400 ms of scenario time at 2x is 200 ms of wall clock, +-20 ms per gap.
        assert 0.16 <= elapsed <= 0.32

    def test_settle_called_after_each_event(self, kitchen_scenario):
        calls = []
        run_scenario(
            kitchen_scenario, InProcessBroker(), speed="max",
            settle=lambda: calls.append(1),
        )
        assert len(calls) == 7

    def test_invalid_speed_rejected(self, kitchen_scenario):
        with pytest.raises(ValueError):
            run_scenario(kitchen_scenario, InProcessBroker(), speed=0)
        with pytest.raises(ValueError):
            run_scenario(kitchen_scenario, InProcessBroker(), speed="fast")


# ----------------------------------------------------------------------
# capture loop

class TestCaptureLoop:
    def test_schedule_floor(self):
        with pytest.raises(ValueError):
            CaptureSchedule(interval_ms=50)
        with pytest.raises(ValueError):
            CaptureSchedule(interval_ms=200, jitter_ms=-1)

    def test_unchanged_directory_dedupes(self, tmp_path):
        (tmp_path / "scene.png").write_bytes(b"static scene")
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_DEVICE_IMAGE, buffer=16)
        stop = threading.Event()
        result: list[int] = []

        def run():
            result.append(run_capture_loop(
                tmp_path, CaptureSchedule(interval_ms=100), broker, stop
            ))

        thread = threading.Thread(target=run)
        thread.start()
        time.sleep(0.45)
        stop.set()
        thread.join(timeout=2)
        assert result == [1]
        assert sub.pending() == 1

    def test_faithful_mode_publishes_every_tick(self, tmp_path):
        (tmp_path / "scene.png").write_bytes(b"static scene")
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_DEVICE_IMAGE, buffer=64)
        stop = threading.Event()
        counts: list[int] = []

        def run():
            counts.append(run_capture_loop(
                tmp_path, CaptureSchedule(interval_ms=100), broker, stop, dedupe=False
            ))

        thread = threading.Thread(target=run)
        thread.start()
        time.sleep(0.45)
        stop.set()
        thread.join(timeout=2)
        assert counts[0] >= 3
        assert sub.pending() == counts[0]

    def test_changed_bytes_republish(self, tmp_path):
        image = tmp_path / "scene.png"
        image.write_bytes(b"first")
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_DEVICE_IMAGE, buffer=16)
        stop = threading.Event()
        thread = threading.Thread(
            target=run_capture_loop,
            args=(tmp_path, CaptureSchedule(interval_ms=120), broker, stop),
        )
        thread.start()
        time.sleep(0.2)
        image.write_bytes(b"second")
        time.sleep(0.25)
        stop.set()
        thread.join(timeout=2)
        payloads = []
        while (item := sub.get(timeout=0.05)) is not None:
            payloads.append(item[1].payload)
        assert payloads[:2] == [b"first", b"second"]

    def test_stop_signal_honored_during_sleep(self, tmp_path):
        (tmp_path / "scene.png").write_bytes(b"x")
        broker = InProcessBroker()
        stop = threading.Event()
        finished = threading.Event()

        def run():
            run_capture_loop(tmp_path, CaptureSchedule(interval_ms=5000), broker, stop)
            finished.set()

        thread = threading.Thread(target=run)
        thread.start()
        time.sleep(0.1)
        stop.set()
        assert finished.wait(timeout=1.0), "loop did not exit promptly on stop"
        thread.join(timeout=1)

    def test_jitter_keeps_gaps_within_declared_band(self, tmp_path):
        import random as random_module

        (tmp_path / "scene.png").write_bytes(b"x")
        broker = InProcessBroker()
        stop = threading.Event()
        times: list[float] = []
        original = broker.publish

        def timed(topic, envelope):
            times.append(time.monotonic())
            return original(topic, envelope)

        broker.publish = timed
        thread = threading.Thread(
            target=run_capture_loop,
            args=(tmp_path, CaptureSchedule(interval_ms=150, jitter_ms=60), broker, stop),
            kwargs={"dedupe": False, "rng": random_module.Random(5)},
        )
        thread.start()
        deadline = time.monotonic() + 5
        while len(times) < 6 and time.monotonic() < deadline:
            time.sleep(0.02)
        stop.set()
        thread.join(timeout=2)
        gaps = [(b - a) * 1000 for a, b in zip(times, times[1:])]
        assert gaps, "no gaps observed"
        for gap in gaps:
            assert 150 - 60 - 10 <= gap <= 150 + 60 + 10, f"gap {gap:.1f}ms out of band"

    def test_empty_directory_produces_no_publishes(self, tmp_path):
        broker = InProcessBroker()
        sub = broker.subscribe(TOPIC_DEVICE_IMAGE)
        stop = threading.Event()
        thread = threading.Thread(
            target=run_capture_loop,
            args=(tmp_path, CaptureSchedule(interval_ms=100), broker, stop),
        )
        thread.start()
        time.sleep(0.25)
        stop.set()
        thread.join(timeout=2)
        assert sub.pending() == 0


# ----------------------------------------------------------------------
# stream framing

def frame_bytes(payload: bytes, message_id: int = 1) -> bytes:
    return encode_envelope(Envelope(Kind.IMAGE, 7, message_id, payload))


class TestStreamFraming:
    def test_two_concatenated_frames_decode_with_correct_boundary(self):
        stream = frame_bytes(b"one", 1) + frame_bytes(b"two", 2)
        first = decode_device_frame(stream)
        assert first is not None
        envelope, consumed = first
        assert envelope.payload == b"one"
        second = decode_device_frame(stream[consumed:])
        assert second is not None
        assert second[0].payload == b"two"
        assert consumed + second[1] == len(stream)

    def test_partial_header_is_continuation_signal(self):
        assert decode_device_frame(frame_bytes(b"data")[:10]) is None
        assert decode_device_frame(b"SS") is None
        assert decode_device_frame(b"") is None

    def test_partial_payload_is_continuation_signal(self):
        frame = frame_bytes(b"payload")
        assert decode_device_frame(frame[:-1]) is None

    def test_garbage_prefix_raises_bad_magic_immediately(self):
        with pytest.raises(BadMagicError):
            decode_device_frame(b"XXXX" + frame_bytes(b"data"))
        with pytest.raises(BadMagicError):
            decode_device_frame(b"QQ")

    def test_decoder_reassembles_split_frames(self):
        stream = frame_bytes(b"alpha", 1) + frame_bytes(b"beta", 2)
        decoder = FrameDecoder()
        received = []
        for i in range(0, len(stream), 7):
            received.extend(decoder.feed(stream[i:i + 7]))
        assert [envelope.payload for envelope in received] == [b"alpha", b"beta"]

    def test_decoder_resyncs_after_garbage(self):
        decoder = FrameDecoder()
        received = decoder.feed(b"\x01\x02garbage!" + frame_bytes(b"recovered"))
        assert [envelope.payload for envelope in received] == [b"recovered"]
        assert decoder.resyncs >= 1

    def test_decoder_recovers_after_random_garbage(self):
        rng = __import__("random").Random(1234)
        for _ in range(100):
            garbage = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 64)))
            decoder = FrameDecoder()
            received = decoder.feed(garbage + frame_bytes(b"needle"))
            assert any(envelope.payload == b"needle" for envelope in received)

    def test_decoder_skips_oversized_declared_payload(self):
        header = bytearray(frame_bytes(b"x"))
        header[18:22] = (1 << 30).to_bytes(4, "big")  # absurd declared length
        decoder = FrameDecoder(max_payload=1024)
        assert decoder.feed(bytes(header)) == []
        received = decoder.feed(frame_bytes(b"after"))
        assert [envelope.payload for envelope in received] == [b"after"]


class TestDeviceLinkServer:
    def test_streamed_frames_reach_the_bus(self):
        broker = InProcessBroker()
        image_sub = broker.subscribe(TOPIC_DEVICE_IMAGE)
        text_sub = broker.subscribe(TOPIC_TRANSCRIPT)
        server = DeviceLinkServer(broker, port=0)
        server.start()
        try:
            with socket.create_connection(("127.0.0.1", server.port), timeout=5) as conn:
                factory = EnvelopeFactory()
                conn.sendall(b"\xde\xad")  # garbage first: the link must resync
                conn.sendall(encode_envelope(factory.make(Kind.IMAGE, b"framebytes", 1)))
                conn.sendall(encode_envelope(factory.make(Kind.TEXT, b"hello", 2)))
            topic, image_envelope = image_sub.get(timeout=2)
            assert image_envelope.payload == b"framebytes"
            topic, text_envelope = text_sub.get(timeout=2)
            assert text_envelope.payload == b"hello"
        finally:
            server.stop()
