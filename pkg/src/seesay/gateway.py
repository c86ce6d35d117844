"""Stand-in for the wearable camera/microphone attachment.

Three frame sources feed the bus: timed replay scenarios (the test and demo
vehicle), a live directory watched on a fixed capture cadence, and a TCP
listener speaking the envelope byte protocol a real device would use over
its radio link.
"""

from __future__ import annotations

import json
import logging
import random
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .bus import (
    MAGIC,
    TOPIC_DEVICE_AUDIO,
    TOPIC_DEVICE_IMAGE,
    TOPIC_EVENT,
    TOPIC_TRANSCRIPT,
    BadMagicError,
    Envelope,
    EnvelopeError,
    EnvelopeFactory,
    InProcessBroker,
    Kind,
    TruncatedFrameError,
    decode_envelope_prefix,
    encode_envelope,
)
from .store import content_digest

logger = logging.getLogger(__name__)

DEFAULT_GATEWAY_PORT = 7421

MIN_INTERVAL_MS = 100

# Streams are length-prefixed; anything claiming more than this is treated
# as a corrupt header so the decoder can resync instead of stalling.
MAX_FRAME_PAYLOAD = 1 << 26

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif")

EVENT_KINDS = ("frame", "utterance")


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioEvent:
    at_ms: int
    kind: str
    file: str


@dataclass
class ReplayScenario:
    root: Path
    name: str
    events: list[ScenarioEvent]

    def frame_events(self) -> list[ScenarioEvent]:
        return [e for e in self.events if e.kind == "frame"]

    def utterance_events(self) -> list[ScenarioEvent]:
        return [e for e in self.events if e.kind == "utterance"]


@dataclass(frozen=True)
class CaptureSchedule:
    interval_ms: int = 30000
    jitter_ms: int = 0

    def __post_init__(self):
        if self.interval_ms < MIN_INTERVAL_MS:
            raise ValueError(
                f"interval_ms must be >= {MIN_INTERVAL_MS}, got {self.interval_ms}"
            )
        if self.jitter_ms < 0:
            raise ValueError(f"jitter_ms must be >= 0, got {self.jitter_ms}")


@dataclass(frozen=True)
class ReplayReport:
    frames: int = 0
    utterances: int = 0


def frame_sidecar(path: Path) -> Path:
    return path.with_suffix(".desc.txt")


def utterance_sidecar(path: Path) -> Path:
    return path.with_suffix(".txt")


def load_scenario(directory: str | Path, require_sidecars: bool = True) -> ReplayScenario:
    """Load and eagerly validate a replay scenario from its manifest.

    Validation failures name the offending entry: a missing referenced file,
    events out of timestamp order, or a missing sidecar (frames need a
    ``<name>.desc.txt`` description, non-text utterances a ``<name>.txt``
    transcript; a ``.txt`` utterance is its own transcript).
    """
    root = Path(directory)
    manifest_path = root / "scenario.json"
    if not manifest_path.exists():
        raise ScenarioError(f"no scenario manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"{manifest_path}: invalid manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "events" not in manifest:
        raise ScenarioError(f"{manifest_path}: manifest must be an object with 'events'")
    name = manifest.get("name", root.name)
    raw_events = manifest["events"]
    if not isinstance(raw_events, list):
        raise ScenarioError(f"{manifest_path}: 'events' must be a list")

    events: list[ScenarioEvent] = []
    previous_at = None
    for index, raw in enumerate(raw_events):
        label = f"{manifest_path}: events[{index}]"
        if not isinstance(raw, dict):
            raise ScenarioError(f"{label}: must be an object")
        try:
            at_ms = raw["at_ms"]
            kind = raw["kind"]
            file_name = raw["file"]
        except KeyError as exc:
            raise ScenarioError(f"{label}: missing key {exc.args[0]!r}") from None
        if not isinstance(at_ms, int) or at_ms < 0:
            raise ScenarioError(f"{label}: at_ms must be a non-negative integer")
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"{label}: kind must be one of {EVENT_KINDS}, got {kind!r}")
        if previous_at is not None and at_ms < previous_at:
            raise ScenarioError(f"{label}: events not sorted by at_ms ({at_ms} < {previous_at})")
        previous_at = at_ms
        path = root / file_name
        if not path.exists():
            raise ScenarioError(f"{label}: referenced file {path} does not exist")
        if require_sidecars:
            if kind == "frame":
                sidecar = frame_sidecar(path)
                if not sidecar.exists():
                    raise ScenarioError(f"{label}: missing description sidecar {sidecar}")
            elif path.suffix != ".txt":
                sidecar = utterance_sidecar(path)
                if not sidecar.exists():
                    raise ScenarioError(f"{label}: missing transcript sidecar {sidecar}")
        events.append(ScenarioEvent(at_ms=at_ms, kind=kind, file=file_name))
    return ReplayScenario(root=root, name=name, events=events)


def scenario_corpus(scenario: ReplayScenario) -> tuple[dict[str, str], dict[str, str]]:
    """Sidecar texts keyed by content digest: (descriptions, transcripts)."""
    descriptions: dict[str, str] = {}
    transcripts: dict[str, str] = {}
    for event in scenario.events:
        path = scenario.root / event.file
        data = path.read_bytes()
        if event.kind == "frame":
            sidecar = frame_sidecar(path)
            if sidecar.exists():
                descriptions[content_digest(data)] = sidecar.read_text(encoding="utf-8").strip()
        elif path.suffix != ".txt":
            sidecar = utterance_sidecar(path)
            if sidecar.exists():
                transcripts[content_digest(data)] = sidecar.read_text(encoding="utf-8").strip()
    return descriptions, transcripts


def _normalize_speed(speed: float | str) -> float:
    if isinstance(speed, str):
        if speed != "max":
            raise ValueError(f"speed must be a positive number or 'max', got {speed!r}")
        return float("inf")
    if speed <= 0:
        raise ValueError(f"speed must be > 0, got {speed}")
    return float(speed)


def run_scenario(
    scenario: ReplayScenario,
    bus: InProcessBroker,
    speed: float | str = 1.0,
    factory: EnvelopeFactory | None = None,
    settle: Callable[[], object] | None = None,
) -> ReplayReport:
    """Publish a scenario's events on the canonical topics.

    Each event fires at ``at_ms / speed`` from the start; "max" collapses all
    waits. Frames go to the device image topic; ``.txt`` utterances bypass
    the transcriber (published as transcripts), audio utterances go to the
    device audio topic. When a ``settle`` callback is given it runs after
    every publish — at "max" speed the pipeline passes its quiesce here, so
    events are processed to completion in order and runs are reproducible.
    """
    rate = _normalize_speed(speed)
    factory = factory or EnvelopeFactory()
    start = time.monotonic()
    frames = 0
    utterances = 0
    for event in scenario.events:
        if rate != float("inf"):
            target = start + (event.at_ms / 1000.0) / rate
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        path = scenario.root / event.file
        payload = path.read_bytes()
        now_ms = int(time.time() * 1000)
        if event.kind == "frame":
            bus.publish(TOPIC_DEVICE_IMAGE, factory.make(Kind.IMAGE, payload, now_ms))
            frames += 1
        elif path.suffix == ".txt":
            text = payload.decode("utf-8").strip()
            bus.publish(TOPIC_TRANSCRIPT, factory.make(Kind.TEXT, text.encode("utf-8"), now_ms))
            utterances += 1
        else:
            bus.publish(TOPIC_DEVICE_AUDIO, factory.make(Kind.AUDIO, payload, now_ms))
            utterances += 1
        if settle is not None:
            settle()
    return ReplayReport(frames=frames, utterances=utterances)


def run_capture_loop(
    source_dir: str | Path,
    schedule: CaptureSchedule,
    bus: InProcessBroker,
    stop: threading.Event,
    dedupe: bool = True,
    factory: EnvelopeFactory | None = None,
    rng: random.Random | None = None,
) -> int:
    """Publish the newest image in ``source_dir`` every interval until stopped.

    Identical bytes to the previous publish are skipped unless dedupe is off
    (faithful mode stores every frame). Returns the number of frames
    published. The stop event is honored mid-sleep, well within one interval.
    """
    source = Path(source_dir)
    factory = factory or EnvelopeFactory()
    rng = rng or random.Random()
    interval_s = schedule.interval_ms / 1000.0
    half_jitter_s = (schedule.jitter_ms / 1000.0) / 2.0
    base = time.monotonic()
    tick = 0
    published = 0
    last_digest: str | None = None
    while not stop.is_set():
        tick += 1
        target = base + tick * interval_s
        if half_jitter_s:
            target += rng.uniform(-half_jitter_s, half_jitter_s)
        delay = target - time.monotonic()
        if delay > 0 and stop.wait(delay):
            break
        try:
            newest = _newest_image(source)
            if newest is None:
                continue
            data = newest.read_bytes()
        except OSError as exc:
            logger.warning("capture tick skipped: %s", exc)
            continue
        digest = content_digest(data)
        if dedupe and digest == last_digest:
            continue
        bus.publish(TOPIC_DEVICE_IMAGE, factory.make(Kind.IMAGE, data, int(time.time() * 1000)))
        last_digest = digest
        published += 1
    return published


def _newest_image(source: Path) -> Path | None:
    candidates = [
        p for p in source.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    if not candidates:
        return None
    return max(candidates, key=lambda p: p.stat().st_mtime_ns)


# ----------------------------------------------------------------------
# Stream framing (the byte protocol a real device speaks over TCP)

encode_device_frame = encode_envelope


def decode_device_frame(buffer: bytes) -> tuple[Envelope, int] | None:
    """Decode exactly one frame from the front of ``buffer``.

    Returns (envelope, bytes consumed), or None when the buffer holds only a
    prefix of a frame (read more and retry). A wrong magic raises BadMagic
    immediately — nothing past the 4 magic bytes is needed to know the
    stream needs resyncing.
    """
    if len(buffer) < len(MAGIC):
        if MAGIC.startswith(bytes(buffer)):
            return None
        raise BadMagicError(f"bad magic {bytes(buffer[:4])!r}")
    if bytes(buffer[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buffer[:4])!r}")
    try:
        return decode_envelope_prefix(bytes(buffer))
    except TruncatedFrameError:
        return None


class FrameDecoder:
    """Incremental decoder with resync across garbage in the stream.

    Feed arbitrary chunks; complete envelopes come back in order. On a bad
    header the buffer is scanned forward to the next magic occurrence, so a
    valid frame after garbage is always recovered.
    """

    def __init__(self, max_payload: int = MAX_FRAME_PAYLOAD):
        self._buffer = bytearray()
        self._max_payload = max_payload
        self.resyncs = 0

    def feed(self, chunk: bytes) -> list[Envelope]:
        self._buffer.extend(chunk)
        frames: list[Envelope] = []
        while True:
            try:
                decoded = decode_device_frame(self._buffer)
                if decoded is not None and len(decoded[0].payload) > self._max_payload:
                    raise EnvelopeError(
                        f"frame payload {len(decoded[0].payload)} exceeds cap"
                    )
            except EnvelopeError:
                if not self._resync():
                    break
                continue
            if decoded is None:
                # Guard against a corrupt header whose declared length would
                # stall the stream forever.
                if len(self._buffer) >= 22:
                    declared = int.from_bytes(self._buffer[18:22], "big")
                    if declared > self._max_payload:
                        if not self._resync():
                            break
                        continue
                break
            envelope, consumed = decoded
            frames.append(envelope)
            del self._buffer[:consumed]
        return frames

    def _resync(self) -> bool:
        """Drop bytes up to the next possible magic; False if none remains."""
        self.resyncs += 1
        position = bytes(self._buffer).find(MAGIC, 1)
        if position == -1:
            # Keep a tail that could still be a magic prefix.
            keep = min(len(MAGIC) - 1, len(self._buffer))
            tail = bytes(self._buffer[-keep:]) if keep else b""
            for offset in range(len(tail)):
                if MAGIC.startswith(tail[offset:]):
                    del self._buffer[: len(self._buffer) - (len(tail) - offset)]
                    return False
            self._buffer.clear()
            return False
        del self._buffer[:position]
        return True


_KIND_TOPICS = {
    Kind.IMAGE: TOPIC_DEVICE_IMAGE,
    Kind.AUDIO: TOPIC_DEVICE_AUDIO,
    Kind.TEXT: TOPIC_TRANSCRIPT,
    Kind.EVENT: TOPIC_EVENT,
}


class _DeviceLinkHandler(socketserver.BaseRequestHandler):
    def handle(self):
        decoder = FrameDecoder()
        bus: InProcessBroker = self.server.bus  # type: ignore[attr-defined]
        while True:
            try:
                chunk = self.request.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            for envelope in decoder.feed(chunk):
                bus.publish(_KIND_TOPICS[envelope.kind], envelope)


class DeviceLinkServer(socketserver.ThreadingTCPServer):
    """TCP listener relaying device envelope streams onto the bus."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bus: InProcessBroker, host: str = "127.0.0.1",
                 port: int = DEFAULT_GATEWAY_PORT):
        super().__init__((host, port), _DeviceLinkHandler)
        self.bus = bus
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self.serve_forever, name="device-link", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
