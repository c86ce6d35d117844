"""Composition root: gateway topics in, observation store and routed answers
out, with an HTTP/SSE API on top.

One process hosts the broker, the ingestion worker (describe -> embed ->
store), the utterance worker (transcribe -> route -> answer -> synthesize),
the device TCP listener, and the HTTP server the console talks to. The
ingestion and query paths share only the store, which takes care of its own
reader/writer discipline.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import queue
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .adapters import (
    AdapterSet,
    AudioClip,
    DescriptionUnavailable,
    MalformedAudioError,
    SynthesisUnavailable,
    TranscriptionUnavailable,
)
from .bus import (
    TOPIC_ANSWER_AUDIO,
    TOPIC_ANSWER_TEXT,
    TOPIC_DESCRIPTION,
    TOPIC_DEVICE_AUDIO,
    TOPIC_DEVICE_IMAGE,
    TOPIC_TRANSCRIPT,
    EnvelopeFactory,
    InProcessBroker,
    Kind,
)
from .config import ServiceConfig
from .control import (
    AnswerResult,
    ControlCenter,
    QueryRoute,
    SessionState,
    TraceLog,
    annotation_text,
    starts_with_remember,
)
from .gateway import (
    DeviceLinkServer,
    ReplayReport,
    ReplayScenario,
    run_capture_loop,
    run_scenario,
    scenario_corpus,
)
from .store import CorruptLogError, MemoryStore, Observation, content_digest

logger = logging.getLogger(__name__)

PENDING_DESCRIPTION = "(description pending)"
DESCRIBE_PROMPT = "Describe this scene for a blind user in one or two sentences."
DEVICE_SESSION = "device"

ANSWER_AUDIO_CAP = 256
EVENT_QUEUE_CAP = 256
SHUTDOWN_DEADLINE_S = 5.0


class ServiceError(Exception):
    pass


def timeline_entry(observation: Observation) -> dict:
    """API projection of an observation; embeddings never cross the API."""
    return {
        "id": observation.id,
        "timestamp_ms": observation.timestamp_ms,
        "description": observation.description,
        "annotations": list(observation.annotations),
        "image": observation.image_ref is not None,
        "pending": observation.pending,
    }


class EventHub:
    """Fan-out of pipeline events to SSE subscribers; slow clients lose
    oldest events rather than ever blocking the pipeline."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queues: list[queue.Queue] = []

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=EVENT_QUEUE_CAP)
        with self._lock:
            self._queues.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._queues:
                self._queues.remove(q)

    def emit(self, event_type: str, data: dict) -> None:
        event = (event_type, data)
        with self._lock:
            targets = list(self._queues)
        for q in targets:
            try:
                q.put_nowait(event)
            except queue.Full:
                try:
                    q.get_nowait()
                except queue.Empty:
                    pass
                try:
                    q.put_nowait(event)
                except queue.Full:
                    pass


@dataclass
class ProcessedUtterance:
    result: AnswerResult
    clip: AudioClip | None
    answer_id: int
    timings_ms: dict[str, float] = field(default_factory=dict)


class Pipeline:
    """Everything between the bus topics and the API surface."""

    def __init__(
        self,
        config: ServiceConfig,
        adapters: AdapterSet | None = None,
        bus: InProcessBroker | None = None,
    ):
        self.config = config
        self.bus = bus or InProcessBroker()
        self.adapters = adapters or AdapterSet.from_configs(config.adapters, dim=config.dim)
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = MemoryStore.load(config.data_dir, dim=config.dim)
        self.trace = TraceLog(config.data_dir / "trace.jsonl")
        self.control = ControlCenter(
            self.store,
            self.adapters,
            tau=config.tau,
            sentences=config.sentences,
            escalation_phrases=config.escalation_phrases,
            templates_dir=config.templates_dir,
            trace=self.trace,
        )
        self.events = EventHub()
        self._factory = EnvelopeFactory()
        self._sessions: dict[str, tuple[SessionState, threading.Lock]] = {}
        self._sessions_lock = threading.Lock()
        self._answers: dict[int, AudioClip] = {}
        self._answers_lock = threading.Lock()
        self._next_answer_id = 1
        self._last_ingest_digest: str | None = None
        self._ingest_lock = threading.Lock()
        self._active = 0
        self._active_cond = threading.Condition()
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self._subscriptions = []

    # ------------------------------------------------------------------
    # Ingestion path

    def ingest_frame(self, image_bytes: bytes, timestamp_ms: int) -> int | None:
        """Describe, embed, and store one frame; None when deduplicated.

        A description outage degrades to a flagged placeholder with a zero
        embedding (memory continuity beats completeness); such observations
        are excluded from retrieval until re-described.
        """
        if not image_bytes:
            raise ValueError("image bytes must be non-empty")
        digest = content_digest(image_bytes)
        with self._ingest_lock:
            if not self.config.faithful_mode and digest == self._last_ingest_digest:
                return None
            self._last_ingest_digest = digest
        try:
            description = self.adapters.describer.describe_image(image_bytes, DESCRIBE_PROMPT)
            embedding = self.adapters.embedder.embed(description)
        except DescriptionUnavailable as exc:
            logger.warning("description unavailable, storing flagged frame: %s", exc)
            description = PENDING_DESCRIPTION
            embedding = self.adapters.embedder.embed("")
        observation_id = self.store.insert(description, image_bytes, timestamp_ms, embedding)
        self.bus.publish(
            TOPIC_DESCRIPTION,
            self._factory.make(Kind.TEXT, description.encode("utf-8"), timestamp_ms),
        )
        self.events.emit("ingest", {"entry": timeline_entry(self.store.get(observation_id))})
        return observation_id

    # ------------------------------------------------------------------
    # Query path

    def session(self, session_id: str) -> tuple[SessionState, threading.Lock]:
        with self._sessions_lock:
            if session_id not in self._sessions:
                self._sessions[session_id] = (SessionState(session_id), threading.Lock())
            return self._sessions[session_id]

    def process_utterance(
        self,
        session_id: str,
        text: str | None = None,
        audio: AudioClip | None = None,
    ) -> ProcessedUtterance:
        """Transcribe (if audio), route, answer, and synthesize speech.

        Transcription failure answers with the configured apology; an empty
        transcript is a no-op answer; synthesis failure still returns the
        text answer. The answer text and audio are published on their topics
        and the full trace goes out as an SSE event.
        """
        if (text is None) == (audio is None):
            raise ValueError("provide exactly one of text or audio")
        timings: dict[str, float] = {}
        started = time.monotonic()
        notes_result: AnswerResult | None = None
        if audio is not None:
            t0 = time.monotonic()
            try:
                text = self.adapters.transcriber.transcribe(audio)
            except (MalformedAudioError, TranscriptionUnavailable) as exc:
                notes_result = AnswerResult(
                    route=QueryRoute.SIMPLE,
                    answer_text=self.control.sentences["apology"],
                    notes=[f"transcription failed: {exc}"],
                )
            timings["transcribe_ms"] = (time.monotonic() - t0) * 1000.0

        if notes_result is not None:
            result = notes_result
        elif not text or not text.strip():
            result = AnswerResult(
                route=QueryRoute.SIMPLE,
                answer_text=self.control.sentences["didnt_catch"],
                notes=["empty utterance"],
            )
        else:
            session, lock = self.session(session_id)
            t0 = time.monotonic()
            with lock:  # one in-flight query per session, FIFO
                result = self.control.handle_query(session, text.strip())
            timings["handle_ms"] = (time.monotonic() - t0) * 1000.0

        clip: AudioClip | None = None
        t0 = time.monotonic()
        try:
            clip = self.adapters.synthesizer.synthesize(result.answer_text)
        except SynthesisUnavailable as exc:
            result.notes.append(f"synthesis failed: {exc}")
        timings["synthesize_ms"] = (time.monotonic() - t0) * 1000.0
        timings["total_ms"] = (time.monotonic() - started) * 1000.0

        with self._answers_lock:
            answer_id = self._next_answer_id
            self._next_answer_id += 1
            if clip is not None:
                self._answers[answer_id] = clip
                while len(self._answers) > ANSWER_AUDIO_CAP:
                    self._answers.pop(next(iter(self._answers)))

        now_ms = int(time.time() * 1000)
        self.bus.publish(
            TOPIC_ANSWER_TEXT,
            self._factory.make(Kind.TEXT, result.answer_text.encode("utf-8"), now_ms),
        )
        if clip is not None:
            self.bus.publish(
                TOPIC_ANSWER_AUDIO, self._factory.make(Kind.AUDIO, clip.samples, now_ms)
            )
        self.events.emit(
            "answer",
            {
                "session_id": session_id,
                "utterance": text,
                "answer_id": answer_id,
                "audio": clip is not None,
                "result": result.to_dict(),
                "timings_ms": {k: round(v, 3) for k, v in timings.items()},
            },
        )
        return ProcessedUtterance(result=result, clip=clip, answer_id=answer_id,
                                  timings_ms=timings)

    def annotate(self, session_id: str, text: str) -> AnswerResult:
        """Apply annotation text (with or without a leading "remember")."""
        session, lock = self.session(session_id)
        annotation = annotation_text(text) if starts_with_remember(text) else text.strip()
        with lock:
            result = self.control.apply_annotation_text(session, annotation)
        if result.retrieved_id is not None:
            self.events.emit(
                "annotate", {"entry": timeline_entry(self.store.get(result.retrieved_id))}
            )
        return result

    def answer_audio(self, answer_id: int) -> AudioClip | None:
        with self._answers_lock:
            return self._answers.get(answer_id)

    def timeline(self, limit: int | None = None) -> list[dict]:
        return [timeline_entry(o) for o in self.store.recent(limit)]

    # ------------------------------------------------------------------
    # Workers

    def start_workers(self) -> None:
        image_sub = self.bus.subscribe(TOPIC_DEVICE_IMAGE, buffer=256)
        utterance_sub = self.bus.subscribe((TOPIC_DEVICE_AUDIO, TOPIC_TRANSCRIPT), buffer=256)
        self._subscriptions = [image_sub, utterance_sub]
        self._threads = [
            threading.Thread(target=self._image_worker, args=(image_sub,),
                             name="ingest-worker", daemon=True),
            threading.Thread(target=self._utterance_worker, args=(utterance_sub,),
                             name="utterance-worker", daemon=True),
        ]
        for thread in self._threads:
            thread.start()

    def _image_worker(self, sub) -> None:
        while not self._stopping.is_set():
            item = sub.get(timeout=0.2)
            if item is None:
                continue
            _, envelope = item
            with self._active_cond:
                self._active += 1
            try:
                self.ingest_frame(envelope.payload, envelope.timestamp_ms)
            except Exception:
                logger.exception("frame ingestion failed")
            finally:
                with self._active_cond:
                    self._active -= 1
                    self._active_cond.notify_all()

    def _utterance_worker(self, sub) -> None:
        while not self._stopping.is_set():
            item = sub.get(timeout=0.2)
            if item is None:
                continue
            topic, envelope = item
            with self._active_cond:
                self._active += 1
            try:
                if envelope.kind == Kind.AUDIO:
                    self.process_utterance(DEVICE_SESSION, audio=AudioClip(samples=envelope.payload))
                else:
                    self.process_utterance(DEVICE_SESSION, text=envelope.text())
            except Exception:
                logger.exception("utterance processing failed")
            finally:
                with self._active_cond:
                    self._active -= 1
                    self._active_cond.notify_all()

    def quiesce(self, timeout: float = 10.0) -> bool:
        """Wait until worker queues are empty and no event is in flight.

        Idle must hold across two consecutive checks to close the tiny
        window between a worker dequeuing an item and marking itself active.
        """
        deadline = time.monotonic() + timeout
        stable = 0
        while time.monotonic() < deadline:
            pending = sum(s.pending() for s in self._subscriptions)
            with self._active_cond:
                active = self._active
            if pending == 0 and active == 0:
                stable += 1
                if stable >= 2:
                    return True
            else:
                stable = 0
            time.sleep(0.002)
        return False

    def replay(self, scenario: ReplayScenario, speed: float | str = "max") -> ReplayReport:
        """Feed a scenario through the bus, settling between events at "max".

        Sidecar descriptions/transcripts are registered into the mock
        adapters first, so replays are self-contained.
        """
        if not self._threads:
            raise RuntimeError("start_workers() before replaying into this pipeline")
        descriptions, transcripts = scenario_corpus(scenario)
        self.adapters.register_corpus(descriptions, transcripts)
        report = run_scenario(scenario, self.bus, speed=speed, settle=self._settle_for(speed))
        self.quiesce()
        return report

    def _settle_for(self, speed: float | str):
        if speed == "max" or speed == float("inf"):
            return lambda: self.quiesce()
        return None

    def stop(self, timeout: float = SHUTDOWN_DEADLINE_S) -> None:
        """Drain in-flight work, then stop workers and flush state."""
        self.quiesce(timeout=timeout)
        self._stopping.set()
        for sub in self._subscriptions:
            self.bus.unsubscribe(sub)
        deadline = time.monotonic() + timeout
        for thread in self._threads:
            thread.join(timeout=max(0.0, deadline - time.monotonic()))


# ----------------------------------------------------------------------
# HTTP layer

_IMAGE_SIGNATURES = (
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8", "image/jpeg"),
    (b"GIF87a", "image/gif"),
    (b"GIF89a", "image/gif"),
    (b"BM", "image/bmp"),
)


def _sniff_image_type(data: bytes) -> str:
    for signature, content_type in _IMAGE_SIGNATURES:
        if data.startswith(signature):
            return content_type
    return "application/octet-stream"


class _ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "ApiServer"

    # -- plumbing ------------------------------------------------------

    def log_message(self, fmt, *args):
        logger.debug("http: " + fmt, *args)

    def _send_json(self, code: int, payload) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, code: int, content_type: str, body: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, code: int, message: str) -> None:
        self._send_json(code, {"error": message})

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict | None:
        try:
            data = json.loads(self._body().decode("utf-8") or "{}")
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._fail(400, "request body must be valid JSON")
            return None
        if not isinstance(data, dict):
            self._fail(400, "request body must be a JSON object")
            return None
        return data

    # -- routes --------------------------------------------------------

    def do_GET(self):
        pipeline = self.server.pipeline
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if url.path == "/api/health":
                self._send_json(200, {"status": "ok", "observations": len(pipeline.store)})
            elif url.path == "/api/timeline":
                params = parse_qs(url.query)
                limit = None
                if "limit" in params:
                    try:
                        limit = max(0, int(params["limit"][0]))
                    except ValueError:
                        return self._fail(400, "limit must be an integer")
                self._send_json(200, pipeline.timeline(limit))
            elif len(parts) == 4 and parts[:2] == ["api", "observations"] and parts[3] == "image":
                self._serve_observation_image(parts[2])
            elif len(parts) == 4 and parts[:2] == ["api", "answers"] and parts[3] == "audio":
                self._serve_answer_audio(parts[2])
            elif url.path == "/api/events":
                self._serve_events()
            elif parts[:1] == ["console"] or url.path == "/":
                self._serve_static(parts[1:] if parts[:1] == ["console"] else [])
            else:
                self._fail(404, f"no route for GET {url.path}")
        except (BrokenPipeError, ConnectionResetError):
            pass

    def do_POST(self):
        pipeline = self.server.pipeline
        url = urlparse(self.path)
        try:
            if url.path == "/api/query":
                data = self._json_body()
                if data is None:
                    return
                text = data.get("text")
                if not isinstance(text, str):
                    return self._fail(400, "field 'text' (string) is required")
                session_id = data.get("session_id") or "default"
                processed = pipeline.process_utterance(session_id, text=text)
                self._send_json(200, _processed_payload(session_id, processed))
            elif url.path == "/api/utterance":
                body = self._body()
                if not body:
                    return self._fail(400, "request body must be a WAV clip")
                session_id = self.headers.get("X-Session-Id") or "default"
                processed = pipeline.process_utterance(
                    session_id, audio=AudioClip(samples=body)
                )
                self._send_json(200, _processed_payload(session_id, processed))
            elif url.path == "/api/frames":
                body = self._body()
                if not body:
                    return self._fail(400, "request body must be image bytes")
                observation_id = pipeline.ingest_frame(body, int(time.time() * 1000))
                self._send_json(200, {"observation_id": observation_id})
            elif url.path == "/api/annotate":
                data = self._json_body()
                if data is None:
                    return
                text = data.get("text")
                if not isinstance(text, str) or not text.strip():
                    return self._fail(400, "field 'text' (non-empty string) is required")
                session_id = data.get("session_id") or "default"
                result = pipeline.annotate(session_id, text)
                if result.retrieved_id is None:
                    return self._fail(409, result.answer_text)
                self._send_json(200, {
                    "route": result.route.value,
                    "answer_text": result.answer_text,
                    "observation_id": result.retrieved_id,
                })
            else:
                self._fail(404, f"no route for POST {url.path}")
        except (BrokenPipeError, ConnectionResetError):
            pass

    # -- route bodies ----------------------------------------------------

    def _serve_observation_image(self, raw_id: str) -> None:
        try:
            observation_id = int(raw_id)
        except ValueError:
            return self._fail(400, "observation id must be an integer")
        observation = self.server.pipeline.store.get(observation_id)
        if observation is None or observation.image_ref is None:
            return self._fail(404, f"no image for observation {observation_id}")
        data = self.server.pipeline.store.image_bytes(observation.image_ref)
        if data is None:
            return self._fail(404, f"image bytes missing for observation {observation_id}")
        self._send_bytes(200, _sniff_image_type(data), data)

    def _serve_answer_audio(self, raw_id: str) -> None:
        try:
            answer_id = int(raw_id)
        except ValueError:
            return self._fail(400, "answer id must be an integer")
        clip = self.server.pipeline.answer_audio(answer_id)
        if clip is None:
            return self._fail(404, f"no audio for answer {answer_id}")
        self._send_bytes(200, "audio/wav", clip.samples)

    def _serve_events(self) -> None:
        hub = self.server.pipeline.events
        q = hub.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "keep-alive")
            self.end_headers()
            self.wfile.write(b": connected\n\n")
            self.wfile.flush()
            idle = 0
            while not self.server.stopping.is_set():
                try:
                    event_type, data = q.get(timeout=1.0)
                except queue.Empty:
                    idle += 1
                    if idle >= 15:
                        idle = 0
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                    continue
                idle = 0
                payload = json.dumps(data, ensure_ascii=False)
                self.wfile.write(f"event: {event_type}\ndata: {payload}\n\n".encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            hub.unsubscribe(q)

    def _serve_static(self, parts: list[str]) -> None:
        root = self.server.console_dir
        if root is None:
            return self._fail(404, "console assets are not configured (set console_dir)")
        relative = "/".join(parts) or "index.html"
        target = (root / relative).resolve()
        if not target.is_relative_to(root.resolve()):
            return self._fail(403, "path escapes the console directory")
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            return self._fail(404, f"no such asset: {relative}")
        content_type = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._send_bytes(200, content_type, target.read_bytes())


def _processed_payload(session_id: str, processed: ProcessedUtterance) -> dict:
    payload = processed.result.to_dict()
    payload.update(
        {
            "session_id": session_id,
            "answer_id": processed.answer_id,
            "audio": processed.clip is not None,
            "timings_ms": {k: round(v, 3) for k, v in processed.timings_ms.items()},
        }
    )
    return payload


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, pipeline: Pipeline, console_dir: Path | None):
        super().__init__(address, _ApiHandler)
        self.pipeline = pipeline
        self.console_dir = console_dir
        self.stopping = threading.Event()


class ServiceHandle:
    """A running service; stop() shuts everything down gracefully."""

    def __init__(self, config: ServiceConfig, pipeline: Pipeline,
                 http_server: ApiServer, link_server: DeviceLinkServer,
                 capture_stop: threading.Event | None = None):
        self.config = config
        self.pipeline = pipeline
        self.http_server = http_server
        self.link_server = link_server
        self._capture_stop = capture_stop
        self._http_thread = threading.Thread(
            target=http_server.serve_forever, name="http-server", daemon=True
        )
        self._http_thread.start()

    @property
    def http_port(self) -> int:
        return self.http_server.server_address[1]

    @property
    def gateway_port(self) -> int:
        return self.link_server.port

    def stop(self) -> None:
        if self._capture_stop is not None:
            self._capture_stop.set()
        self.link_server.stop()
        self.pipeline.stop()
        self.http_server.stopping.set()
        self.http_server.shutdown()
        self.http_server.server_close()
        self._http_thread.join(timeout=SHUTDOWN_DEADLINE_S)


def serve(config: ServiceConfig, host: str = "127.0.0.1") -> ServiceHandle:
    """Bring up the full service; raises ServiceError with a diagnostic when
    a port is taken, a configured path is missing, or the store is corrupt."""
    for dir_key in ("templates_dir", "console_dir", "capture_source_dir"):
        value = getattr(config, dir_key)
        if value is not None and not Path(value).is_dir():
            raise ServiceError(f"{dir_key}: {value} is not a directory")
    try:
        pipeline = Pipeline(config)
    except CorruptLogError as exc:
        raise ServiceError(f"corrupt observation store: {exc}") from exc
    pipeline.start_workers()

    try:
        link_server = DeviceLinkServer(pipeline.bus, host=host, port=config.gateway_tcp_port)
    except OSError as exc:
        pipeline.stop()
        raise ServiceError(f"gateway_tcp_port {config.gateway_tcp_port} unavailable: {exc}") from exc
    link_server.start()

    capture_stop: threading.Event | None = None
    if config.capture_source_dir is not None:
        capture_stop = threading.Event()
        threading.Thread(
            target=run_capture_loop,
            args=(config.capture_source_dir, config.capture, pipeline.bus, capture_stop),
            kwargs={"dedupe": not config.faithful_mode},
            name="capture-loop",
            daemon=True,
        ).start()

    try:
        http_server = ApiServer((host, config.http_port), pipeline, config.console_dir)
    except OSError as exc:
        if capture_stop is not None:
            capture_stop.set()
        link_server.stop()
        pipeline.stop()
        raise ServiceError(f"http_port {config.http_port} unavailable: {exc}") from exc
    return ServiceHandle(config, pipeline, http_server, link_server, capture_stop)
