"""Pluggable model adapters: speech-to-text, text responder, vision
describer, speech synthesis, and the text embedder.

Each role has a deterministic offline mock (the default, used by every test
and replay) and an HTTP-backed remote implementation speaking a minimal JSON
POST protocol. Mocks are pure functions of their inputs plus any registered
corpus sidecars, so whole pipeline runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
import io
import os
import threading
import time
import wave
from base64 import b64decode, b64encode
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np
import requests

from .embedding import DEFAULT_DIM, embed_reference, tokenize

ADAPTER_ROLES = ("transcriber", "responder", "describer", "synthesizer", "embedder")

DEFAULT_SAMPLE_RATE = 16000

# Spoken-text synthesis rule for the mock: 10 ms of silence per character,
# never shorter than 100 ms.
_MS_PER_CHAR = 10
_MIN_CLIP_MS = 100

_BACKOFF_BASE_S = 0.25
_MAX_IN_FLIGHT = 4


class AdapterError(Exception):
    pass


class AdapterUnavailable(AdapterError):
    """A model backend could not produce a result after retries."""


class TranscriptionUnavailable(AdapterUnavailable):
    pass


class ResponderUnavailable(AdapterUnavailable):
    pass


class DescriptionUnavailable(AdapterUnavailable):
    pass


class SynthesisUnavailable(AdapterUnavailable):
    pass


class MalformedAudioError(AdapterError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "mock"
    endpoint_url: str | None = None
    api_key_env: str | None = None
    timeout_ms: int = 30000
    max_retries: int = 2

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ValueError(f"kind must be 'mock' or 'remote', got {self.kind!r}")
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError("remote adapters require endpoint_url")
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True)
class AudioClip:
    """A complete WAV container (PCM16 mono by construction of our mocks)."""

    samples: bytes
    format: str = "wav_pcm16"
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE


def make_silent_wav(duration_ms: int, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> bytes:
    frames = sample_rate_hz * duration_ms // 1000
    buffer = io.BytesIO()
    with wave.open(buffer, "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(sample_rate_hz)
        writer.writeframes(b"\x00\x00" * frames)
    return buffer.getvalue()


def wav_info(data: bytes) -> tuple[int, int]:
    """(sample_rate_hz, frame_count) of a WAV container, or MalformedAudioError."""
    try:
        with wave.open(io.BytesIO(data), "rb") as reader:
            return reader.getframerate(), reader.getnframes()
    except (wave.Error, EOFError, ValueError) as exc:
        raise MalformedAudioError(f"not a well-formed WAV container: {exc}") from exc


def _sidecar_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ----------------------------------------------------------------------
# Role protocols

class Transcriber(Protocol):
    def transcribe(self, clip: AudioClip) -> str: ...


class Responder(Protocol):
    def respond(self, prompt: str) -> str: ...


class VisionDescriber(Protocol):
    def describe_image(self, image: bytes, prompt: str) -> str: ...


class Synthesizer(Protocol):
    def synthesize(self, text: str) -> AudioClip: ...


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


# ----------------------------------------------------------------------
# Mocks

class MockTranscriber:
    """Returns the corpus sidecar transcript registered for a clip's bytes."""

    def __init__(self, transcripts: Mapping[str, str] | None = None):
        self._transcripts = dict(transcripts or {})

    def register(self, audio_bytes: bytes, transcript: str) -> None:
        self._transcripts[_sidecar_digest(audio_bytes)] = transcript

    def register_digest(self, digest: str, transcript: str) -> None:
        self._transcripts[digest] = transcript

    def transcribe(self, clip: AudioClip) -> str:
        wav_info(clip.samples)
        digest = _sidecar_digest(clip.samples)
        if digest not in self._transcripts:
            raise TranscriptionUnavailable(f"no transcript registered for clip {digest[:12]}")
        return self._transcripts[digest]


class MockVisionDescriber:
    """Returns the corpus sidecar description registered for an image's bytes."""

    def __init__(self, descriptions: Mapping[str, str] | None = None):
        self._descriptions = dict(descriptions or {})

    def register(self, image_bytes: bytes, description: str) -> None:
        self._descriptions[_sidecar_digest(image_bytes)] = description

    def register_digest(self, digest: str, description: str) -> None:
        self._descriptions[digest] = description

    def describe_image(self, image: bytes, prompt: str) -> str:
        if not image:
            raise ValueError("image bytes must be non-empty")
        digest = _sidecar_digest(image)
        if digest not in self._descriptions:
            raise DescriptionUnavailable(f"no description registered for image {digest[:12]}")
        return self._descriptions[digest]


# Question words that carry no retrieval signal; dropped when the mock
# responder rewrites a question into a search phrase.
_QUERY_STOPWORDS = frozenset(
    """a an and are at did do does find for from go going had has have how i in is
    it last left leave look looking me my of on or place put saw see seen should
    take that the their there these they this time to was we went were what when
    where which who whose why will with would you your""".split()
)

_HISTORICAL_MARKERS = frozenset(
    "where did was were left earlier yesterday before previously remember recall ago last".split()
)
_CURRENT_MARKERS = frozenset(
    """see describe current currently now front around scene here read sign menu
    direction directions this looking ahead nearby""".split()
)


class MockResponder:
    """Deterministic stand-in for the local text LLM.

    Dispatches on the prompt's leading "## <TEMPLATE_ID>" tag line:

    - CLASSIFY: keyword rules over the "Question:" line — any historical
      marker wins HISTORICAL, else any current-surroundings marker wins
      CURRENT, else SIMPLE.
    - RETRQUERY: echoes the question's salient tokens (stopwords dropped).
    - ANSWER: "ANSWER[<digest12>]" where the digest covers everything after
      the tag line, so answers vary with their context.
    """

    def respond(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        first_line, _, body = prompt.partition("\n")
        tag = first_line.removeprefix("## ").strip()
        if tag == "CLASSIFY":
            return self._classify(self._question_line(body))
        if tag == "RETRQUERY":
            return self._salient(self._question_line(body))
        if tag == "ANSWER":
            return "ANSWER[" + hashlib.sha256(body.encode("utf-8")).hexdigest()[:12] + "]"
        raise ValueError(f"prompt has no recognized template tag: {first_line!r}")

    @staticmethod
    def _question_line(body: str) -> str:
        for line in body.splitlines():
            if line.startswith("Question:"):
                return line[len("Question:"):].strip()
        return body

    @staticmethod
    def _classify(question: str) -> str:
        tokens = set(tokenize(question))
        if tokens & _HISTORICAL_MARKERS:
            return "HISTORICAL"
        if tokens & _CURRENT_MARKERS:
            return "CURRENT"
        return "SIMPLE"

    @staticmethod
    def _salient(question: str) -> str:
        return " ".join(t for t in tokenize(question) if t not in _QUERY_STOPWORDS)


class MockSynthesizer:
    """Silent PCM16 WAV whose duration encodes the text length."""

    def synthesize(self, text: str) -> AudioClip:
        duration_ms = max(_MIN_CLIP_MS, _MS_PER_CHAR * len(text))
        return AudioClip(samples=make_silent_wav(duration_ms))


class ReferenceEmbedder:
    """The hashed bag-of-words embedder behind the Embedder role."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        return embed_reference(text, self.dim)


# ----------------------------------------------------------------------
# Remote adapters

class _RemoteCaller:
    """Shared POST-with-retries plumbing for the remote adapters.

    Non-200 responses and transport errors are retried with exponential
    backoff (base 250 ms, doubling); at most four requests are in flight
    per adapter at any time.
    """

    def __init__(self, config: AdapterConfig, unavailable: type[AdapterUnavailable]):
        if config.kind != "remote":
            raise ValueError("remote adapter constructed from a non-remote config")
        self._config = config
        self._unavailable = unavailable
        self._slots = threading.BoundedSemaphore(_MAX_IN_FLIGHT)

    def post(self, payload: dict) -> dict:
        config = self._config
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        attempts = config.max_retries + 1
        failure = "no attempt made"
        with self._slots:
            for attempt in range(attempts):
                try:
                    response = requests.post(
                        config.endpoint_url,
                        json=payload,
                        headers=headers,
                        timeout=config.timeout_ms / 1000.0,
                    )
                    if response.status_code == 200:
                        return response.json()
                    failure = f"HTTP {response.status_code}"
                except requests.RequestException as exc:
                    failure = str(exc)
                if attempt + 1 < attempts:
                    time.sleep(_BACKOFF_BASE_S * (2 ** attempt))
        raise self._unavailable(
            f"{config.endpoint_url}: {failure} after {attempts} attempt(s)"
        )


class RemoteTranscriber:
    def __init__(self, config: AdapterConfig):
        self._caller = _RemoteCaller(config, TranscriptionUnavailable)

    def transcribe(self, clip: AudioClip) -> str:
        wav_info(clip.samples)
        reply = self._caller.post({
            "audio_b64": b64encode(clip.samples).decode("ascii"),
            "sample_rate": clip.sample_rate_hz,
        })
        return reply["text"]


class RemoteResponder:
    def __init__(self, config: AdapterConfig):
        self._caller = _RemoteCaller(config, ResponderUnavailable)

    def respond(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        return self._caller.post({"prompt": prompt})["text"]


class RemoteVisionDescriber:
    def __init__(self, config: AdapterConfig):
        self._caller = _RemoteCaller(config, DescriptionUnavailable)

    def describe_image(self, image: bytes, prompt: str) -> str:
        if not image:
            raise ValueError("image bytes must be non-empty")
        reply = self._caller.post({
            "image_b64": b64encode(image).decode("ascii"),
            "prompt": prompt,
        })
        return reply["text"]


class RemoteSynthesizer:
    def __init__(self, config: AdapterConfig):
        self._caller = _RemoteCaller(config, SynthesisUnavailable)

    def synthesize(self, text: str) -> AudioClip:
        reply = self._caller.post({"text": text})
        return AudioClip(
            samples=b64decode(reply["audio_b64"]),
            sample_rate_hz=int(reply.get("sample_rate", DEFAULT_SAMPLE_RATE)),
        )


# ----------------------------------------------------------------------
# Assembly

@dataclass
class AdapterSet:
    """The five wired model roles the pipeline runs on."""

    transcriber: Transcriber
    responder: Responder
    describer: VisionDescriber
    synthesizer: Synthesizer
    embedder: Embedder

    @classmethod
    def mocks(cls, dim: int = DEFAULT_DIM) -> "AdapterSet":
        return cls(
            transcriber=MockTranscriber(),
            responder=MockResponder(),
            describer=MockVisionDescriber(),
            synthesizer=MockSynthesizer(),
            embedder=ReferenceEmbedder(dim),
        )

    @classmethod
    def from_configs(cls, configs: Mapping[str, AdapterConfig], dim: int = DEFAULT_DIM) -> "AdapterSet":
        def config_for(role: str) -> AdapterConfig:
            return configs.get(role, AdapterConfig())

        embedder_config = config_for("embedder")
        if embedder_config.kind != "mock":
            # The embedder is the retrieval ground truth; it has no remote form.
            raise ValueError("embedder supports only the built-in reference implementation")

        def pick(role: str, mock_cls, remote_cls):
            config = config_for(role)
            return remote_cls(config) if config.kind == "remote" else mock_cls()

        return cls(
            transcriber=pick("transcriber", MockTranscriber, RemoteTranscriber),
            responder=pick("responder", MockResponder, RemoteResponder),
            describer=pick("describer", MockVisionDescriber, RemoteVisionDescriber),
            synthesizer=pick("synthesizer", MockSynthesizer, RemoteSynthesizer),
            embedder=ReferenceEmbedder(dim),
        )

    def register_corpus(
        self,
        descriptions: Mapping[str, str] | None = None,
        transcripts: Mapping[str, str] | None = None,
    ) -> None:
        """Load scenario sidecar texts (keyed by content digest) into the mocks."""
        if descriptions and isinstance(self.describer, MockVisionDescriber):
            for digest, text in descriptions.items():
                self.describer.register_digest(digest, text)
        if transcripts and isinstance(self.transcriber, MockTranscriber):
            for digest, text in transcripts.items():
                self.transcriber.register_digest(digest, text)
