"""SeeSay: a hardware-free assistive visual-memory pipeline.

Frames from a simulated camera are described, embedded, and remembered;
spoken or typed questions are routed through a multi-branch control flow
with retrieval over the remembered descriptions, and answered in text and
synthesized audio.
"""

from .adapters import AdapterConfig, AdapterSet, AudioClip
from .bus import Envelope, InProcessBroker, Kind, decode_envelope, encode_envelope, match_topic
from .config import ServiceConfig, load_config
from .control import AnswerResult, ControlCenter, QueryRoute, SessionState
from .embedding import embed_reference
from .gateway import CaptureSchedule, ReplayScenario, load_scenario, run_scenario
from .service import Pipeline, ServiceHandle, serve
from .store import MemoryStore, Observation, RetrievalHit, cosine_similarity

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterSet",
    "AnswerResult",
    "AudioClip",
    "CaptureSchedule",
    "ControlCenter",
    "Envelope",
    "InProcessBroker",
    "Kind",
    "MemoryStore",
    "Observation",
    "Pipeline",
    "QueryRoute",
    "ReplayScenario",
    "RetrievalHit",
    "ServiceConfig",
    "ServiceHandle",
    "SessionState",
    "cosine_similarity",
    "decode_envelope",
    "embed_reference",
    "encode_envelope",
    "load_config",
    "load_scenario",
    "match_topic",
    "run_scenario",
    "serve",
    "__version__",
]
