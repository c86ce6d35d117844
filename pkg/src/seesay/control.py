"""Query orchestration: classify each utterance, gather context from the
observation store, run the responder, and produce an AnswerResult.

Routing is two-stage. Deterministic pre-rules catch annotation requests
(leading "remember") and explicit escalation phrases; everything else goes
through the CLASSIFY prompt and the responder's one-word reply. Every
handled utterance takes exactly one route and is recorded in the session.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .adapters import AdapterSet, DescriptionUnavailable, ResponderUnavailable
from .embedding import tokenize
from .store import EmptyStoreError, MemoryStore, StaleAnnotationError

logger = logging.getLogger(__name__)

HISTORY_CAP = 50
DEFAULT_TAU = 0.15
MAX_LLM_ROUNDS = 3

TEMPLATE_IDS = ("CLASSIFY", "RETRQUERY", "ANSWER")

DEFAULT_ESCALATION_PHRASES = ("ask for more help", "i need more help")

DEFAULT_SENTENCES = {
    "no_observation": "I haven't seen anything yet.",
    "nothing_relevant": "I don't remember anything relevant to that.",
    "nothing_to_annotate": "There is no observation to annotate yet.",
    "empty_annotation": "There was nothing to remember in that request.",
    "nothing_to_escalate": "There is no earlier answer to escalate.",
    "escalation_failed": "I couldn't reach additional help just now.",
    "responder_offline": "I can't answer that right now.",
    "annotation_confirmed": "Noted, I'll remember: {annotation}",
    "apology": "Sorry, I couldn't make out that recording.",
    "didnt_catch": "I didn't catch that.",
}


class QueryRoute(str, Enum):
    SIMPLE = "Simple"
    CURRENT_SCENE = "CurrentScene"
    HISTORICAL = "Historical"
    ESCALATE = "Escalate"
    ANNOTATE = "Annotate"


_CLASSIFIER_REPLIES = {
    "SIMPLE": QueryRoute.SIMPLE,
    "CURRENT": QueryRoute.CURRENT_SCENE,
    "HISTORICAL": QueryRoute.HISTORICAL,
}


@dataclass
class SessionState:
    session_id: str
    last_retrieved: int | None = None
    last_answer: str | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_CAP))


@dataclass
class AnswerResult:
    route: QueryRoute
    answer_text: str
    retrieved_id: int | None = None
    similarity: float | None = None
    prompts_used: list[tuple[str, str]] = field(default_factory=list)
    llm_rounds: int = 1
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "route": self.route.value,
            "answer_text": self.answer_text,
            "retrieved_id": self.retrieved_id,
            "similarity": self.similarity,
            "prompts_used": [list(p) for p in self.prompts_used],
            "llm_rounds": self.llm_rounds,
            "notes": list(self.notes),
        }


class PromptTemplates:
    """Plain-text templates with {utterance}/{context} slots.

    Every template body must start with its "## <TEMPLATE_ID>" tag line; the
    deterministic responder mocks dispatch on it.
    """

    def __init__(self, directory: str | Path | None = None):
        self._texts: dict[str, str] = {}
        for template_id in TEMPLATE_IDS:
            if directory is None:
                text = (resources.files(__package__) / "templates" / f"{template_id}.txt").read_text(
                    encoding="utf-8"
                )
            else:
                path = Path(directory) / f"{template_id}.txt"
                if not path.exists():
                    raise FileNotFoundError(f"missing prompt template {path}")
                text = path.read_text(encoding="utf-8")
            if not text.startswith(f"## {template_id}"):
                raise ValueError(
                    f"template {template_id} must start with its '## {template_id}' tag line"
                )
            self._texts[template_id] = text

    def render(self, template_id: str, **slots: str) -> str:
        text = self._texts[template_id]
        for name, value in slots.items():
            text = text.replace("{" + name + "}", value)
        return text.rstrip("\n")


class TraceLog:
    """Append-only JSON Lines log of every handled query, for the console."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, session_id: str, utterance: str, result: AnswerResult) -> None:
        record = {
            "ts_ms": int(time.time() * 1000),
            "session_id": session_id,
            "utterance": utterance,
            "result": result.to_dict(),
        }
        line = json.dumps(record, ensure_ascii=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def annotation_text(utterance: str) -> str:
    """Utterance minus its leading "remember" token, trimmed."""
    stripped = utterance.lstrip()
    if stripped[:8].lower() == "remember":
        remainder = stripped[8:]
    else:
        remainder = stripped
    return remainder.lstrip(" \t,:;-").strip()


def starts_with_remember(utterance: str) -> bool:
    tokens = tokenize(utterance)
    return bool(tokens) and tokens[0] == "remember"


class ControlCenter:
    """Per-utterance state machine over the store and adapters."""

    def __init__(
        self,
        store: MemoryStore,
        adapters: AdapterSet,
        tau: float = DEFAULT_TAU,
        sentences: dict[str, str] | None = None,
        escalation_phrases: tuple[str, ...] = DEFAULT_ESCALATION_PHRASES,
        templates_dir: str | Path | None = None,
        trace: TraceLog | None = None,
    ):
        self.store = store
        self.adapters = adapters
        self.tau = tau
        self.sentences = {**DEFAULT_SENTENCES, **(sentences or {})}
        self.escalation_phrases = tuple(p.lower() for p in escalation_phrases)
        self.templates = PromptTemplates(templates_dir)
        self.trace = trace

    # ------------------------------------------------------------------
    # Routing

    def classify_intent(self, utterance: str) -> QueryRoute:
        route, _, _, _ = self._classify(utterance)
        return route

    def _classify(self, utterance: str) -> tuple[QueryRoute, list[tuple[str, str]], list[str], int]:
        """Route plus (prompts, notes, respond-call count) for the decision."""
        if starts_with_remember(utterance):
            return QueryRoute.ANNOTATE, [], [], 0
        lowered = utterance.lower()
        if any(phrase in lowered for phrase in self.escalation_phrases):
            return QueryRoute.ESCALATE, [], [], 0
        prompt = self.templates.render("CLASSIFY", utterance=utterance)
        prompts = [("CLASSIFY", prompt)]
        try:
            reply = self.adapters.responder.respond(prompt)
        except ResponderUnavailable:
            return QueryRoute.SIMPLE, prompts, ["classifier offline"], 1
        route = _CLASSIFIER_REPLIES.get(reply.strip().upper())
        if route is None:
            return (
                QueryRoute.SIMPLE,
                prompts,
                [f"classifier reply unrecognized: {reply.strip()!r}"],
                1,
            )
        return route, prompts, [], 1

    def generate_retrieval_query(self, utterance: str) -> str:
        query, _, _, _ = self._retrieval_query(utterance)
        return query

    def _retrieval_query(self, utterance: str) -> tuple[str, list[tuple[str, str]], list[str], int]:
        prompt = self.templates.render("RETRQUERY", utterance=utterance)
        prompts = [("RETRQUERY", prompt)]
        try:
            reply = self.adapters.responder.respond(prompt).strip()
        except ResponderUnavailable:
            return utterance, prompts, ["retrieval-query responder offline"], 1
        if not reply:
            return utterance, prompts, ["empty retrieval query, using raw utterance"], 1
        return reply, prompts, [], 1

    # ------------------------------------------------------------------
    # Handling

    def handle_query(self, session: SessionState, utterance: str) -> AnswerResult:
        """Classify, gather context, answer; the result lands in the session.

        Sub-handlers accumulate rendered prompts and trace notes into the
        shared lists; the intent decision counts as one round even when a
        deterministic pre-rule resolved it without a responder call.
        """
        route, prompts, notes, rounds = self._classify(utterance)
        if route is QueryRoute.SIMPLE:
            answer = self._answer("", utterance, prompts, notes)
            rounds += 1
            result = AnswerResult(route=route, answer_text=answer)
        elif route is QueryRoute.CURRENT_SCENE:
            result, extra_rounds = self._handle_current(session, utterance, prompts, notes)
            rounds += extra_rounds
        elif route is QueryRoute.HISTORICAL:
            result, extra_rounds = self._handle_historical(session, utterance, prompts, notes)
            rounds += extra_rounds
        elif route is QueryRoute.ESCALATE:
            result = self._handle_escalate(session, utterance, notes)
        else:
            result = self.apply_annotation_text(session, annotation_text(utterance))
        result.prompts_used = prompts
        result.notes = notes + result.notes
        result.llm_rounds = max(1, rounds)
        self._record(session, utterance, result)
        return result

    def _handle_current(
        self, session: SessionState, utterance: str, prompts: list, notes: list
    ) -> tuple[AnswerResult, int]:
        latest = self.store.latest()
        if latest is None:
            return AnswerResult(
                route=QueryRoute.CURRENT_SCENE,
                answer_text=self.sentences["no_observation"],
            ), 0
        answer = self._answer(latest.combined_text(), utterance, prompts, notes)
        session.last_retrieved = latest.id
        return AnswerResult(
            route=QueryRoute.CURRENT_SCENE,
            answer_text=answer,
            retrieved_id=latest.id,
        ), 1

    def _handle_historical(
        self, session: SessionState, utterance: str, prompts: list, notes: list
    ) -> tuple[AnswerResult, int]:
        query, q_prompts, q_notes, q_rounds = self._retrieval_query(utterance)
        prompts.extend(q_prompts)
        notes.extend(q_notes)
        embedding = self.adapters.embedder.embed(query)
        hits = self.store.retrieve_top_k(embedding, k=1)
        if not hits or hits[0].score < self.tau:
            if hits:
                notes.append(f"best similarity {hits[0].score:.4f} below threshold {self.tau}")
            return AnswerResult(
                route=QueryRoute.HISTORICAL,
                answer_text=self.sentences["nothing_relevant"],
            ), q_rounds
        hit = hits[0]
        observation = self.store.get(hit.observation_id)
        answer = self._answer(observation.combined_text(), utterance, prompts, notes)
        session.last_retrieved = hit.observation_id
        return AnswerResult(
            route=QueryRoute.HISTORICAL,
            answer_text=answer,
            retrieved_id=hit.observation_id,
            similarity=hit.score,
        ), q_rounds + 1

    def _handle_escalate(
        self, session: SessionState, utterance: str, notes: list
    ) -> AnswerResult:
        if session.last_retrieved is None:
            notes.append("nothing to escalate: no prior retrieval in this session")
            return AnswerResult(
                route=QueryRoute.ESCALATE,
                answer_text=self.sentences["nothing_to_escalate"],
            )
        observation = self.store.get(session.last_retrieved)
        image = None
        if observation is not None and observation.image_ref is not None:
            image = self.store.image_bytes(observation.image_ref)
        if image is None:
            notes.append("no stored image for the previously retrieved observation")
            return AnswerResult(
                route=QueryRoute.ESCALATE,
                answer_text=self.sentences["nothing_to_escalate"],
                retrieved_id=session.last_retrieved,
            )
        previous_utterance = session.history[-1][0] if session.history else utterance
        try:
            answer = self.adapters.describer.describe_image(image, previous_utterance)
        except DescriptionUnavailable as exc:
            notes.append(f"escalation failed: {exc}")
            return AnswerResult(
                route=QueryRoute.ESCALATE,
                answer_text=self.sentences["escalation_failed"],
                retrieved_id=session.last_retrieved,
            )
        return AnswerResult(
            route=QueryRoute.ESCALATE,
            answer_text=answer,
            retrieved_id=session.last_retrieved,
        )

    def apply_annotation(self, session: SessionState, utterance: str) -> AnswerResult:
        """Handle a full "remember ..." utterance, recording it in the session."""
        result = self.apply_annotation_text(session, annotation_text(utterance))
        result.llm_rounds = max(1, result.llm_rounds)
        self._record(session, utterance, result)
        return result

    def apply_annotation_text(self, session: SessionState, annotation: str) -> AnswerResult:
        """Merge annotation text into the latest observation and re-embed it.

        The embedding is recomputed over description + annotations including
        the new text; if a newer observation lands between re-embedding and
        the swap, the whole step retries against it.
        """
        if not annotation:
            return AnswerResult(
                route=QueryRoute.ANNOTATE,
                answer_text=self.sentences["empty_annotation"],
                notes=["empty annotation"],
            )
        for _ in range(5):
            latest = self.store.latest()
            if latest is None:
                return AnswerResult(
                    route=QueryRoute.ANNOTATE,
                    answer_text=self.sentences["nothing_to_annotate"],
                    notes=["nothing to annotate"],
                )
            combined = " ".join([latest.description, *latest.annotations, annotation])
            embedding = self.adapters.embedder.embed(combined)
            try:
                updated = self.store.annotate_latest(
                    annotation, embedding, expected_id=latest.id
                )
            except (EmptyStoreError, StaleAnnotationError):
                continue
            confirmation = self.sentences["annotation_confirmed"].replace(
                "{annotation}", annotation
            )
            return AnswerResult(
                route=QueryRoute.ANNOTATE,
                answer_text=confirmation,
                retrieved_id=updated.id,
            )
        raise RuntimeError("annotation target kept changing; giving up after 5 attempts")

    # ------------------------------------------------------------------
    # Internals

    def _answer(self, context: str, utterance: str, prompts: list, notes: list) -> str:
        """One ANSWER-template responder round; degrades to the stored context."""
        prompt = self.templates.render("ANSWER", context=context, utterance=utterance)
        prompts.append(("ANSWER", prompt))
        try:
            return self.adapters.responder.respond(prompt)
        except ResponderUnavailable:
            if context:
                notes.append("responder offline, answering with the stored description")
                return context
            notes.append("responder offline")
            return self.sentences["responder_offline"]

    def _record(self, session: SessionState, utterance: str, result: AnswerResult) -> None:
        session.history.append((utterance, result))
        session.last_answer = result.answer_text
        if self.trace is not None:
            self.trace.append(session.session_id, utterance, result)
