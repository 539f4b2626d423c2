"""HTTP session API over the conversation engine.

The service wraps a frozen model snapshot behind a small JSON contract:
create a session from an opening attribute, poll the system's next action
(idempotent until feedback arrives), submit yes/no answers or a slate
verdict, and read back the transcript. Sessions live in memory, are
serialized per session id, and expire after thirty idle minutes.

All bodies are JSON with snake_case fields; errors carry ``code`` and
``message``.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .belief import BeliefNetwork
from .data import ItemCatalog, UserHistory
from .dialogue import (
    Action,
    ConversationEngine,
    DialogueState,
    PolicyConfig,
    UsageError,
    apply_attribute_feedback,
    apply_recommendation_feedback,
)
from .recommender import EmbeddingStore, RecommendationNetwork

__all__ = [
    "ApiError",
    "ModelSnapshot",
    "SessionRecord",
    "SessionStore",
    "create_app",
]

SESSION_TTL_SECONDS = 30 * 60.0


class ApiError(Exception):
    """An error with a wire representation: HTTP status, code, message."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable bundle of everything the engine needs to serve sessions."""

    catalog: ItemCatalog
    store: EmbeddingStore
    belief_net: BeliefNetwork
    rec_net: RecommendationNetwork
    attribute_embeddings: np.ndarray
    histories: Mapping[int, UserHistory]
    config: PolicyConfig = PolicyConfig()
    attribute_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        labels = self.attribute_labels
        if labels is not None and len(labels) != self.catalog.attribute_count:
            raise ValueError(
                f"need {self.catalog.attribute_count} attribute labels, "
                f"got {len(labels)}")


@dataclass
class SessionRecord:
    session_id: str
    state: DialogueState
    created_at: float
    last_touched: float
    outstanding: dict | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory session map with idle expiry and per-session locks."""

    def __init__(self, ttl: float = SESSION_TTL_SECONDS,
                 clock: Callable[[], float] = time.monotonic):
        self._ttl = ttl
        self._clock = clock
        self._sessions: dict[str, SessionRecord] = {}
        self._lock = threading.Lock()

    def create(self, state: DialogueState) -> SessionRecord:
        now = self._clock()
        record = SessionRecord(session_id=uuid.uuid4().hex, state=state,
                               created_at=now, last_touched=now)
        with self._lock:
            self._purge(now)
            self._sessions[record.session_id] = record
        return record

    def get(self, session_id: str) -> SessionRecord:
        now = self._clock()
        with self._lock:
            self._purge(now)
            record = self._sessions.get(session_id)
            if record is None:
                raise ApiError(404, "unknown_session",
                               f"no active session {session_id!r}")
            record.last_touched = now
        return record

    def _purge(self, now: float) -> None:
        expired = [sid for sid, rec in self._sessions.items()
                   if now - rec.last_touched > self._ttl]
        for sid in expired:
            del self._sessions[sid]

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


class CreateSessionRequest(BaseModel):
    opening_attribute: int
    user_id: int | None = None
    seed: int = 0


class FeedbackRequest(BaseModel):
    type: str
    liked: bool | None = None
    accepted: bool | None = None
    item: int | None = None


def _action_payload(action: Action) -> dict:
    if action.kind == "question":
        return {"type": "question", "attribute": action.attribute}
    return {"type": "recommendation", "items": list(action.items)}


def _summary(record: SessionRecord, engine: ConversationEngine) -> dict:
    state = record.state
    beliefs = engine.beliefs(state)
    return {
        "session_id": record.session_id,
        "status": state.status,
        "turn": state.turn,
        "candidate_count": len(state.candidates),
        "beliefs": [float(q) for q in beliefs],
        "feedback": [float(a) for a in state.feedback],
        "asked": sorted(state.asked),
        "termination_turn": state.termination_turn,
        "outstanding_action": record.outstanding,
    }


def create_app(snapshot: ModelSnapshot, *, ttl: float = SESSION_TTL_SECONDS,
               clock: Callable[[], float] = time.monotonic) -> FastAPI:
    """Build the session API around one frozen model snapshot."""
    app = FastAPI(title="convrec session API")
    # The browser client is served as a static page from any origin and
    # talks to this API directly, so cross-origin calls must be allowed.
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    engine = ConversationEngine(
        snapshot.catalog, snapshot.store, snapshot.belief_net,
        snapshot.rec_net, snapshot.attribute_embeddings, snapshot.histories,
        config=snapshot.config)
    sessions = SessionStore(ttl=ttl, clock=clock)
    app.state.engine = engine
    app.state.sessions = sessions

    @app.exception_handler(ApiError)
    async def on_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": "invalid_request",
                                     "message": str(exc.errors())})

    @app.get("/health")
    def health():
        return {"status": "ok", "sessions": len(sessions)}

    @app.get("/attributes")
    def attributes():
        labels = snapshot.attribute_labels
        catalog = snapshot.catalog
        return {
            "attributes": [
                {
                    "id": p,
                    "label": labels[p] if labels else f"attribute {p}",
                    "item_count": len(catalog.items_with(p)),
                }
                for p in range(catalog.attribute_count)
            ]
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionRequest):
        catalog = snapshot.catalog
        if not 0 <= body.opening_attribute < catalog.attribute_count:
            raise ApiError(400, "invalid_attribute",
                           f"unknown attribute {body.opening_attribute}")
        try:
            state = engine.open_session(body.user_id, body.opening_attribute,
                                        seed=body.seed)
        except LookupError as exc:
            raise ApiError(404, "unknown_user", str(exc)) from None
        record = sessions.create(state)
        return _summary(record, engine)

    @app.get("/sessions/{session_id}")
    def session_summary(session_id: str):
        record = sessions.get(session_id)
        with record.lock:
            return _summary(record, engine)

    @app.get("/sessions/{session_id}/transcript")
    def transcript(session_id: str):
        record = sessions.get(session_id)
        with record.lock:
            return {
                "session_id": record.session_id,
                "status": record.state.status,
                "termination_turn": record.state.termination_turn,
                "records": [rec.to_dict() for rec in record.state.log],
            }

    @app.get("/sessions/{session_id}/next_action")
    def next_action(session_id: str):
        record = sessions.get(session_id)
        with record.lock:
            if record.outstanding is not None:
                return record.outstanding
            if record.state.status != "active":
                raise ApiError(409, "session_terminated",
                               f"session already {record.state.status}")
            action = engine.next_action(record.state)
            record.outstanding = _action_payload(action)
            return record.outstanding

    @app.post("/sessions/{session_id}/feedback")
    def submit_feedback(session_id: str, body: FeedbackRequest):
        record = sessions.get(session_id)
        with record.lock:
            outstanding = record.outstanding
            if outstanding is None:
                raise ApiError(400, "no_outstanding_action",
                               "fetch the next action before sending feedback")
            if body.type not in ("answer", "recommendation"):
                raise ApiError(400, "invalid_request",
                               f"unknown feedback type {body.type!r}")
            expected = ("answer" if outstanding["type"] == "question"
                        else "recommendation")
            if body.type != expected:
                raise ApiError(
                    400, "feedback_mismatch",
                    f"outstanding action is a {outstanding['type']}; "
                    f"expected {expected!r} feedback, got {body.type!r}")
            state = record.state
            try:
                if body.type == "answer":
                    if body.liked is None:
                        raise ApiError(400, "invalid_request",
                                       "answer feedback needs 'liked'")
                    apply_attribute_feedback(state, outstanding["attribute"],
                                             body.liked, snapshot.catalog,
                                             max_turns=snapshot.config.max_turns)
                else:
                    slate = outstanding["items"]
                    accepted = bool(body.accepted)
                    if body.item is not None:
                        if body.item not in slate:
                            raise ApiError(
                                400, "invalid_item",
                                f"item {body.item} is not on the current slate")
                        accepted = True
                    elif body.accepted is None:
                        raise ApiError(400, "invalid_request",
                                       "recommendation feedback needs "
                                       "'accepted' or 'item'")
                    apply_recommendation_feedback(
                        state, slate, accepted,
                        max_turns=snapshot.config.max_turns)
            except UsageError as exc:
                raise ApiError(409, "session_terminated", str(exc)) from None
            record.outstanding = None
            return _summary(record, engine)

    return app
