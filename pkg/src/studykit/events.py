"""Append-only interaction log and the views folded from it.

Every participant action becomes one immutable, per-session sequence-numbered
event. Chat turns, search queries, notes, and ratings are never stored as
documents; they are pure folds over the timeline, so two folds of the same
timeline always agree and a restart rebuilds identical state from disk.

Client-reported typing timestamps are stored verbatim. When they are
inconsistent (start > end or end > submit) the event is kept and flagged
with ``timing_anomaly`` rather than rejected: the browser's clock is the
only source for typing times.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from .model import AnswerValue, StudyKitError


class SessionClosed(StudyKitError):
    pass


class PayloadInvalid(StudyKitError):
    pass


class OutOfOrderTurn(StudyKitError):
    """Event references a turn or query that does not exist (yet)."""


class UnknownTurn(StudyKitError):
    pass


class UnknownTask(StudyKitError):
    pass


class ResponseNotComplete(StudyKitError):
    pass


class UnknownSession(StudyKitError):
    pass


class InteractionEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    event_id: str
    session_id: str
    seq: int
    kind: str
    payload: dict
    client_ts: Optional[int] = None
    server_ts: int


class _Payload(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SessionStarted(_Payload):
    participant_id: str
    study_id: str
    external_label: str = ""


class TaskStarted(_Payload):
    task_id: str
    step_index: int


class ConsentSubmitted(_Payload):
    checked: list[bool]
    accepted: bool


class SurveySubmitted(_Payload):
    step_kind: str
    survey_id: str
    answers: dict[str, AnswerValue]
    attention_failures: list[dict] = []
    accepted: bool = True
    response_id: str = ""


class PromptSubmitted(_Payload):
    task_id: str
    turn_id: str
    turn_index: int
    text: str
    typing_start_ms: Optional[int] = None
    typing_end_ms: Optional[int] = None
    timing_anomaly: bool = False


class ResponseChunk(_Payload):
    turn_id: str
    chunk_index: int
    text: str


class ResponseCompleted(_Payload):
    turn_id: str
    ok: bool
    error: Optional[str] = None


class TurnRated(_Payload):
    turn_id: str
    rating: int


class TrajectoryRated(_Payload):
    task_id: str
    rating: int


class SerpItem(_Payload):
    rank: int
    title: str
    url: str
    snippet: str = ""


class QuerySubmitted(_Payload):
    task_id: str
    query_id: str
    text: str
    typing_start_ms: Optional[int] = None
    typing_end_ms: Optional[int] = None
    result_count: int
    serp: list[SerpItem]
    timing_anomaly: bool = False


class ResultClicked(_Payload):
    query_id: str
    url: str
    rank: int


class ClickRejected(_Payload):
    query_id: str
    url: str
    rank: int
    reason: str = "not_in_serp"


class NoteSaved(_Payload):
    task_id: str
    text: str


class PopupFired(_Payload):
    instance_id: str
    rule_id: str
    survey_id: str
    cause: str
    fired_at_ms: int


class PopupAnswered(_Payload):
    instance_id: str
    rule_id: str
    survey_id: str
    answers: dict[str, AnswerValue]
    response_id: str


class TaskSubmitted(_Payload):
    task_id: str
    final_note: Optional[str] = None
    accepted: bool = True
    reason: str = ""


class SessionCompleted(_Payload):
    pass


PAYLOAD_SCHEMAS: dict[str, type[_Payload]] = {
    "session_started": SessionStarted,
    "task_started": TaskStarted,
    "consent_submitted": ConsentSubmitted,
    "survey_submitted": SurveySubmitted,
    "prompt_submitted": PromptSubmitted,
    "response_chunk": ResponseChunk,
    "response_completed": ResponseCompleted,
    "turn_rated": TurnRated,
    "trajectory_rated": TrajectoryRated,
    "query_submitted": QuerySubmitted,
    "result_clicked": ResultClicked,
    "click_rejected": ClickRejected,
    "note_saved": NoteSaved,
    "popup_fired": PopupFired,
    "popup_answered": PopupAnswered,
    "task_submitted": TaskSubmitted,
    "session_completed": SessionCompleted,
}


# ---------------------------------------------------------------------------
# Materialized views


@dataclass
class ChatTurn:
    turn_id: str
    task_id: str
    turn_index: int
    prompt_text: str
    typing_start_ms: Optional[int]
    typing_end_ms: Optional[int]
    submitted_ms: int
    chunks: list[str] = field(default_factory=list)
    response_completed_ms: Optional[int] = None
    ok: Optional[bool] = None
    error: Optional[str] = None
    turn_rating: Optional[int] = None

    @property
    def response_text(self) -> str:
        return "".join(self.chunks)

    @property
    def completed(self) -> bool:
        return self.ok is not None


@dataclass
class Click:
    url: str
    rank: int
    clicked_ms: int


@dataclass
class SearchQueryRecord:
    query_id: str
    task_id: str
    query_text: str
    typing_start_ms: Optional[int]
    typing_end_ms: Optional[int]
    issued_ms: int
    result_count: int
    serp: list[SerpItem]
    clicks: list[Click] = field(default_factory=list)


@dataclass
class NoteRecord:
    task_id: str
    text: str
    updated_ms: int


@dataclass
class SurveySubmissionRecord:
    step_kind: str
    survey_id: str
    answers: dict[str, AnswerValue]
    attention_failures: list[dict]
    submitted_ms: int
    response_id: str


@dataclass
class PopupRecord:
    instance_id: str
    rule_id: str
    survey_id: str
    fired_at_ms: int
    cause: str
    task_id: Optional[str]
    answers: Optional[dict[str, AnswerValue]] = None
    answered_ms: Optional[int] = None
    response_id: Optional[str] = None


@dataclass
class SessionViews:
    """Everything derivable from one session's timeline."""

    turns: dict[str, ChatTurn] = field(default_factory=dict)
    turn_order: list[str] = field(default_factory=list)
    queries: dict[str, SearchQueryRecord] = field(default_factory=dict)
    query_order: list[str] = field(default_factory=list)
    notes: dict[str, NoteRecord] = field(default_factory=dict)
    trajectory_ratings: dict[str, int] = field(default_factory=dict)
    surveys: list[SurveySubmissionRecord] = field(default_factory=list)
    popups: dict[str, PopupRecord] = field(default_factory=dict)
    popup_order: list[str] = field(default_factory=list)
    prompts: int = 0
    responses: int = 0
    query_count: int = 0
    current_task: Optional[str] = None
    closed: bool = False
    turn_counter_per_task: dict[str, int] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {"prompts": self.prompts, "responses": self.responses, "queries": self.query_count}


def _action_ms(event: InteractionEvent) -> int:
    return event.client_ts if event.client_ts is not None else event.server_ts


def check_references(views: SessionViews, kind: str, payload: dict) -> None:
    """Raise OutOfOrderTurn if the event points at state that does not
    exist or would break turn integrity (chunks must be dense and stop at
    completion)."""
    if kind in ("response_chunk", "response_completed", "turn_rated"):
        turn = views.turns.get(payload["turn_id"])
        if turn is None:
            raise OutOfOrderTurn(f"{kind} for unknown turn {payload['turn_id']!r}")
        if kind != "turn_rated" and turn.completed:
            raise OutOfOrderTurn(f"{kind} for already-completed turn {payload['turn_id']!r}")
        if kind == "response_chunk" and payload["chunk_index"] != len(turn.chunks):
            raise OutOfOrderTurn(
                f"chunk_index {payload['chunk_index']} out of order, expected {len(turn.chunks)}"
            )
    elif kind == "result_clicked":
        record = views.queries.get(payload["query_id"])
        if record is None:
            raise OutOfOrderTurn(f"click for unknown query {payload['query_id']!r}")
        if not any(item.rank == payload["rank"] and item.url == payload["url"] for item in record.serp):
            raise OutOfOrderTurn(f"click ({payload['url']!r}, rank {payload['rank']}) not in SERP snapshot")
    elif kind == "popup_answered":
        if payload["instance_id"] not in views.popups:
            raise OutOfOrderTurn(f"answer for unknown popup {payload['instance_id']!r}")


def apply_event(views: SessionViews, event: InteractionEvent) -> None:
    """Fold one event into the views. Assumes the event was validated on
    append; raises OutOfOrderTurn for references that cannot resolve."""
    kind, p = event.kind, event.payload
    if kind == "task_started":
        views.current_task = p["task_id"]
    elif kind == "prompt_submitted":
        turn = ChatTurn(
            turn_id=p["turn_id"],
            task_id=p["task_id"],
            turn_index=p["turn_index"],
            prompt_text=p["text"],
            typing_start_ms=p.get("typing_start_ms"),
            typing_end_ms=p.get("typing_end_ms"),
            submitted_ms=_action_ms(event),
        )
        views.turns[turn.turn_id] = turn
        views.turn_order.append(turn.turn_id)
        views.turn_counter_per_task[turn.task_id] = views.turn_counter_per_task.get(turn.task_id, 0) + 1
        views.prompts += 1
    elif kind == "response_chunk":
        turn = views.turns.get(p["turn_id"])
        if turn is None:
            raise OutOfOrderTurn(f"chunk for unknown turn {p['turn_id']!r}")
        turn.chunks.append(p["text"])
    elif kind == "response_completed":
        turn = views.turns.get(p["turn_id"])
        if turn is None:
            raise OutOfOrderTurn(f"completion for unknown turn {p['turn_id']!r}")
        turn.response_completed_ms = event.server_ts
        turn.ok = p["ok"]
        turn.error = p.get("error")
        if p["ok"]:
            views.responses += 1
    elif kind == "turn_rated":
        turn = views.turns.get(p["turn_id"])
        if turn is None:
            raise OutOfOrderTurn(f"rating for unknown turn {p['turn_id']!r}")
        turn.turn_rating = p["rating"]
    elif kind == "trajectory_rated":
        views.trajectory_ratings[p["task_id"]] = p["rating"]
    elif kind == "query_submitted":
        record = SearchQueryRecord(
            query_id=p["query_id"],
            task_id=p["task_id"],
            query_text=p["text"],
            typing_start_ms=p.get("typing_start_ms"),
            typing_end_ms=p.get("typing_end_ms"),
            issued_ms=_action_ms(event),
            result_count=p["result_count"],
            serp=[SerpItem.model_validate(item) for item in p["serp"]],
        )
        views.queries[record.query_id] = record
        views.query_order.append(record.query_id)
        views.query_count += 1
    elif kind == "result_clicked":
        record = views.queries.get(p["query_id"])
        if record is None:
            raise OutOfOrderTurn(f"click for unknown query {p['query_id']!r}")
        record.clicks.append(Click(url=p["url"], rank=p["rank"], clicked_ms=_action_ms(event)))
    elif kind == "note_saved":
        views.notes[p["task_id"]] = NoteRecord(task_id=p["task_id"], text=p["text"], updated_ms=_action_ms(event))
    elif kind == "survey_submitted":
        if p.get("accepted", True):
            views.surveys.append(
                SurveySubmissionRecord(
                    step_kind=p["step_kind"],
                    survey_id=p["survey_id"],
                    answers=p["answers"],
                    attention_failures=p.get("attention_failures", []),
                    submitted_ms=_action_ms(event),
                    response_id=p.get("response_id", ""),
                )
            )
    elif kind == "popup_fired":
        record = PopupRecord(
            instance_id=p["instance_id"],
            rule_id=p["rule_id"],
            survey_id=p["survey_id"],
            fired_at_ms=p["fired_at_ms"],
            cause=p["cause"],
            task_id=views.current_task,
        )
        views.popups[record.instance_id] = record
        views.popup_order.append(record.instance_id)
    elif kind == "popup_answered":
        record = views.popups.get(p["instance_id"])
        if record is None:
            raise OutOfOrderTurn(f"answer for unknown popup {p['instance_id']!r}")
        record.answers = p["answers"]
        record.answered_ms = _action_ms(event)
        record.response_id = p["response_id"]
    elif kind == "session_completed":
        views.closed = True
    # session_started, consent_submitted, click_rejected, task_submitted
    # leave no view state beyond the timeline itself.


def fold_views(events: list[InteractionEvent]) -> SessionViews:
    """Pure fold of a timeline into materialized views."""
    views = SessionViews()
    for event in events:
        apply_event(views, event)
    return views


# ---------------------------------------------------------------------------
# The log itself


def validate_payload(kind: str, payload: dict) -> dict:
    schema = PAYLOAD_SCHEMAS.get(kind)
    if schema is None:
        raise PayloadInvalid(f"unknown event kind {kind!r}")
    try:
        return schema.model_validate(payload).model_dump()
    except ValidationError as exc:
        raise PayloadInvalid(f"{kind}: {exc}") from exc


@dataclass
class _SessionLog:
    events: list[InteractionEvent] = field(default_factory=list)
    views: SessionViews = field(default_factory=SessionViews)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def last_seq(self) -> int:
        return self.events[-1].seq if self.events else 0

    @property
    def last_server_ts(self) -> int:
        return self.events[-1].server_ts if self.events else 0


class EventLog:
    """Per-study append-only event store with incremental views.

    Appends for one session are serialized by the session lock; appends for
    different sessions proceed independently. Reads return snapshots that
    are always a prefix of the true timeline.
    """

    def __init__(self, storage, study_id: str, clock) -> None:
        self._storage = storage
        self._study_id = study_id
        self._clock = clock
        self._sessions: dict[str, _SessionLog] = {}
        self._registry_lock = threading.Lock()
        for _, record in storage.scan(self.stream_key):
            event = InteractionEvent.model_validate(record)
            log = self._session(event.session_id)
            log.events.append(event)
            apply_event(log.views, event)

    @property
    def stream_key(self) -> str:
        return f"events/{self._study_id}"

    def _session(self, session_id: str) -> _SessionLog:
        with self._registry_lock:
            if session_id not in self._sessions:
                self._sessions[session_id] = _SessionLog()
            return self._sessions[session_id]

    def known_sessions(self) -> list[str]:
        with self._registry_lock:
            return sorted(self._sessions)

    def ensure_session(self, session_id: str) -> None:
        """Register a session that exists as a document but has no events
        yet (possible after a crash between doc write and first append)."""
        self._session(session_id)

    def append(self, session_id: str, kind: str, payload: dict, client_ts: Optional[int] = None) -> InteractionEvent:
        """Validate, persist (durable before return), and fold one event."""
        payload = validate_payload(kind, payload)
        log = self._session(session_id)
        with log.lock:
            if log.views.closed:
                raise SessionClosed(session_id)
            seq = log.last_seq + 1
            server_ts = max(int(self._clock.now_ms()), log.last_server_ts)
            event = InteractionEvent(
                event_id=f"{session_id}-e{seq}",
                session_id=session_id,
                seq=seq,
                kind=kind,
                payload=payload,
                client_ts=client_ts,
                server_ts=server_ts,
            )
            check_references(log.views, kind, payload)
            self._storage.append(self.stream_key, event.model_dump())
            log.events.append(event)
            apply_event(log.views, event)
            return event

    def timeline(self, session_id: str) -> list[InteractionEvent]:
        log = self._sessions.get(session_id)
        if log is None:
            raise UnknownSession(session_id)
        with log.lock:
            return list(log.events)

    def views(self, session_id: str) -> SessionViews:
        log = self._sessions.get(session_id)
        if log is None:
            raise UnknownSession(session_id)
        return log.views

    def has_session(self, session_id: str) -> bool:
        return session_id in self._sessions

    def rate_turn(self, session_id: str, turn_id: str, rating: int, client_ts: Optional[int] = None) -> ChatTurn:
        """Store a turn rating; re-rating overwrites the view but both
        events stay in the timeline."""
        views = self.views(session_id)
        turn = views.turns.get(turn_id)
        if turn is None:
            raise UnknownTurn(turn_id)
        if not turn.completed or not turn.ok:
            raise ResponseNotComplete(turn_id)
        self.append(session_id, "turn_rated", {"turn_id": turn_id, "rating": rating}, client_ts)
        return views.turns[turn_id]

    def rate_trajectory(self, session_id: str, task_id: str, rating: int, known_tasks: set[str], client_ts: Optional[int] = None) -> int:
        if task_id not in known_tasks:
            raise UnknownTask(task_id)
        self.append(session_id, "trajectory_rated", {"task_id": task_id, "rating": rating}, client_ts)
        return rating
