"""Application core: sessions, gating, triggers, providers, and export
wired over storage. The HTTP layer is a thin shell around this class.

Concurrency: each session has one lock and every session mutation runs
under it, so per-session operations are serialized while sessions proceed
independently. Chat chunk appends happen outside the session lock (the
event log serializes internally) so a long stream never starves other
actions such as note saves.
"""

from __future__ import annotations

import secrets
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import exporting, flow, security, triggers
from .events import EventLog, InteractionEvent, OutOfOrderTurn, SessionViews, fold_views
from .exporting import ExportBundle, UnknownStudy, build_bundle
from .flow import (
    ConsentAck,
    DuplicateSession,
    GateError,
    ParticipantSession,
    StepState,
    SurveyAnswers,
    TaskSubmit,
    WrongStep,
)
from .model import (
    Modality,
    StepKind,
    StudyConfig,
    StudyKitError,
    ValidationIssue,
    find_instrument,
    validate_answers,
    validate_study_config,
)
from .providers import EmptyResults, ProviderConfig, ProviderGateway, ProviderUnavailable, ResultPage
from .storage import Storage
from .triggers import FiredTrigger, TriggerEvent, TriggerState


class AdminExists(StudyKitError):
    pass


class NotFound(StudyKitError):
    pass


class StudyNotReady(StudyKitError):
    def __init__(self, issues: list[ValidationIssue]) -> None:
        super().__init__("study configuration has validation errors")
        self.issues = issues


class NotesDisabled(StudyKitError):
    pass


class Clock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)


class VirtualClock(Clock):
    """Manually advanced clock for tests and piloting; only installed when
    the service runs in test mode."""

    def __init__(self, start_ms: int = 1_767_225_600_000) -> None:  # 2026-01-01T00:00:00Z
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        self._now += ms
        return self._now


@dataclass
class StudyRuntime:
    study_id: str
    config: StudyConfig
    version: int
    invite_code: str
    log: EventLog
    sessions: dict[str, ParticipantSession] = field(default_factory=dict)
    session_versions: dict[str, int] = field(default_factory=dict)
    trigger_states: dict[str, TriggerState] = field(default_factory=dict)
    session_locks: dict[str, threading.Lock] = field(default_factory=dict)
    guard: threading.Lock = field(default_factory=threading.Lock)

    def lock_for(self, session_id: str) -> threading.Lock:
        with self.guard:
            if session_id not in self.session_locks:
                self.session_locks[session_id] = threading.Lock()
            return self.session_locks[session_id]


def _trigger_state_from_log(
    config: StudyConfig, events: list[InteractionEvent]
) -> TriggerState:
    """Rebuild a session's trigger state by folding its timeline.

    Fired instances and acknowledgments are taken from the persisted
    popup events (authoritative even if rules were edited later); rule
    counters are re-derived from the interaction events.
    """
    state = TriggerState(rules=list(config.trigger_rules))
    turn_tasks: dict[str, str] = {}
    max_instance_no = 0
    for event in events:
        kind, p = event.kind, event.payload
        if kind == "task_started":
            state.current_task = p["task_id"]
            state.task_anchor_ms.setdefault(p["task_id"], event.server_ts)
        elif kind == "prompt_submitted":
            turn_tasks[p["turn_id"]] = p["task_id"]
            _bump_counters(state, "after_n_prompts", p["task_id"])
        elif kind == "response_completed" and p.get("ok"):
            _bump_counters(state, "after_n_responses", turn_tasks.get(p["turn_id"]))
        elif kind == "query_submitted":
            _bump_counters(state, "after_n_queries", p["task_id"])
        elif kind == "popup_fired":
            inst = FiredTrigger(
                instance_id=p["instance_id"],
                rule_id=p["rule_id"],
                survey_id=p["survey_id"],
                fired_at=p["fired_at_ms"],
                cause=p["cause"],
            )
            state.instances.append(inst)
            state.fire_counts[inst.rule_id] = state.fire_counts.get(inst.rule_id, 0) + 1
            state.last_fire_ms[inst.rule_id] = inst.fired_at
            number = int(p["instance_id"].rsplit("-", 1)[-1]) if p["instance_id"].rsplit("-", 1)[-1].isdigit() else 0
            max_instance_no = max(max_instance_no, number)
        elif kind == "popup_answered":
            inst = state.find_instance(p["instance_id"])
            if inst is not None:
                inst.state = "answered"
                inst.response_id = p["response_id"]
                if not state.pending():
                    state.last_drain_ms = event.server_ts
        elif kind == "task_submitted" and p.get("accepted"):
            state.current_task = None
    state.next_instance_no = max_instance_no + 1
    return state


def _bump_counters(state: TriggerState, condition_kind: str, task_id: Optional[str]) -> None:
    for rule in state.rules:
        if rule.condition.kind == condition_kind and (rule.scope is None or rule.scope == task_id):
            state.counters[rule.rule_id] = state.counters.get(rule.rule_id, 0) + 1


class AppCore:
    def __init__(self, storage: Storage, clock: Optional[Clock] = None, test_mode: bool = False, secret: Optional[str] = None) -> None:
        self.storage = storage
        self.test_mode = test_mode
        self.clock = clock or (VirtualClock() if test_mode else Clock())
        root = getattr(storage, "root", ".")
        self.secret = secret or security.load_or_create_secret(root)
        self._runtimes: dict[str, StudyRuntime] = {}
        self._runtimes_guard = threading.Lock()

    # -- auth ---------------------------------------------------------------

    def admin_count(self) -> int:
        return len(self.storage.list_keys("admin_accounts"))

    def setup_admin(self, username: str, password: str) -> str:
        """First-run administrator creation; refused once any admin exists."""
        if self.admin_count() > 0:
            raise AdminExists("an administrator account already exists")
        if not username or not password:
            raise StudyKitError("username and password are required")
        self.storage.put(
            "admin_accounts", username,
            {"username": username, "password_hash": security.hash_password(password)},
            expected_version=0,
        )
        return self._issue("admin", username)

    def admin_login(self, username: str, password: str) -> str:
        stored = self.storage.get("admin_accounts", username)
        if stored is None or not security.verify_password(password, stored[0]["password_hash"]):
            raise security.AuthFailure("bad username or password")
        return self._issue("admin", username)

    def _issue(self, kind: str, principal_id: str, study_id: str = "") -> str:
        return security.issue_token(self.secret, kind, principal_id, self.clock.now_ms(), study_id)

    def verify_bearer(self, token: str, kind: str) -> dict:
        payload = security.verify_token(self.secret, token, self.clock.now_ms())
        if payload["kind"] != kind:
            raise security.AuthFailure(f"{payload['kind']} token not allowed here")
        return payload

    # -- studies -------------------------------------------------------------

    def create_study(self, config: StudyConfig) -> tuple[StudyRuntime, list[ValidationIssue]]:
        issues = validate_study_config(config)
        invite_code = secrets.token_urlsafe(8)
        doc = {"config": config.model_dump(mode="json"), "invite_code": invite_code}
        version = self.storage.put("studies", config.study_id, doc, expected_version=0)
        runtime = StudyRuntime(
            study_id=config.study_id,
            config=config,
            version=version,
            invite_code=invite_code,
            log=EventLog(self.storage, config.study_id, self.clock),
        )
        with self._runtimes_guard:
            self._runtimes[config.study_id] = runtime
        return runtime, issues

    def update_study(self, study_id: str, config: StudyConfig) -> tuple[StudyRuntime, list[ValidationIssue]]:
        runtime = self.get_runtime(study_id)
        if config.study_id != study_id:
            raise StudyKitError("study_id cannot change")
        issues = validate_study_config(config)
        doc = {"config": config.model_dump(mode="json"), "invite_code": runtime.invite_code}
        runtime.version = self.storage.put("studies", study_id, doc, expected_version=runtime.version)
        runtime.config = config
        # Rule edits apply to future evaluation; fired instances stay as
        # persisted. Rebuild counters against the new rule set.
        with runtime.guard:
            session_ids = list(runtime.trigger_states)
        for session_id in session_ids:
            with runtime.lock_for(session_id):
                runtime.trigger_states[session_id] = _trigger_state_from_log(config, runtime.log.timeline(session_id))
        return runtime, issues

    def delete_study(self, study_id: str) -> None:
        self.get_runtime(study_id)
        self.storage.delete("studies", study_id)
        with self._runtimes_guard:
            self._runtimes.pop(study_id, None)

    def list_studies(self) -> list[dict]:
        summaries = []
        for key in self.storage.list_keys("studies"):
            stored = self.storage.get("studies", key)
            if stored is None:
                continue
            config = stored[0]["config"]
            summaries.append({"study_id": config["study_id"], "title": config.get("title", "")})
        return summaries

    def get_runtime(self, study_id: str) -> StudyRuntime:
        with self._runtimes_guard:
            runtime = self._runtimes.get(study_id)
            if runtime is not None:
                return runtime
        stored = self.storage.get("studies", study_id)
        if stored is None:
            raise UnknownStudy(study_id)
        doc, version = stored
        config = StudyConfig.model_validate(doc["config"])
        runtime = StudyRuntime(
            study_id=study_id,
            config=config,
            version=version,
            invite_code=doc["invite_code"],
            log=EventLog(self.storage, study_id, self.clock),
        )
        for key in self.storage.list_keys("sessions", prefix=f"{study_id}/"):
            stored_session = self.storage.get("sessions", key)
            if stored_session is None:
                continue
            session = ParticipantSession.model_validate(stored_session[0])
            runtime.sessions[session.session_id] = session
            runtime.session_versions[session.session_id] = stored_session[1]
        for session_id in runtime.sessions:
            runtime.log.ensure_session(session_id)
            self._refresh_session_counts(runtime, session_id)
            runtime.trigger_states[session_id] = _trigger_state_from_log(config, runtime.log.timeline(session_id))
        with self._runtimes_guard:
            winner = self._runtimes.setdefault(study_id, runtime)
        if winner is runtime:
            # re-anchor open sessions sitting on a task step (covers a crash
            # between session creation and the task_started append)
            for session in runtime.sessions.values():
                if not session.done:
                    with runtime.lock_for(session.session_id):
                        self._enter_step_if_task(runtime, session)
        return winner

    def _refresh_session_counts(self, runtime: StudyRuntime, session_id: str) -> None:
        session = runtime.sessions.get(session_id)
        if session is not None:
            session.interaction_counts = dict(runtime.log.views(session_id).counts)

    # -- credentials ----------------------------------------------------------

    def set_credentials(self, ref: str, provider_config: ProviderConfig, api_keys: dict[str, str]) -> None:
        """Store provider settings with API keys encrypted at rest."""
        stored = self.storage.get("credentials", ref)
        version = stored[1] if stored else 0
        doc = {
            "provider_config": provider_config.model_dump(mode="json"),
            "keys": {name: security.encrypt_value(self.secret, value) for name, value in api_keys.items() if value},
        }
        self.storage.put("credentials", ref, doc, expected_version=version)

    def gateway_for(self, ref: str) -> ProviderGateway:
        stored = self.storage.get("credentials", ref)
        if stored is None:
            return ProviderGateway(ProviderConfig())
        doc = stored[0]
        config = ProviderConfig.model_validate(doc["provider_config"])
        keys = {name: security.decrypt_value(self.secret, enc) for name, enc in doc.get("keys", {}).items()}
        return ProviderGateway(config, keys)

    def verify_credentials(self, ref: str, probe_timeout_s: float = 10.0) -> dict[str, str]:
        return self.gateway_for(ref).verify_credentials(probe_timeout_s)

    # -- participant lifecycle -------------------------------------------------

    def find_study_by_invite(self, invite_code: str) -> StudyRuntime:
        for key in self.storage.list_keys("studies"):
            stored = self.storage.get("studies", key)
            if stored and stored[0]["invite_code"] == invite_code:
                return self.get_runtime(key)
        raise NotFound("no study for this invite code")

    def register_participant(self, invite_code: str, external_label: str = "") -> dict:
        """Issue a participant identity and open their single session."""
        runtime = self.find_study_by_invite(invite_code)
        issues = [i for i in validate_study_config(runtime.config) if i.severity == "error"]
        if issues:
            raise StudyNotReady(issues)
        participant_id = f"p-{uuid.uuid4().hex[:12]}"
        session = self.create_session(runtime.study_id, participant_id, external_label)
        token = self._issue("participant", participant_id, runtime.study_id)
        return {
            "participant_id": participant_id,
            "session_id": session.session_id,
            "study_id": runtime.study_id,
            "token": token,
        }

    def create_session(self, study_id: str, participant_id: str, external_label: str = "") -> ParticipantSession:
        runtime = self.get_runtime(study_id)
        index_key = f"{study_id}/{participant_id}"
        if self.storage.get("participants", index_key) is not None:
            raise DuplicateSession(f"participant {participant_id} already has a session in study {study_id}")
        session_id = f"s-{uuid.uuid4().hex[:12]}"
        now = self.clock.now_ms()
        session = flow.init_session(runtime.config, participant_id, session_id, now, external_label)
        self.storage.put("participants", index_key, {"session_id": session_id}, expected_version=0)
        version = self.storage.put("sessions", f"{study_id}/{session_id}", session.model_dump(mode="json"), expected_version=0)
        with runtime.guard:
            runtime.sessions[session_id] = session
            runtime.session_versions[session_id] = version
            runtime.trigger_states[session_id] = TriggerState(rules=list(runtime.config.trigger_rules))
        runtime.log.append(
            session_id,
            "session_started",
            {"participant_id": participant_id, "study_id": study_id, "external_label": external_label},
        )
        with runtime.lock_for(session_id):
            self._enter_step_if_task(runtime, session)
        return session

    def participant_login(self, study_id: str, participant_id: str, invite_code: str) -> dict:
        runtime = self.get_runtime(study_id)
        if runtime.invite_code != invite_code:
            raise security.AuthFailure("bad invite code")
        stored = self.storage.get("participants", f"{study_id}/{participant_id}")
        if stored is None:
            raise NotFound("unknown participant")
        token = self._issue("participant", participant_id, study_id)
        return {"participant_id": participant_id, "session_id": stored[0]["session_id"], "study_id": study_id, "token": token}

    def _session(self, runtime: StudyRuntime, session_id: str) -> ParticipantSession:
        session = runtime.sessions.get(session_id)
        if session is None:
            raise NotFound(f"unknown session {session_id}")
        return session

    def _persist_session(self, runtime: StudyRuntime, session: ParticipantSession) -> None:
        key = f"{runtime.study_id}/{session.session_id}"
        expected = runtime.session_versions.get(session.session_id, 0)
        runtime.session_versions[session.session_id] = self.storage.put(
            "sessions", key, session.model_dump(mode="json"), expected_version=expected
        )
        runtime.sessions[session.session_id] = session

    def _enter_step_if_task(self, runtime: StudyRuntime, session: ParticipantSession) -> None:
        """When the cursor sits on a main task, anchor the trigger engine.

        Called under the session lock each time the cursor moves."""
        step = session.current_step()
        if step is None or step.kind != StepKind.MAIN_TASK:
            return
        state = runtime.trigger_states[session.session_id]
        if step.task_id in state.task_anchor_ms:
            state.current_task = step.task_id
            return
        event = runtime.log.append(
            session.session_id, "task_started", {"task_id": step.task_id, "step_index": session.cursor}
        )
        triggers.observe(state, TriggerEvent(kind="task_started", at_ms=event.server_ts, task_id=step.task_id))

    def _record_fired(self, runtime: StudyRuntime, session_id: str, fired: list[FiredTrigger]) -> None:
        for instance in fired:
            runtime.log.append(
                session_id,
                "popup_fired",
                {
                    "instance_id": instance.instance_id,
                    "rule_id": instance.rule_id,
                    "survey_id": instance.survey_id,
                    "cause": instance.cause,
                    "fired_at_ms": instance.fired_at,
                },
            )

    def _observe(self, runtime: StudyRuntime, session_id: str, event: TriggerEvent) -> list[FiredTrigger]:
        state = runtime.trigger_states[session_id]
        fired = triggers.observe(state, event)
        self._record_fired(runtime, session_id, fired)
        return fired

    def _popup_descriptor(self, runtime: StudyRuntime, instance: FiredTrigger) -> dict:
        instrument = find_instrument(runtime.config, instance.survey_id)
        return {
            "instance_id": instance.instance_id,
            "rule_id": instance.rule_id,
            "fired_at_ms": instance.fired_at,
            "survey": instrument.model_dump(mode="json") if instrument else None,
        }

    def pending_popups(self, runtime: StudyRuntime, session_id: str) -> list[dict]:
        state = runtime.trigger_states[session_id]
        return [self._popup_descriptor(runtime, inst) for inst in state.pending()]

    # -- participant actions ----------------------------------------------------

    def session_state(self, study_id: str, session_id: str) -> dict:
        runtime = self.get_runtime(study_id)
        session = self._session(runtime, session_id)
        views = runtime.log.views(session_id)
        step = session.current_step()
        descriptor: Optional[dict] = None
        if step is not None:
            descriptor = {
                "index": session.cursor,
                "kind": step.kind.value,
                "reminder_text": step.reminder_text,
                "total_steps": len(session.steps),
            }
            if step.kind == StepKind.CONSENT:
                descriptor["consent_text"] = runtime.config.consent_text
                descriptor["consent_checkboxes"] = list(runtime.config.consent_checkboxes)
            elif step.kind == StepKind.MAIN_TASK:
                task = next(t for t in runtime.config.tasks if t.task_id == step.task_id)
                note = views.notes.get(step.task_id)
                descriptor["task"] = task.model_dump(mode="json")
                descriptor["notes_enabled"] = runtime.config.settings.notes_enabled
                descriptor["min_interactions"] = runtime.config.settings.min_interactions
                descriptor["note"] = note.text if note else ""
                descriptor["turns"] = [
                    {
                        "turn_id": t.turn_id,
                        "turn_index": t.turn_index,
                        "prompt_text": t.prompt_text,
                        "response_text": t.response_text,
                        "completed": t.completed,
                        "turn_rating": t.turn_rating,
                    }
                    for t in (views.turns[tid] for tid in views.turn_order)
                    if t.task_id == step.task_id
                ]
                descriptor["queries"] = [
                    {
                        "query_id": q.query_id,
                        "query_text": q.query_text,
                        "result_count": q.result_count,
                        "serp": [item.model_dump() for item in q.serp],
                        "clicks": [{"url": c.url, "rank": c.rank} for c in q.clicks],
                    }
                    for q in (views.queries[qid] for qid in views.query_order)
                    if q.task_id == step.task_id
                ]
            else:
                instrument = flow.effective_instrument(runtime.config, step, self._intentions(views))
                descriptor["survey"] = instrument.model_dump(mode="json") if instrument else None
                descriptor["typology"] = runtime.config.typology.model_dump(mode="json")
        return {
            "study": {"study_id": runtime.study_id, "title": runtime.config.title},
            "session": {
                "session_id": session.session_id,
                "participant_id": session.participant_id,
                "cursor": session.cursor,
                "total_steps": len(session.steps),
                "completed_at": session.completed_at,
                "counts": views.counts,
            },
            "step": descriptor,
            "pending_popups": self.pending_popups(runtime, session_id),
        }

    @staticmethod
    def _intentions(views: SessionViews) -> list[str]:
        for submission in views.surveys:
            if submission.step_kind == StepKind.PRE_TASK.value:
                selected = submission.answers.get(flow.INTENTIONS_QUESTION_ID)
                if isinstance(selected, list):
                    return selected
        return []

    def _advance_session(
        self,
        runtime: StudyRuntime,
        session: ParticipantSession,
        completion,
        *,
        pending_popups: int = 0,
    ) -> flow.AdvanceResult:
        views = runtime.log.views(session.session_id)
        result = flow.advance(
            session,
            completion,
            runtime.config,
            now_ms=self.clock.now_ms(),
            counts=views.counts,
            pending_popups=pending_popups,
            intentions_selected=self._intentions(views),
        )
        return result

    def _finish_advance(self, runtime: StudyRuntime, result: flow.AdvanceResult) -> ParticipantSession:
        session = result.session
        self._persist_session(runtime, session)
        self._enter_step_if_task(runtime, session)
        if session.done:
            runtime.log.append(session.session_id, "session_completed", {})
        return session

    def submit_consent(self, study_id: str, session_id: str, checked: list[bool], client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = session.current_step()
            if step is None or step.kind != StepKind.CONSENT:
                raise WrongStep("current step is not consent")
            try:
                result = self._advance_session(runtime, session, ConsentAck(checked=checked))
            except GateError:
                runtime.log.append(session_id, "consent_submitted", {"checked": checked, "accepted": False}, client_ts)
                raise
            runtime.log.append(session_id, "consent_submitted", {"checked": checked, "accepted": True}, client_ts)
            session = self._finish_advance(runtime, result)
            return self._advance_reply(runtime, session)

    def _advance_reply(self, runtime: StudyRuntime, session: ParticipantSession) -> dict:
        return {
            "cursor": session.cursor,
            "completed": session.done,
            "completed_at": session.completed_at,
        }

    def _next_response_id(self, views: SessionViews, session_id: str) -> str:
        n = len(views.surveys) + sum(1 for p in views.popups.values() if p.answers is not None) + 1
        return f"{session_id}-resp{n}"

    def submit_survey(self, study_id: str, session_id: str, answers: dict, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = session.current_step()
            if step is None or step.kind not in flow.SURVEY_STEP_KINDS:
                raise WrongStep("current step is not a survey")
            views = runtime.log.views(session_id)
            instrument = flow.effective_instrument(runtime.config, step, self._intentions(views))
            survey_id = instrument.survey_id if instrument else ""
            try:
                result = self._advance_session(runtime, session, SurveyAnswers(answers=answers))
            except GateError as exc:
                if exc.reason == "attention_failed":
                    runtime.log.append(
                        session_id,
                        "survey_submitted",
                        {
                            "step_kind": step.kind.value,
                            "survey_id": survey_id,
                            "answers": answers,
                            "attention_failures": exc.data.get("attention_failures", []),
                            "accepted": False,
                            "response_id": "",
                        },
                        client_ts,
                    )
                raise
            response_id = self._next_response_id(views, session_id)
            now = self.clock.now_ms()
            self.storage.put(
                "responses",
                f"{study_id}/{response_id}",
                {
                    "response_id": response_id,
                    "session_id": session_id,
                    "survey_id": survey_id,
                    "context": step.kind.value,
                    "answers": answers,
                    "submitted_ms": client_ts if client_ts is not None else now,
                },
                expected_version=0,
            )
            runtime.log.append(
                session_id,
                "survey_submitted",
                {
                    "step_kind": step.kind.value,
                    "survey_id": survey_id,
                    "answers": answers,
                    "attention_failures": result.attention_failures,
                    "accepted": True,
                    "response_id": response_id,
                },
                client_ts,
            )
            session = self._finish_advance(runtime, result)
            return self._advance_reply(runtime, session)

    def _require_task_step(self, session: ParticipantSession, modality: Optional[Modality], config: StudyConfig) -> StepState:
        step = session.current_step()
        if step is None or step.kind != StepKind.MAIN_TASK:
            raise WrongStep("current step is not a task")
        if modality is not None:
            task = next((t for t in config.tasks if t.task_id == step.task_id), None)
            if task is None or task.modality != modality:
                raise WrongStep(f"current task is not a {modality.value} task")
        return step

    def chat_message(
        self,
        study_id: str,
        session_id: str,
        prompt: str,
        typing_start_ms: Optional[int] = None,
        typing_end_ms: Optional[int] = None,
        client_ts: Optional[int] = None,
    ) -> Iterator[dict]:
        """Append the prompt, stream provider chunks, observe triggers.

        Yields transport frames: ``{"chunk_index", "text"}`` per chunk and
        a terminal ``{"final": true, ...}`` frame carrying the turn id,
        pending popups, and the error if the stream failed. The prompt
        event is durable before the provider is contacted.
        """
        runtime = self.get_runtime(study_id)
        gateway = self.gateway_for(runtime.config.provider_config_ref)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = self._require_task_step(session, Modality.CHAT, runtime.config)
            views = runtime.log.views(session_id)
            turn_no = len(views.turns) + 1
            turn_id = f"{session_id}-t{turn_no}"
            turn_index = views.turn_counter_per_task.get(step.task_id, 0) + 1
            submit_ms = client_ts if client_ts is not None else self.clock.now_ms()
            anomaly = not (
                (typing_start_ms is None or typing_end_ms is None or typing_start_ms <= typing_end_ms)
                and (typing_end_ms is None or typing_end_ms <= submit_ms)
            )
            history = self._history_for_task(views, step.task_id) + [{"role": "user", "text": prompt}]
            prompt_event = runtime.log.append(
                session_id,
                "prompt_submitted",
                {
                    "task_id": step.task_id,
                    "turn_id": turn_id,
                    "turn_index": turn_index,
                    "text": prompt,
                    "typing_start_ms": typing_start_ms,
                    "typing_end_ms": typing_end_ms,
                    "timing_anomaly": anomaly,
                },
                client_ts,
            )
            self._observe(
                runtime,
                session_id,
                TriggerEvent(kind="prompt", at_ms=prompt_event.server_ts, task_id=step.task_id, event_id=prompt_event.event_id),
            )
            self._refresh_session_counts(runtime, session_id)

        def stream() -> Iterator[dict]:
            completed = False
            error: Optional[str] = None
            delivered = 0
            upstream = None
            try:
                for attempt in (1, 2):
                    upstream = gateway.chat_complete(history)
                    try:
                        for chunk in upstream:
                            runtime.log.append(
                                session_id,
                                "response_chunk",
                                {"turn_id": turn_id, "chunk_index": chunk.chunk_index, "text": chunk.text},
                            )
                            delivered += 1
                            yield {"chunk_index": chunk.chunk_index, "text": chunk.text}
                        completed = True
                        break
                    except ProviderUnavailable as exc:
                        # retry once, but only while nothing reached the
                        # participant; a partial stream is never replayed
                        if delivered == 0 and attempt == 1:
                            continue
                        error = str(exc)
                        break
            except StudyKitError as exc:
                error = str(exc)
            finally:
                if upstream is not None and hasattr(upstream, "close"):
                    upstream.close()  # stop upstream consumption on cancel
                with runtime.lock_for(session_id):
                    if completed:
                        event = runtime.log.append(session_id, "response_completed", {"turn_id": turn_id, "ok": True})
                        self._observe(
                            runtime,
                            session_id,
                            TriggerEvent(kind="response", at_ms=event.server_ts, task_id=step.task_id, event_id=event.event_id),
                        )
                    else:
                        runtime.log.append(
                            session_id,
                            "response_completed",
                            {"turn_id": turn_id, "ok": False, "error": error or "cancelled"},
                        )
                    self._refresh_session_counts(runtime, session_id)
                    popups = self.pending_popups(runtime, session_id)
            final: dict = {
                "final": True,
                "turn_id": turn_id,
                "popup": popups[0] if popups else None,
                "popups": popups,
            }
            if error is not None:
                final["error"] = error
            yield final

        return stream()

    @staticmethod
    def _history_for_task(views: SessionViews, task_id: str) -> list[dict]:
        history: list[dict] = []
        for turn_id in views.turn_order:
            turn = views.turns[turn_id]
            if turn.task_id != task_id:
                continue
            history.append({"role": "user", "text": turn.prompt_text})
            if turn.completed and turn.ok and turn.response_text:
                history.append({"role": "assistant", "text": turn.response_text})
        return history

    def search(
        self,
        study_id: str,
        session_id: str,
        query: str,
        typing_start_ms: Optional[int] = None,
        typing_end_ms: Optional[int] = None,
        client_ts: Optional[int] = None,
    ) -> dict:
        """Run the query, snapshot the SERP into the log, observe triggers."""
        runtime = self.get_runtime(study_id)
        gateway = self.gateway_for(runtime.config.provider_config_ref)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = self._require_task_step(session, Modality.SEARCH, runtime.config)
            views = runtime.log.views(session_id)
            query_no = len(views.queries) + 1
            query_id = f"{session_id}-q{query_no}"
            try:
                page = gateway.search(query)
            except EmptyResults:
                page = ResultPage(query_text=query, results=[])
            except ProviderUnavailable:
                page = gateway.search(query)  # single retry
            issue_ms = client_ts if client_ts is not None else self.clock.now_ms()
            anomaly = not (
                (typing_start_ms is None or typing_end_ms is None or typing_start_ms <= typing_end_ms)
                and (typing_end_ms is None or typing_end_ms <= issue_ms)
            )
            serp = [
                {"rank": r.rank, "title": r.title, "url": r.url, "snippet": r.snippet}
                for r in page.results
            ]
            event = runtime.log.append(
                session_id,
                "query_submitted",
                {
                    "task_id": step.task_id,
                    "query_id": query_id,
                    "text": query,
                    "typing_start_ms": typing_start_ms,
                    "typing_end_ms": typing_end_ms,
                    "result_count": len(serp),
                    "serp": serp,
                    "timing_anomaly": anomaly,
                },
                client_ts,
            )
            self._observe(
                runtime,
                session_id,
                TriggerEvent(kind="query", at_ms=event.server_ts, task_id=step.task_id, event_id=event.event_id),
            )
            self._refresh_session_counts(runtime, session_id)
            return {
                "query_id": query_id,
                "query_text": query,
                "results": serp,
                "popups": self.pending_popups(runtime, session_id),
            }

    def report_click(self, study_id: str, session_id: str, query_id: str, url: str, rank: int, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            self._session(runtime, session_id)
            try:
                runtime.log.append(session_id, "result_clicked", {"query_id": query_id, "url": url, "rank": rank}, client_ts)
                return {"accepted": True}
            except OutOfOrderTurn as exc:
                runtime.log.append(
                    session_id,
                    "click_rejected",
                    {"query_id": query_id, "url": url, "rank": rank, "reason": str(exc)},
                    client_ts,
                )
                return {"accepted": False, "reason": str(exc)}

    def save_note(self, study_id: str, session_id: str, text: str, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        if not runtime.config.settings.notes_enabled:
            raise NotesDisabled("note taking is disabled for this study")
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = self._require_task_step(session, None, runtime.config)
            runtime.log.append(session_id, "note_saved", {"task_id": step.task_id, "text": text}, client_ts)
            return {"saved": True}

    def rate_turn(self, study_id: str, session_id: str, turn_id: str, rating: int, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            self._session(runtime, session_id)
            turn = runtime.log.rate_turn(session_id, turn_id, rating, client_ts)
            return {"turn_id": turn_id, "turn_rating": turn.turn_rating}

    def rate_trajectory(self, study_id: str, session_id: str, task_id: str, rating: int, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            active = {
                s.task_id
                for s in session.steps
                if s.kind == StepKind.MAIN_TASK and s.status in ("in_progress", "completed") and s.task_id
            }
            runtime.log.rate_trajectory(session_id, task_id, rating, active, client_ts)
            return {"task_id": task_id, "trajectory_rating": rating}

    def submit_task(self, study_id: str, session_id: str, final_note: Optional[str] = None, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            session = self._session(runtime, session_id)
            step = self._require_task_step(session, None, runtime.config)
            state = runtime.trigger_states[session_id]
            before = {inst.instance_id for inst in state.instances}
            pending = triggers.pending_before_submission(state, self.clock.now_ms())
            self._record_fired(runtime, session_id, [i for i in pending if i.instance_id not in before])
            if pending:
                runtime.log.append(
                    session_id,
                    "task_submitted",
                    {"task_id": step.task_id, "final_note": final_note, "accepted": False, "reason": "pending_trigger"},
                    client_ts,
                )
                raise GateError(
                    "pending_trigger",
                    f"{len(pending)} popup(s) must be answered before submitting",
                    {"popups": [self._popup_descriptor(runtime, inst) for inst in pending]},
                )
            if final_note is not None:
                if not runtime.config.settings.notes_enabled:
                    raise NotesDisabled("note taking is disabled for this study")
                runtime.log.append(session_id, "note_saved", {"task_id": step.task_id, "text": final_note}, client_ts)
            try:
                result = self._advance_session(runtime, session, TaskSubmit(final_note=final_note))
            except GateError as exc:
                runtime.log.append(
                    session_id,
                    "task_submitted",
                    {"task_id": step.task_id, "final_note": final_note, "accepted": False, "reason": exc.reason},
                    client_ts,
                )
                raise
            runtime.log.append(
                session_id,
                "task_submitted",
                {"task_id": step.task_id, "final_note": final_note, "accepted": True, "reason": ""},
                client_ts,
            )
            self._observe(runtime, session_id, TriggerEvent(kind="task_ended", at_ms=self.clock.now_ms(), task_id=step.task_id))
            session = self._finish_advance(runtime, result)
            return self._advance_reply(runtime, session)

    def answer_popup(self, study_id: str, session_id: str, instance_id: str, answers: dict, client_ts: Optional[int] = None) -> dict:
        runtime = self.get_runtime(study_id)
        with runtime.lock_for(session_id):
            self._session(runtime, session_id)
            state = runtime.trigger_states[session_id]
            instance = state.find_instance(instance_id)
            if instance is None:
                raise triggers.UnknownInstance(instance_id)
            if instance.state == "answered":
                raise triggers.AlreadyAnswered(instance_id)
            instrument = find_instrument(runtime.config, instance.survey_id)
            if instrument is not None:
                problems = validate_answers(instrument, answers)
                if problems:
                    raise GateError(
                        "missing_required",
                        "; ".join(f"{p.path}: {p.message}" for p in problems),
                        {"problems": [p.model_dump() for p in problems]},
                    )
            views = runtime.log.views(session_id)
            response_id = self._next_response_id(views, session_id)
            now = self.clock.now_ms()
            self.storage.put(
                "responses",
                f"{study_id}/{response_id}",
                {
                    "response_id": response_id,
                    "session_id": session_id,
                    "survey_id": instance.survey_id,
                    "context": "in_situ",
                    "answers": answers,
                    "submitted_ms": client_ts if client_ts is not None else now,
                },
                expected_version=0,
            )
            event = runtime.log.append(
                session_id,
                "popup_answered",
                {
                    "instance_id": instance_id,
                    "rule_id": instance.rule_id,
                    "survey_id": instance.survey_id,
                    "answers": answers,
                    "response_id": response_id,
                },
                client_ts,
            )
            triggers.acknowledge(state, instance_id, response_id, event.server_ts)
            return {"instance_id": instance_id, "response_id": response_id, "pending_popups": self.pending_popups(runtime, session_id)}

    # -- clock & admin data ------------------------------------------------------

    def advance_clock(self, seconds: float) -> int:
        """Advance the virtual clock, injecting per-second ticks into every
        open session. Only available in test mode."""
        if not self.test_mode or not isinstance(self.clock, VirtualClock):
            raise StudyKitError("clock injection requires test mode")
        whole, remainder = divmod(int(seconds * 1000), 1000)
        for _ in range(whole):
            now = self.clock.advance(1000)
            self._tick_all(now)
        if remainder:
            self.clock.advance(remainder)
        return self.clock.now_ms()

    def _tick_all(self, now_ms: int) -> None:
        with self._runtimes_guard:
            runtimes = list(self._runtimes.values())
        for runtime in runtimes:
            if not any(r.condition.kind == "periodic" for r in runtime.config.trigger_rules):
                continue
            with runtime.guard:
                session_ids = list(runtime.sessions)
            for session_id in session_ids:
                session = runtime.sessions.get(session_id)
                if session is None or session.done:
                    continue
                with runtime.lock_for(session_id):
                    self._observe(runtime, session_id, TriggerEvent(kind="tick", at_ms=now_ms))

    def tick(self) -> None:
        """Real-clock tick injection for production periodic triggers."""
        self._tick_all(self.clock.now_ms())

    def session_summaries(self, study_id: str) -> list[dict]:
        runtime = self.get_runtime(study_id)
        summaries = []
        for session_id in sorted(runtime.sessions):
            session = runtime.sessions[session_id]
            views = runtime.log.views(session_id) if runtime.log.has_session(session_id) else SessionViews()
            summaries.append(
                {
                    "session_id": session_id,
                    "participant_id": session.participant_id,
                    "external_label": session.external_label,
                    "cursor": session.cursor,
                    "total_steps": len(session.steps),
                    "completed_at": session.completed_at,
                    "counts": views.counts,
                    "surveys": [
                        {
                            "step_kind": s.step_kind,
                            "survey_id": s.survey_id,
                            "answers": s.answers,
                            "attention_failures": s.attention_failures,
                        }
                        for s in views.surveys
                    ],
                    "popups_answered": sum(1 for p in views.popups.values() if p.answers is not None),
                }
            )
        return summaries

    def timeline(self, study_id: str, session_id: str) -> list[dict]:
        runtime = self.get_runtime(study_id)
        return [e.model_dump(mode="json") for e in runtime.log.timeline(session_id)]

    def export_study(self, study_id: str) -> ExportBundle:
        """Prefix-consistent snapshot export of the eight CSV datasets."""
        runtime = self.get_runtime(study_id)
        with runtime.guard:
            sessions = list(runtime.sessions.values())
        views = {}
        for session in sessions:
            if runtime.log.has_session(session.session_id):
                views[session.session_id] = fold_views(runtime.log.timeline(session.session_id))
        return build_bundle(runtime.config, sessions, views)

    def export_zip(self, study_id: str) -> bytes:
        return exporting.zip_bundle(self.export_study(study_id))
