"""HTTP service boundary: admin and participant endpoints.

JSON request/response bodies, opaque bearer tokens (admin and participant
tokens are not interchangeable), server-sent events for chat streaming.
First-run admin setup stays open only while zero admin accounts exist.
A fixed per-token request cap is the only rate limiting.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import exporting, model, security, triggers
from .events import (
    OutOfOrderTurn,
    PayloadInvalid,
    ResponseNotComplete,
    SessionClosed,
    UnknownSession,
    UnknownTask,
    UnknownTurn,
)
from .exporting import UnknownStudy
from .flow import DuplicateSession, GateError, WrongStep
from .model import (
    BadPermutation,
    FlowStep,
    IntentionTypology,
    ParseError,
    SchemaError,
    StudyConfig,
    StudyKitError,
    SurveyInstrument,
    TriggerRule,
)
from .providers import AuthError, ContentError, ProviderConfig, ProviderUnavailable
from .service import AdminExists, AppCore, NotesDisabled, NotFound, StudyNotReady
from .storage import StorageFailure, VersionConflict

REQUESTS_PER_TOKEN_PER_MINUTE = 600

_STATUS_BY_ERROR = [
    (security.AuthFailure, 401),
    (AuthError, 502),
    (ProviderUnavailable, 502),
    (ContentError, 502),
    ((NotFound, UnknownStudy, UnknownSession, UnknownTurn, UnknownTask, triggers.UnknownInstance), 404),
    ((ParseError, SchemaError, BadPermutation, PayloadInvalid, OutOfOrderTurn), 422),
    (
        (
            AdminExists,
            DuplicateSession,
            WrongStep,
            NotesDisabled,
            SessionClosed,
            ResponseNotComplete,
            triggers.AlreadyAnswered,
            VersionConflict,
        ),
        409,
    ),
    (StorageFailure, 500),
]


class SetupRequest(BaseModel):
    username: str
    password: str


class RegisterRequest(BaseModel):
    invite_code: str
    external_label: str = ""


class ParticipantLoginRequest(BaseModel):
    study_id: str
    participant_id: str
    invite_code: str


class ConsentRequest(BaseModel):
    checked: list[bool]
    client_ts: Optional[int] = None


class SurveyRequest(BaseModel):
    answers: dict[str, model.AnswerValue]
    client_ts: Optional[int] = None


class ChatRequest(BaseModel):
    prompt: str
    typing_start_ms: Optional[int] = None
    typing_end_ms: Optional[int] = None
    client_ts: Optional[int] = None


class SearchRequest(BaseModel):
    query: str
    typing_start_ms: Optional[int] = None
    typing_end_ms: Optional[int] = None
    client_ts: Optional[int] = None


class ClickRequest(BaseModel):
    query_id: str
    url: str
    rank: int
    client_ts: Optional[int] = None


class NoteRequest(BaseModel):
    text: str
    client_ts: Optional[int] = None


class RateTurnRequest(BaseModel):
    turn_id: str
    rating: int
    client_ts: Optional[int] = None


class RateTrajectoryRequest(BaseModel):
    rating: int
    task_id: Optional[str] = None
    client_ts: Optional[int] = None


class SubmitTaskRequest(BaseModel):
    final_note: Optional[str] = None
    client_ts: Optional[int] = None


class PopupAnswerRequest(BaseModel):
    instance_id: str
    answers: dict[str, model.AnswerValue]
    client_ts: Optional[int] = None


class CredentialsRequest(BaseModel):
    provider_config: ProviderConfig
    api_keys: dict[str, str] = Field(default_factory=dict)


class FlowUpdateRequest(BaseModel):
    flow: list[FlowStep]


class TriggerUpdateRequest(BaseModel):
    trigger_rules: list[TriggerRule]


class ClockRequest(BaseModel):
    advance_s: float = Field(gt=0)


class _RateLimiter:
    def __init__(self, per_minute: int) -> None:
        self.per_minute = per_minute
        self.windows: dict[str, tuple[int, int]] = {}

    def check(self, token: str) -> bool:
        window = int(time.time() // 60)
        start, count = self.windows.get(token, (window, 0))
        if start != window:
            start, count = window, 0
        count += 1
        self.windows[token] = (start, count)
        return count <= self.per_minute


def create_app(core: AppCore, ui_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="studykit", docs_url=None, redoc_url=None)
    # auth is bearer-token (no cookies), so a UI served from another origin
    # during development is safe to allow
    # the wildcard does not cover Authorization per the Fetch spec
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["Authorization", "Content-Type"],
    )
    limiter = _RateLimiter(REQUESTS_PER_TOKEN_PER_MINUTE)
    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    def _bearer(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise security.AuthFailure("missing bearer token")
        token = header[len("bearer "):].strip()
        if not limiter.check(token):
            raise StudyKitError("rate limit exceeded")
        return token

    def admin_auth(request: Request) -> dict:
        return core.verify_bearer(_bearer(request), "admin")

    def participant_auth(request: Request) -> dict:
        payload = core.verify_bearer(_bearer(request), "participant")
        stored = core.storage.get("participants", f"{payload['study_id']}/{payload['id']}")
        if stored is None:
            raise security.AuthFailure("participant no longer registered")
        payload["session_id"] = stored[0]["session_id"]
        return payload

    @app.exception_handler(StudyKitError)
    async def _studykit_error(request: Request, exc: StudyKitError):
        status = 400
        for types, code in _STATUS_BY_ERROR:
            if isinstance(exc, types):
                status = code
                break
        body: dict = {"error": {"kind": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, GateError):
            status = 409
            body["error"]["reason"] = exc.reason
            body["error"]["data"] = exc.data
        elif isinstance(exc, StudyNotReady):
            status = 409
            body["error"]["issues"] = [i.model_dump() for i in exc.issues]
        elif str(exc) == "rate limit exceeded":
            status = 429
        return JSONResponse(status_code=status, content=body)

    # -- health & setup ------------------------------------------------------

    @app.get("/api/health")
    def health() -> dict:
        return {
            "status": "ready",
            "admin_setup_required": core.admin_count() == 0,
            "test_mode": core.test_mode,
        }

    @app.post("/api/setup", status_code=201)
    def setup(body: SetupRequest) -> dict:
        return {"token": core.setup_admin(body.username, body.password)}

    @app.post("/api/admin/login")
    def admin_login(body: SetupRequest) -> dict:
        return {"token": core.admin_login(body.username, body.password)}

    # -- admin: studies --------------------------------------------------------

    @app.get("/api/admin/studies")
    def list_studies(admin: dict = Depends(admin_auth)) -> dict:
        return {"studies": core.list_studies()}

    @app.post("/api/admin/studies", status_code=201)
    def create_study(config: StudyConfig, admin: dict = Depends(admin_auth)) -> dict:
        runtime, issues = core.create_study(config)
        return {
            "study_id": runtime.study_id,
            "invite_code": runtime.invite_code,
            "issues": [i.model_dump() for i in issues],
        }

    @app.get("/api/admin/studies/{study_id}")
    def get_study(study_id: str, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        issues = model.validate_study_config(runtime.config)
        return {
            "config": runtime.config.model_dump(mode="json"),
            "invite_code": runtime.invite_code,
            "version": runtime.version,
            "issues": [i.model_dump() for i in issues],
        }

    @app.put("/api/admin/studies/{study_id}")
    def update_study(study_id: str, config: StudyConfig, admin: dict = Depends(admin_auth)) -> dict:
        _, issues = core.update_study(study_id, config)
        return {"issues": [i.model_dump() for i in issues]}

    @app.delete("/api/admin/studies/{study_id}")
    def delete_study(study_id: str, admin: dict = Depends(admin_auth)) -> dict:
        core.delete_study(study_id)
        return {"deleted": True}

    @app.put("/api/admin/studies/{study_id}/flow")
    def update_flow(study_id: str, body: FlowUpdateRequest, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        updated = runtime.config.model_copy(update={"flow": body.flow})
        _, issues = core.update_study(study_id, updated)
        return {"issues": [i.model_dump() for i in issues]}

    @app.put("/api/admin/studies/{study_id}/surveys/{key}")
    def upsert_survey(study_id: str, key: str, instrument: SurveyInstrument, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        surveys = dict(runtime.config.surveys)
        surveys[key] = instrument
        _, issues = core.update_study(study_id, runtime.config.model_copy(update={"surveys": surveys}))
        return {"issues": [i.model_dump() for i in issues]}

    @app.delete("/api/admin/studies/{study_id}/surveys/{key}")
    def delete_survey(study_id: str, key: str, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        surveys = dict(runtime.config.surveys)
        if key not in surveys:
            raise NotFound(f"no survey under key {key!r}")
        del surveys[key]
        _, issues = core.update_study(study_id, runtime.config.model_copy(update={"surveys": surveys}))
        return {"issues": [i.model_dump() for i in issues]}

    @app.post("/api/admin/studies/{study_id}/surveys/{key}/import")
    async def import_survey(study_id: str, key: str, request: Request, admin: dict = Depends(admin_auth)) -> dict:
        raw = await request.body()
        instrument = model.import_survey_json(raw)
        runtime = core.get_runtime(study_id)
        surveys = dict(runtime.config.surveys)
        surveys[key] = instrument
        _, issues = core.update_study(study_id, runtime.config.model_copy(update={"surveys": surveys}))
        return {"instrument": instrument.model_dump(mode="json"), "issues": [i.model_dump() for i in issues]}

    @app.get("/api/admin/studies/{study_id}/surveys/{key}/export")
    def export_survey(study_id: str, key: str, admin: dict = Depends(admin_auth)) -> Response:
        runtime = core.get_runtime(study_id)
        instrument = runtime.config.surveys.get(key)
        if instrument is None:
            raise NotFound(f"no survey under key {key!r}")
        return Response(content=model.export_survey_json(instrument), media_type="application/json")

    @app.put("/api/admin/studies/{study_id}/typology")
    def update_typology(study_id: str, typology: IntentionTypology, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        _, issues = core.update_study(study_id, runtime.config.model_copy(update={"typology": typology}))
        return {"issues": [i.model_dump() for i in issues]}

    @app.put("/api/admin/studies/{study_id}/triggers")
    def update_triggers(study_id: str, body: TriggerUpdateRequest, admin: dict = Depends(admin_auth)) -> dict:
        runtime = core.get_runtime(study_id)
        _, issues = core.update_study(study_id, runtime.config.model_copy(update={"trigger_rules": body.trigger_rules}))
        return {"issues": [i.model_dump() for i in issues]}

    # -- admin: credentials, data --------------------------------------------

    @app.put("/api/admin/credentials/{ref}")
    def set_credentials(ref: str, body: CredentialsRequest, admin: dict = Depends(admin_auth)) -> dict:
        core.set_credentials(ref, body.provider_config, body.api_keys)
        return {"stored": True}

    @app.post("/api/admin/credentials/{ref}/verify")
    def verify_credentials(ref: str, admin: dict = Depends(admin_auth)) -> dict:
        return core.verify_credentials(ref)

    @app.get("/api/admin/studies/{study_id}/responses")
    def list_responses(study_id: str, admin: dict = Depends(admin_auth)) -> dict:
        return {"sessions": core.session_summaries(study_id)}

    @app.get("/api/admin/studies/{study_id}/sessions/{session_id}/timeline")
    def session_timeline(study_id: str, session_id: str, admin: dict = Depends(admin_auth)) -> dict:
        return {"events": core.timeline(study_id, session_id)}

    @app.get("/api/admin/studies/{study_id}/export")
    def export_zip(study_id: str, admin: dict = Depends(admin_auth)) -> Response:
        payload = core.export_zip(study_id)
        return Response(
            content=payload,
            media_type="application/zip",
            headers={"Content-Disposition": f'attachment; filename="{study_id}-export.zip"'},
        )

    @app.get("/api/admin/studies/{study_id}/export/{name}")
    def export_csv(study_id: str, name: str, admin: dict = Depends(admin_auth)) -> Response:
        if name not in exporting.FILE_NAMES:
            raise NotFound(f"unknown export file {name!r}")
        bundle = core.export_study(study_id)
        return Response(
            content=bundle.files[name],
            media_type="text/csv",
            headers={"Content-Disposition": f'attachment; filename="{name}"'},
        )

    # -- participant ------------------------------------------------------------

    @app.post("/api/participant/register", status_code=201)
    def register(body: RegisterRequest) -> dict:
        return core.register_participant(body.invite_code, body.external_label)

    @app.post("/api/participant/login")
    def participant_login(body: ParticipantLoginRequest) -> dict:
        return core.participant_login(body.study_id, body.participant_id, body.invite_code)

    @app.get("/api/participant/state")
    def participant_state(auth: dict = Depends(participant_auth)) -> dict:
        return core.session_state(auth["study_id"], auth["session_id"])

    @app.post("/api/participant/consent")
    def submit_consent(body: ConsentRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.submit_consent(auth["study_id"], auth["session_id"], body.checked, body.client_ts)

    @app.post("/api/participant/survey")
    def submit_survey(body: SurveyRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.submit_survey(auth["study_id"], auth["session_id"], body.answers, body.client_ts)

    @app.post("/api/participant/chat")
    def chat(body: ChatRequest, auth: dict = Depends(participant_auth)) -> StreamingResponse:
        frames = core.chat_message(
            auth["study_id"],
            auth["session_id"],
            body.prompt,
            body.typing_start_ms,
            body.typing_end_ms,
            body.client_ts,
        )

        def sse():
            for frame in frames:
                yield f"data: {json.dumps(frame, ensure_ascii=False)}\n\n"

        return StreamingResponse(
            sse(),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
        )

    @app.post("/api/participant/search")
    def search(body: SearchRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.search(
            auth["study_id"],
            auth["session_id"],
            body.query,
            body.typing_start_ms,
            body.typing_end_ms,
            body.client_ts,
        )

    @app.post("/api/participant/click")
    def click(body: ClickRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.report_click(auth["study_id"], auth["session_id"], body.query_id, body.url, body.rank, body.client_ts)

    @app.post("/api/participant/note")
    def note(body: NoteRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.save_note(auth["study_id"], auth["session_id"], body.text, body.client_ts)

    @app.post("/api/participant/rate-turn")
    def rate_turn(body: RateTurnRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.rate_turn(auth["study_id"], auth["session_id"], body.turn_id, body.rating, body.client_ts)

    @app.post("/api/participant/rate-trajectory")
    def rate_trajectory(body: RateTrajectoryRequest, auth: dict = Depends(participant_auth)) -> dict:
        task_id = body.task_id
        if task_id is None:
            runtime = core.get_runtime(auth["study_id"])
            session = runtime.sessions.get(auth["session_id"])
            candidates = [
                s.task_id
                for s in (session.steps if session else [])
                if s.kind.value == "main_task" and s.status in ("in_progress", "completed")
            ]
            if not candidates:
                raise UnknownTask("no active or completed task to rate")
            task_id = candidates[-1]
        return core.rate_trajectory(auth["study_id"], auth["session_id"], task_id, body.rating, body.client_ts)

    @app.post("/api/participant/submit-task")
    def submit_task(body: SubmitTaskRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.submit_task(auth["study_id"], auth["session_id"], body.final_note, body.client_ts)

    @app.post("/api/participant/popup")
    def answer_popup(body: PopupAnswerRequest, auth: dict = Depends(participant_auth)) -> dict:
        return core.answer_popup(auth["study_id"], auth["session_id"], body.instance_id, body.answers, body.client_ts)

    # -- test-mode clock ---------------------------------------------------------

    @app.post("/api/test/clock")
    def advance_clock(body: ClockRequest) -> dict:
        if not core.test_mode:
            raise NotFound("clock injection is only available in test mode")
        return {"now_ms": core.advance_clock(body.advance_s)}

    return app
