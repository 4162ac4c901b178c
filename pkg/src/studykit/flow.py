"""Participant progression through the enabled flow steps.

The flow is strictly forward-only. The enabled steps are materialized into
the session at init time, so live sessions are unaffected by later config
edits. Each step gates advancement:

* consent: every acknowledgment checkbox must be checked;
* surveys: required questions answered with type-valid values, and the
  attention policy may block on failed checks;
* main task: no pending popups, and the modality counter (prompts for
  chat, queries for search) must reach ``min_interactions``.

``advance`` is pure: it returns an updated copy and raises GateError
without side effects, which keeps replaying a session's persisted step
completions deterministic.
"""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from . import model
from .model import (
    AnswerValue,
    AttentionFailPolicy,
    FlowStep,
    LikertType,
    Modality,
    MultipleChoiceType,
    Question,
    StepKind,
    StudyConfig,
    StudyKitError,
    SurveyInstrument,
)

INTENTIONS_QUESTION_ID = "__intentions__"
FULFILLMENT_PREFIX = "__fulfillment__"

SURVEY_STEP_KINDS = {
    StepKind.BACKGROUND_SURVEY,
    StepKind.PRE_TASK,
    StepKind.POST_TASK,
    StepKind.EXPERIENCE_SURVEY,
    StepKind.END_SURVEY,
    StepKind.CUSTOM_SURVEY,
}


class DuplicateSession(StudyKitError):
    pass


class WrongStep(StudyKitError):
    """Completion or action does not target the step at the cursor."""


class GateError(StudyKitError):
    def __init__(self, reason: str, message: str, data: Optional[dict] = None) -> None:
        super().__init__(message)
        self.reason = reason
        self.data = data or {}


class ConsentAck(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["consent"] = "consent"
    checked: list[bool]


class SurveyAnswers(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["survey"] = "survey"
    answers: dict[str, AnswerValue]


class TaskSubmit(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["task_submit"] = "task_submit"
    final_note: Optional[str] = None


StepCompletion = Union[ConsentAck, SurveyAnswers, TaskSubmit]


class StepState(BaseModel):
    kind: StepKind
    order: int
    reminder_text: Optional[str] = None
    survey_id: Optional[str] = None
    task_id: Optional[str] = None
    status: Literal["not_started", "in_progress", "completed"] = "not_started"
    completed_ms: Optional[int] = None


class ParticipantSession(BaseModel):
    session_id: str
    participant_id: str
    study_id: str
    external_label: str = ""
    steps: list[StepState]
    cursor: int = 0
    interaction_counts: dict[str, int] = Field(
        default_factory=lambda: {"prompts": 0, "responses": 0, "queries": 0}
    )
    started_at: int
    completed_at: Optional[int] = None

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.steps)

    def current_step(self) -> Optional[StepState]:
        if self.done:
            return None
        return self.steps[self.cursor]


def enabled_sequence(config: StudyConfig) -> list[FlowStep]:
    """Enabled steps sorted by their configured order."""
    return sorted((s for s in config.flow if s.enabled), key=lambda s: s.order)


def init_session(
    config: StudyConfig,
    participant_id: str,
    session_id: str,
    now_ms: int,
    external_label: str = "",
) -> ParticipantSession:
    """Materialize the enabled flow into a fresh session at cursor 0."""
    steps = [
        StepState(
            kind=s.kind,
            order=s.order,
            reminder_text=s.reminder_text,
            survey_id=s.survey_id,
            task_id=s.task_id,
        )
        for s in enabled_sequence(config)
    ]
    if steps:
        steps[0].status = "in_progress"
    session = ParticipantSession(
        session_id=session_id,
        participant_id=participant_id,
        study_id=config.study_id,
        external_label=external_label,
        steps=steps,
        started_at=now_ms,
    )
    if not steps:
        session.completed_at = now_ms
    return session


def _completion_matches(step: StepState, completion: StepCompletion) -> bool:
    if step.kind == StepKind.CONSENT:
        return isinstance(completion, ConsentAck)
    if step.kind == StepKind.MAIN_TASK:
        return isinstance(completion, TaskSubmit)
    if step.kind in SURVEY_STEP_KINDS:
        return isinstance(completion, SurveyAnswers)
    return False


def effective_instrument(
    config: StudyConfig,
    step: StepState,
    intentions_selected: Optional[list[str]] = None,
) -> Optional[SurveyInstrument]:
    """The instrument a survey step presents, including typology items.

    Pre-task questionnaires gain a multi-select question over the study's
    intention categories; post-task questionnaires gain one fulfillment
    scale per category the participant selected.
    """
    flow_step = FlowStep(kind=step.kind, order=step.order, survey_id=step.survey_id, task_id=step.task_id)
    base = model.resolve_step_instrument(config, flow_step)
    if base is None:
        return None
    categories = config.typology.categories
    extra: list[Question] = []
    if step.kind == StepKind.PRE_TASK and categories:
        extra.append(
            Question(
                question_id=INTENTIONS_QUESTION_ID,
                prompt="Which intentions apply to your upcoming task? Select all that apply.",
                answer_type=MultipleChoiceType(options=[c.category_id for c in categories], allow_multiple=True),
                required=False,
            )
        )
    elif step.kind == StepKind.POST_TASK and categories and intentions_selected:
        selected = [c for c in categories if c.category_id in set(intentions_selected)]
        for cat in selected:
            extra.append(
                Question(
                    question_id=f"{FULFILLMENT_PREFIX}{cat.category_id}",
                    prompt=f"How fully was this intention fulfilled: {cat.label}",
                    answer_type=LikertType(points=5, low_anchor="Not at all", high_anchor="Completely"),
                    required=False,
                )
            )
    if not extra:
        return base
    return base.model_copy(update={"questions": list(base.questions) + extra})


class AdvanceResult(BaseModel):
    session: ParticipantSession
    attention_failures: list[dict] = Field(default_factory=list)


def _task_counter_key(config: StudyConfig, task_id: str) -> str:
    for task in config.tasks:
        if task.task_id == task_id:
            return "prompts" if task.modality == Modality.CHAT else "queries"
    raise WrongStep(f"unknown task {task_id!r}")


def advance(
    session: ParticipantSession,
    completion: StepCompletion,
    config: StudyConfig,
    *,
    now_ms: int,
    counts: Optional[dict[str, int]] = None,
    pending_popups: int = 0,
    intentions_selected: Optional[list[str]] = None,
) -> AdvanceResult:
    """Apply a step completion at the cursor, enforcing the step's gate.

    Returns a new session (the input is never mutated). ``counts`` are the
    session's event-derived interaction counters; ``pending_popups`` is the
    number of unanswered popups as reported by the trigger engine.
    """
    if session.done:
        raise WrongStep("session already completed")
    step = session.steps[session.cursor]
    if not _completion_matches(step, completion):
        raise WrongStep(f"completion {completion.kind!r} does not match step {step.kind.value!r}")
    counts = counts if counts is not None else session.interaction_counts
    attention_failures: list[dict] = []

    if isinstance(completion, ConsentAck):
        expected = len(config.consent_checkboxes)
        if len(completion.checked) != expected:
            raise GateError("consent_incomplete", f"expected {expected} checkboxes, got {len(completion.checked)}")
        if not all(completion.checked):
            raise GateError("consent_incomplete", "all consent checkboxes must be checked")
    elif isinstance(completion, SurveyAnswers):
        instrument = effective_instrument(config, step, intentions_selected)
        if instrument is None:
            raise WrongStep(f"no instrument configured for step {step.kind.value!r}")
        problems = model.validate_answers(instrument, completion.answers)
        if problems:
            raise GateError(
                "missing_required",
                "; ".join(f"{p.path}: {p.message}" for p in problems),
                {"problems": [p.model_dump() for p in problems]},
            )
        attention_failures = model.evaluate_attention(instrument, completion.answers)
        if attention_failures and config.settings.attention_fail_policy == AttentionFailPolicy.BLOCK_ADVANCE:
            raise GateError(
                "attention_failed",
                f"{len(attention_failures)} attention check(s) failed",
                {"attention_failures": attention_failures},
            )
    elif isinstance(completion, TaskSubmit):
        if pending_popups > 0:
            raise GateError("pending_trigger", f"{pending_popups} popup(s) must be answered before submitting")
        key = _task_counter_key(config, step.task_id)
        have = counts.get(key, 0)
        need = config.settings.min_interactions
        if have < need:
            raise GateError(
                "below_min_interactions",
                f"{have}/{need} {key} so far",
                {"have": have, "need": need, "counter": key},
            )

    updated = session.model_copy(deep=True)
    updated.interaction_counts = dict(counts)
    current = updated.steps[updated.cursor]
    current.status = "completed"
    current.completed_ms = now_ms
    updated.cursor += 1
    if updated.cursor >= len(updated.steps):
        updated.completed_at = now_ms
    else:
        updated.steps[updated.cursor].status = "in_progress"
    return AdvanceResult(session=updated, attention_failures=attention_failures)
