"""Study configuration types, validation, and survey JSON import/export.

Everything here is an immutable value: operations return new objects and
never mutate their inputs, so configs can be shared freely across threads.

Scalar constraints (Likert point ranges, trigger thresholds) are enforced
at construction time; structural and cross-reference invariants are checked
by :func:`validate_study_config`, which reports problems instead of raising
so that admin tooling can surface every issue at once.
"""

from __future__ import annotations

import json
from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

AnswerValue = Union[int, str, list[str]]


class StudyKitError(Exception):
    """Base class for errors raised by this package."""


class ParseError(StudyKitError):
    """Survey document is not well-formed JSON."""


class SchemaError(StudyKitError):
    """Survey document parsed but violates the survey schema."""


class BadPermutation(StudyKitError):
    """Reorder indices are not a permutation of 0..n-1."""


class StepKind(str, Enum):
    CONSENT = "consent"
    BACKGROUND_SURVEY = "background_survey"
    PRE_TASK = "pre_task"
    MAIN_TASK = "main_task"
    POST_TASK = "post_task"
    EXPERIENCE_SURVEY = "experience_survey"
    END_SURVEY = "end_survey"
    CUSTOM_SURVEY = "custom_survey"


# Survey-bound step kinds and the key they use in StudyConfig.surveys.
SURVEY_STEP_KEYS = {
    StepKind.BACKGROUND_SURVEY: "background",
    StepKind.PRE_TASK: "pre_task",
    StepKind.POST_TASK: "post_task",
    StepKind.EXPERIENCE_SURVEY: "experience",
    StepKind.END_SURVEY: "end",
}

STANDARD_SURVEY_KEYS = set(SURVEY_STEP_KEYS.values())


class Modality(str, Enum):
    CHAT = "chat"
    SEARCH = "search"


class AttentionFailPolicy(str, Enum):
    RECORD_ONLY = "record_only"
    BLOCK_ADVANCE = "block_advance"


class LikertType(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["likert"] = "likert"
    points: int = Field(ge=2, le=11)
    low_anchor: str = ""
    high_anchor: str = ""


class MultipleChoiceType(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["multiple_choice"] = "multiple_choice"
    options: list[str]
    allow_multiple: bool = False


class OpenEndedType(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["open_ended"] = "open_ended"
    max_length: Optional[int] = Field(default=None, ge=1)


AnswerType = Union[LikertType, MultipleChoiceType, OpenEndedType]


class AttentionCheck(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    expected_answer: AnswerValue


class Question(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    question_id: str
    prompt: str
    answer_type: AnswerType = Field(discriminator="kind")
    required: bool = False
    attention_check: Optional[AttentionCheck] = None


class SurveyInstrument(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    survey_id: str
    title: str = ""
    questions: list[Question] = Field(default_factory=list)


class TaskDef(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task_id: str
    modality: Modality
    title: str = ""
    description_markdown: str = ""


class TypologyCategory(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    category_id: str
    label: str
    description: str = ""


class IntentionTypology(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    categories: list[TypologyCategory] = Field(default_factory=list)


class AfterNPrompts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["after_n_prompts"] = "after_n_prompts"
    n: int = Field(ge=1)


class AfterNResponses(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["after_n_responses"] = "after_n_responses"
    n: int = Field(ge=1)


class AfterNQueries(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["after_n_queries"] = "after_n_queries"
    n: int = Field(ge=1)


class Periodic(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["periodic"] = "periodic"
    interval_s: int = Field(ge=1)


class BeforeSubmission(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["before_submission"] = "before_submission"


TriggerCondition = Union[AfterNPrompts, AfterNResponses, AfterNQueries, Periodic, BeforeSubmission]


class TriggerRule(BaseModel):
    """Declarative rule for firing an in-situ popup survey.

    ``scope`` limits the rule to one task id; ``None`` means all tasks.
    ``before_submission`` rules are forced to ``repeat="once"``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rule_id: str
    survey_id: str
    condition: TriggerCondition = Field(discriminator="kind")
    repeat: Literal["once", "every_multiple"] = "once"
    scope: Optional[str] = None


class FlowStep(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: StepKind
    enabled: bool = True
    order: int = Field(ge=0)
    reminder_text: Optional[str] = None
    survey_id: Optional[str] = None
    task_id: Optional[str] = None


class StudySettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task_order: list[str] = Field(default_factory=list)
    notes_enabled: bool = True
    min_interactions: int = Field(default=0, ge=0)
    attention_fail_policy: AttentionFailPolicy = AttentionFailPolicy.RECORD_ONLY


class StudyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    study_id: str
    title: str = ""
    settings: StudySettings = Field(default_factory=StudySettings)
    flow: list[FlowStep] = Field(default_factory=list)
    tasks: list[TaskDef] = Field(default_factory=list)
    surveys: dict[str, SurveyInstrument] = Field(default_factory=dict)
    typology: IntentionTypology = Field(default_factory=IntentionTypology)
    trigger_rules: list[TriggerRule] = Field(default_factory=list)
    provider_config_ref: str = "default"
    consent_text: str = ""
    consent_checkboxes: list[str] = Field(default_factory=list)


class ValidationIssue(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: str
    severity: Literal["error", "warning"] = "error"
    message: str


def _instrument_issues(prefix: str, instrument: SurveyInstrument) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    if not instrument.questions:
        issues.append(ValidationIssue(path=f"{prefix}.questions", message="instrument has no questions"))
    seen: set[str] = set()
    for i, q in enumerate(instrument.questions):
        qpath = f"{prefix}.questions[{i}]"
        if q.question_id in seen:
            issues.append(ValidationIssue(path=f"{qpath}.question_id", message=f"duplicate question id {q.question_id!r}"))
        seen.add(q.question_id)
        at = q.answer_type
        if isinstance(at, MultipleChoiceType):
            if len(at.options) < 2:
                issues.append(ValidationIssue(path=f"{qpath}.answer_type.options", message="multiple choice needs at least 2 options"))
            if len(set(at.options)) != len(at.options):
                issues.append(ValidationIssue(path=f"{qpath}.answer_type.options", message="duplicate options"))
        if q.attention_check is not None:
            problem = _attention_compat_problem(at, q.attention_check.expected_answer)
            if problem:
                issues.append(ValidationIssue(path=f"{qpath}.attention_check.expected_answer", message=problem))
    return issues


def _attention_compat_problem(answer_type: AnswerType, expected: AnswerValue) -> Optional[str]:
    if isinstance(answer_type, LikertType):
        if not isinstance(expected, int) or isinstance(expected, bool):
            return "expected answer for a likert question must be an integer"
        if not (1 <= expected <= answer_type.points):
            return f"expected answer {expected} outside 1..{answer_type.points}"
    elif isinstance(answer_type, MultipleChoiceType):
        values = expected if isinstance(expected, list) else [expected]
        if isinstance(expected, list) and not answer_type.allow_multiple:
            return "expected answer is a list but question is single choice"
        for v in values:
            if not isinstance(v, str) or v not in answer_type.options:
                return f"expected answer {v!r} is not one of the options"
    elif isinstance(answer_type, OpenEndedType):
        if not isinstance(expected, str):
            return "expected answer for an open-ended question must be a string"
    return None


def validate_study_config(config: StudyConfig) -> list[ValidationIssue]:
    """Check structural and cross-reference invariants; never raises.

    Returns an empty list iff the config is deployable. Issue paths name
    the violating field so the admin UI can anchor messages to inputs.
    """
    issues: list[ValidationIssue] = []
    task_ids = [t.task_id for t in config.tasks]

    # Task definitions
    if len(set(task_ids)) != len(task_ids):
        issues.append(ValidationIssue(path="tasks", message="duplicate task ids"))
    for i, task in enumerate(config.tasks):
        if not task.description_markdown.strip():
            issues.append(ValidationIssue(path=f"tasks[{i}].description_markdown", message="task description is empty"))

    # Survey map: custom keys must equal the instrument's own id, and survey
    # ids must be unambiguous study-wide (trigger rules reference them).
    survey_ids_seen: set[str] = set()
    for key, instrument in config.surveys.items():
        prefix = f"surveys.{key}"
        if key not in STANDARD_SURVEY_KEYS and key != instrument.survey_id:
            issues.append(ValidationIssue(path=f"{prefix}.survey_id", message=f"custom survey key {key!r} must equal its survey_id"))
        if instrument.survey_id in survey_ids_seen:
            issues.append(ValidationIssue(path=f"{prefix}.survey_id", message=f"duplicate survey id {instrument.survey_id!r}"))
        survey_ids_seen.add(instrument.survey_id)
        issues.extend(_instrument_issues(prefix, instrument))

    # Flow structure
    orders = [s.order for s in config.flow]
    if sorted(orders) != list(range(len(config.flow))):
        issues.append(ValidationIssue(path="flow", message="step order indices are not a permutation of 0..len-1"))
    kind_counts: dict[StepKind, int] = {}
    for step in config.flow:
        kind_counts[step.kind] = kind_counts.get(step.kind, 0) + 1
    for kind, count in kind_counts.items():
        if kind != StepKind.MAIN_TASK and count > 1:
            issues.append(ValidationIssue(path="flow", message=f"more than one {kind.value} step"))

    for i, step in enumerate(config.flow):
        spath = f"flow[{i}]"
        if step.kind == StepKind.MAIN_TASK:
            if step.task_id is None:
                issues.append(ValidationIssue(path=f"{spath}.task_id", message="main_task step needs a task_id"))
            elif step.task_id not in task_ids:
                issues.append(ValidationIssue(path=f"{spath}.task_id", message=f"unknown task id {step.task_id!r}"))
        elif step.kind == StepKind.CUSTOM_SURVEY:
            if step.survey_id is None:
                issues.append(ValidationIssue(path=f"{spath}.survey_id", message="custom_survey step needs a survey_id"))
            elif resolve_step_instrument(config, step) is None:
                issues.append(ValidationIssue(path=f"{spath}.survey_id", message=f"unknown survey id {step.survey_id!r}"))
        elif step.kind in SURVEY_STEP_KEYS:
            key = SURVEY_STEP_KEYS[step.kind]
            instrument = config.surveys.get(key)
            if instrument is None:
                issues.append(ValidationIssue(path=f"{spath}.survey_id", message=f"no instrument configured under surveys.{key}"))
            elif step.survey_id is not None and step.survey_id != instrument.survey_id:
                issues.append(ValidationIssue(path=f"{spath}.survey_id", message=f"step survey_id {step.survey_id!r} does not match surveys.{key}"))

    # Settings
    declared = set(task_ids)
    ordered = config.settings.task_order
    if ordered and (len(ordered) != len(declared) or set(ordered) != declared):
        issues.append(ValidationIssue(path="settings.task_order", message="task_order is not a permutation of declared task ids"))

    # Typology
    cat_ids = [c.category_id for c in config.typology.categories]
    if len(set(cat_ids)) != len(cat_ids):
        issues.append(ValidationIssue(path="typology.categories", message="duplicate category ids"))
    for i, cat in enumerate(config.typology.categories):
        if not cat.label.strip():
            issues.append(ValidationIssue(path=f"typology.categories[{i}].label", message="category label is empty"))

    # Trigger rules
    known_survey_ids = {s.survey_id for s in config.surveys.values()}
    rule_ids: set[str] = set()
    for i, rule in enumerate(config.trigger_rules):
        rpath = f"trigger_rules[{i}]"
        if rule.rule_id in rule_ids:
            issues.append(ValidationIssue(path=f"{rpath}.rule_id", message=f"duplicate rule id {rule.rule_id!r}"))
        rule_ids.add(rule.rule_id)
        if rule.survey_id not in known_survey_ids:
            issues.append(ValidationIssue(path=f"{rpath}.survey_id", message=f"unknown survey id {rule.survey_id!r}"))
        if rule.scope is not None and rule.scope not in task_ids:
            issues.append(ValidationIssue(path=f"{rpath}.scope", message=f"unknown task id {rule.scope!r}"))
        if rule.condition.kind == "before_submission" and rule.repeat != "once":
            issues.append(ValidationIssue(path=f"{rpath}.repeat", message="before_submission rules must have repeat=once"))

    return issues


def resolve_step_instrument(config: StudyConfig, step: FlowStep) -> Optional[SurveyInstrument]:
    """Find the instrument a survey-bound flow step presents, if any."""
    if step.kind == StepKind.CUSTOM_SURVEY:
        if step.survey_id is None:
            return None
        if step.survey_id in config.surveys and step.survey_id not in STANDARD_SURVEY_KEYS:
            return config.surveys[step.survey_id]
        for instrument in config.surveys.values():
            if instrument.survey_id == step.survey_id:
                return instrument
        return None
    key = SURVEY_STEP_KEYS.get(step.kind)
    if key is None:
        return None
    return config.surveys.get(key)


def find_instrument(config: StudyConfig, survey_id: str) -> Optional[SurveyInstrument]:
    for instrument in config.surveys.values():
        if instrument.survey_id == survey_id:
            return instrument
    return None


# ---------------------------------------------------------------------------
# Survey JSON mode


def _answer_type_doc(at: AnswerType) -> dict:
    if isinstance(at, LikertType):
        return {"kind": "likert", "points": at.points, "low_anchor": at.low_anchor, "high_anchor": at.high_anchor}
    if isinstance(at, MultipleChoiceType):
        return {"kind": "multiple_choice", "options": list(at.options), "allow_multiple": at.allow_multiple}
    doc: dict = {"kind": "open_ended"}
    if at.max_length is not None:
        doc["max_length"] = at.max_length
    return doc


def export_survey_json(instrument: SurveyInstrument) -> bytes:
    """Serialize an instrument to the canonical survey JSON document."""
    doc = {
        "survey_id": instrument.survey_id,
        "title": instrument.title,
        "questions": [],
    }
    for q in instrument.questions:
        qdoc: dict = {
            "question_id": q.question_id,
            "prompt": q.prompt,
            "answer_type": _answer_type_doc(q.answer_type),
            "required": q.required,
        }
        if q.attention_check is not None:
            qdoc["attention_check"] = {"expected_answer": q.attention_check.expected_answer}
        doc["questions"].append(qdoc)
    return json.dumps(doc, indent=2, ensure_ascii=False).encode("utf-8")


def import_survey_json(text: Union[bytes, str]) -> SurveyInstrument:
    """Parse a survey JSON document into an instrument.

    Raises ParseError for malformed JSON and SchemaError for documents that
    parse but violate the schema (unknown answer kinds, duplicate question
    ids, missing fields, empty question list).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("survey document must be a JSON object")
    if "survey_id" not in doc:
        raise SchemaError("missing survey_id")
    doc.setdefault("title", "")
    questions = doc.get("questions")
    if not isinstance(questions, list) or not questions:
        raise SchemaError("survey needs a non-empty questions list")
    for q in questions:
        if isinstance(q, dict):
            q.setdefault("required", False)
            at = q.get("answer_type")
            if isinstance(at, dict) and at.get("kind") not in ("likert", "multiple_choice", "open_ended"):
                raise SchemaError(f"unknown answer_type kind {at.get('kind')!r}")
    try:
        instrument = SurveyInstrument.model_validate(doc)
    except ValidationError as exc:
        raise SchemaError(f"invalid survey document: {exc}") from exc
    ids = [q.question_id for q in instrument.questions]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate question ids")
    structural = _instrument_issues("survey", instrument)
    if structural:
        raise SchemaError("; ".join(i.message for i in structural))
    return instrument


def reorder_questions(instrument: SurveyInstrument, permutation: list[int]) -> SurveyInstrument:
    """Return a copy with questions in permuted order; ids are untouched."""
    n = len(instrument.questions)
    if sorted(permutation) != list(range(n)):
        raise BadPermutation(f"{permutation!r} is not a permutation of 0..{n - 1}")
    return instrument.model_copy(update={"questions": [instrument.questions[i] for i in permutation]})


# ---------------------------------------------------------------------------
# Answer checking (used by the flow engine's survey gate)


def answer_problem(question: Question, value: AnswerValue) -> Optional[str]:
    """Why `value` is not a type-valid answer for `question`, or None."""
    at = question.answer_type
    if isinstance(at, LikertType):
        if not isinstance(value, int) or isinstance(value, bool):
            return "likert answer must be an integer"
        if not (1 <= value <= at.points):
            return f"likert answer {value} outside 1..{at.points}"
    elif isinstance(at, MultipleChoiceType):
        if at.allow_multiple:
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                return "answer must be a list of option strings"
            bad = [v for v in value if v not in at.options]
            if bad:
                return f"unknown options {bad!r}"
            if len(set(value)) != len(value):
                return "duplicate options selected"
        else:
            if not isinstance(value, str):
                return "answer must be a single option string"
            if value not in at.options:
                return f"unknown option {value!r}"
    elif isinstance(at, OpenEndedType):
        if not isinstance(value, str):
            return "answer must be a string"
        if at.max_length is not None and len(value) > at.max_length:
            return f"answer longer than {at.max_length} characters"
    return None


def _is_empty_answer(question: Question, value: AnswerValue) -> bool:
    if isinstance(question.answer_type, MultipleChoiceType) and question.answer_type.allow_multiple:
        return isinstance(value, list) and len(value) == 0
    if isinstance(question.answer_type, OpenEndedType):
        return isinstance(value, str) and not value.strip()
    return False


def validate_answers(instrument: SurveyInstrument, answers: dict[str, AnswerValue]) -> list[ValidationIssue]:
    """Report missing required answers, type problems, and unknown ids."""
    issues: list[ValidationIssue] = []
    known = {q.question_id for q in instrument.questions}
    for qid in answers:
        if qid not in known:
            issues.append(ValidationIssue(path=qid, message="answer for unknown question"))
    for q in instrument.questions:
        if q.question_id not in answers:
            if q.required:
                issues.append(ValidationIssue(path=q.question_id, message="required question unanswered"))
            continue
        value = answers[q.question_id]
        problem = answer_problem(q, value)
        if problem:
            issues.append(ValidationIssue(path=q.question_id, message=problem))
        elif q.required and _is_empty_answer(q, value):
            issues.append(ValidationIssue(path=q.question_id, message="required question unanswered"))
    return issues


def _normalize_for_match(value: AnswerValue) -> object:
    if isinstance(value, list):
        return sorted(str(v).strip() for v in value)
    return str(value).strip()


def evaluate_attention(instrument: SurveyInstrument, answers: dict[str, AnswerValue]) -> list[dict]:
    """List attention-check failures: exact match after whitespace trim.

    An unanswered attention-check question counts as a failure.
    """
    failures = []
    for q in instrument.questions:
        if q.attention_check is None:
            continue
        expected = q.attention_check.expected_answer
        if q.question_id not in answers:
            failures.append({"question_id": q.question_id, "expected": expected, "given": None})
            continue
        given = answers[q.question_id]
        if _normalize_for_match(given) != _normalize_for_match(expected):
            failures.append({"question_id": q.question_id, "expected": expected, "given": given})
    return failures
