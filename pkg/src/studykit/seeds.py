"""Ready-made study configurations for piloting and tests."""

from __future__ import annotations

from .model import (
    FlowStep,
    IntentionTypology,
    LikertType,
    Modality,
    MultipleChoiceType,
    OpenEndedType,
    Question,
    StepKind,
    StudyConfig,
    StudySettings,
    SurveyInstrument,
    TaskDef,
    TriggerRule,
    TypologyCategory,
)


def default_flow() -> list[FlowStep]:
    """Consent followed by the six default steps, in order."""
    kinds = [
        StepKind.CONSENT,
        StepKind.BACKGROUND_SURVEY,
        StepKind.PRE_TASK,
        StepKind.MAIN_TASK,
        StepKind.POST_TASK,
        StepKind.EXPERIENCE_SURVEY,
        StepKind.END_SURVEY,
    ]
    steps = []
    for order, kind in enumerate(kinds):
        step = FlowStep(kind=kind, order=order, task_id="task-chat" if kind == StepKind.MAIN_TASK else None)
        steps.append(step)
    return steps


def _likert(points: int = 5) -> LikertType:
    return LikertType(points=points, low_anchor="Strongly disagree", high_anchor="Strongly agree")


def default_surveys() -> dict[str, SurveyInstrument]:
    return {
        "background": SurveyInstrument(
            survey_id="background",
            title="Background questionnaire",
            questions=[
                Question(
                    question_id="age_range",
                    prompt="What is your age range?",
                    answer_type=MultipleChoiceType(options=["18-24", "25-34", "35-44", "45-54", "55+"]),
                    required=True,
                ),
                Question(
                    question_id="search_frequency",
                    prompt="I use web search engines daily.",
                    answer_type=_likert(),
                    required=True,
                ),
                Question(
                    question_id="occupation",
                    prompt="What is your occupation?",
                    answer_type=OpenEndedType(max_length=200),
                ),
            ],
        ),
        "pre_task": SurveyInstrument(
            survey_id="pre_task",
            title="Before you start",
            questions=[
                Question(
                    question_id="topic_familiarity",
                    prompt="I am familiar with this topic.",
                    answer_type=_likert(),
                    required=True,
                ),
                Question(
                    question_id="expected_difficulty",
                    prompt="I expect this task to be difficult.",
                    answer_type=_likert(),
                    required=True,
                ),
            ],
        ),
        "post_task": SurveyInstrument(
            survey_id="post_task",
            title="About the task you just finished",
            questions=[
                Question(
                    question_id="task_success",
                    prompt="I accomplished what I set out to do.",
                    answer_type=_likert(),
                    required=True,
                ),
                Question(
                    question_id="task_difficulty",
                    prompt="The task was difficult.",
                    answer_type=_likert(),
                    required=True,
                ),
            ],
        ),
        "experience": SurveyInstrument(
            survey_id="experience",
            title="Your experience with the system",
            questions=[
                Question(
                    question_id="system_helpful",
                    prompt="The system was helpful.",
                    answer_type=_likert(),
                    required=True,
                ),
                Question(
                    question_id="system_trust",
                    prompt="I trusted the information the system gave me.",
                    answer_type=_likert(),
                    required=True,
                ),
            ],
        ),
        "end": SurveyInstrument(
            survey_id="end",
            title="Wrapping up",
            questions=[
                Question(
                    question_id="feedback",
                    prompt="Any final comments about the study?",
                    answer_type=OpenEndedType(),
                ),
                Question(
                    question_id="would_participate_again",
                    prompt="I would participate in a similar study again.",
                    answer_type=_likert(),
                    required=True,
                ),
            ],
        ),
    }


def default_typology() -> IntentionTypology:
    return IntentionTypology(
        categories=[
            TypologyCategory(category_id="learn", label="Learn about the topic", description="Build understanding of unfamiliar material"),
            TypologyCategory(category_id="decide", label="Reach a decision", description="Weigh options to make a choice"),
            TypologyCategory(category_id="verify", label="Verify a fact", description="Confirm or refute something already believed"),
        ]
    )


def make_default_study(
    study_id: str = "study-default",
    *,
    min_interactions: int = 0,
    modality: Modality = Modality.CHAT,
    trigger_rules: list[TriggerRule] | None = None,
    notes_enabled: bool = True,
) -> StudyConfig:
    """The consent-plus-six-step study with one main task and mock providers."""
    task = TaskDef(
        task_id="task-chat" if modality == Modality.CHAT else "task-search",
        modality=modality,
        title="Find out about renewable energy" if modality == Modality.SEARCH else "Discuss renewable energy",
        description_markdown=(
            "Use the system to learn about **renewable energy**. "
            "Explore until you feel you could explain the basics to a friend."
        ),
    )
    flow_steps = default_flow()
    if modality == Modality.SEARCH:
        flow_steps = [
            step.model_copy(update={"task_id": task.task_id}) if step.kind == StepKind.MAIN_TASK else step
            for step in flow_steps
        ]
    return StudyConfig(
        study_id=study_id,
        title="Information seeking pilot",
        settings=StudySettings(
            task_order=[task.task_id],
            notes_enabled=notes_enabled,
            min_interactions=min_interactions,
        ),
        flow=flow_steps,
        tasks=[task],
        surveys=default_surveys(),
        typology=default_typology(),
        trigger_rules=trigger_rules or [],
        provider_config_ref="default",
        consent_text=(
            "# Consent to participate\n\n"
            "You are invited to take part in a study of information seeking. "
            "Your interactions will be recorded for research purposes."
        ),
        consent_checkboxes=[
            "I am at least 18 years old.",
            "I agree that my interactions may be recorded.",
        ],
    )


def make_popup_survey(survey_id: str = "in-situ-pulse") -> SurveyInstrument:
    return SurveyInstrument(
        survey_id=survey_id,
        title="Quick check-in",
        questions=[
            Question(
                question_id="confidence_now",
                prompt="Right now, how confident are you that you are on the right track?",
                answer_type=LikertType(points=7, low_anchor="Not at all", high_anchor="Completely"),
                required=True,
            )
        ],
    )
