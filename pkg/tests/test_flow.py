import pytest

from studykit.flow import (
    AdvanceResult,
    ConsentAck,
    GateError,
    SurveyAnswers,
    TaskSubmit,
    WrongStep,
    advance,
    effective_instrument,
    enabled_sequence,
    init_session,
)
from studykit.model import AttentionFailPolicy, StepKind
from studykit.seeds import make_default_study


def fresh_session(config, now=1000):
    return init_session(config, "p1", "s1", now)


def consent_ok(config):
    return ConsentAck(checked=[True] * len(config.consent_checkboxes))


def survey_answers_for(config, session, intentions=None):
    step = session.current_step()
    instrument = effective_instrument(config, step, intentions or [])
    answers = {}
    for q in instrument.questions:
        if not q.required:
            continue
        kind = q.answer_type.kind
        if kind == "likert":
            answers[q.question_id] = 1
        elif kind == "multiple_choice":
            answers[q.question_id] = [q.answer_type.options[0]] if q.answer_type.allow_multiple else q.answer_type.options[0]
        else:
            answers[q.question_id] = "x"
    return SurveyAnswers(answers=answers)


def test_enabled_sequence_default_order():
    config = make_default_study()
    kinds = [s.kind for s in enabled_sequence(config)]
    assert kinds == [
        StepKind.CONSENT,
        StepKind.BACKGROUND_SURVEY,
        StepKind.PRE_TASK,
        StepKind.MAIN_TASK,
        StepKind.POST_TASK,
        StepKind.EXPERIENCE_SURVEY,
        StepKind.END_SURVEY,
    ]


def test_disabled_step_is_skipped_but_retained():
    config = make_default_study()
    flow_steps = [
        s.model_copy(update={"enabled": False}) if s.kind == StepKind.EXPERIENCE_SURVEY else s
        for s in config.flow
    ]
    config = config.model_copy(update={"flow": flow_steps})
    kinds = [s.kind for s in enabled_sequence(config)]
    assert StepKind.EXPERIENCE_SURVEY not in kinds
    assert len(kinds) == 6
    assert len(config.flow) == 7


def test_reordered_steps_follow_order_field():
    config = make_default_study()
    # swap experience survey (order 5) and end survey (order 6)
    flow_steps = []
    for step in config.flow:
        if step.kind == StepKind.EXPERIENCE_SURVEY:
            flow_steps.append(step.model_copy(update={"order": 6}))
        elif step.kind == StepKind.END_SURVEY:
            flow_steps.append(step.model_copy(update={"order": 5}))
        else:
            flow_steps.append(step)
    config = config.model_copy(update={"flow": flow_steps})
    kinds = [s.kind for s in enabled_sequence(config)]
    assert kinds.index(StepKind.END_SURVEY) < kinds.index(StepKind.EXPERIENCE_SURVEY)


def test_init_session_starts_at_consent_then_background():
    config = make_default_study()
    session = fresh_session(config)
    assert session.cursor == 0
    assert session.steps[0].kind == StepKind.CONSENT
    assert session.steps[1].kind == StepKind.BACKGROUND_SURVEY
    assert session.steps[0].status == "in_progress"
    assert session.interaction_counts == {"prompts": 0, "responses": 0, "queries": 0}


def test_consent_gate_requires_all_checkboxes():
    config = make_default_study()
    session = fresh_session(config)
    with pytest.raises(GateError) as exc:
        advance(session, ConsentAck(checked=[True, False]), config, now_ms=2000)
    assert exc.value.reason == "consent_incomplete"
    with pytest.raises(GateError):
        advance(session, ConsentAck(checked=[True]), config, now_ms=2000)
    result = advance(session, consent_ok(config), config, now_ms=2000)
    assert result.session.cursor == 1
    assert result.session.steps[0].status == "completed"
    assert result.session.steps[0].completed_ms == 2000


def test_wrong_completion_kind_rejected():
    config = make_default_study()
    session = fresh_session(config)
    with pytest.raises(WrongStep):
        advance(session, TaskSubmit(), config, now_ms=2000)


def test_survey_gate_missing_required():
    config = make_default_study()
    session = advance(fresh_session(config), consent_ok(config), config, now_ms=2000).session
    with pytest.raises(GateError) as exc:
        advance(session, SurveyAnswers(answers={}), config, now_ms=3000)
    assert exc.value.reason == "missing_required"


def test_min_interactions_gate():
    config = make_default_study(min_interactions=5)
    session = fresh_session(config)
    for _ in range(3):  # consent, background, pre-task
        completion = consent_ok(config) if session.current_step().kind == StepKind.CONSENT else survey_answers_for(config, session)
        session = advance(session, completion, config, now_ms=2000).session
    assert session.current_step().kind == StepKind.MAIN_TASK
    with pytest.raises(GateError) as exc:
        advance(session, TaskSubmit(), config, now_ms=4000, counts={"prompts": 4, "responses": 4, "queries": 0})
    assert exc.value.reason == "below_min_interactions"
    result = advance(session, TaskSubmit(), config, now_ms=4000, counts={"prompts": 5, "responses": 5, "queries": 0})
    assert result.session.cursor == session.cursor + 1


def test_zero_threshold_submits_immediately():
    config = make_default_study(min_interactions=0)
    session = fresh_session(config)
    for _ in range(3):
        completion = consent_ok(config) if session.current_step().kind == StepKind.CONSENT else survey_answers_for(config, session)
        session = advance(session, completion, config, now_ms=2000).session
    result = advance(session, TaskSubmit(), config, now_ms=3000, counts={"prompts": 0, "responses": 0, "queries": 0})
    assert result.session.current_step().kind == StepKind.POST_TASK


def test_pending_trigger_blocks_submit():
    config = make_default_study()
    session = fresh_session(config)
    for _ in range(3):
        completion = consent_ok(config) if session.current_step().kind == StepKind.CONSENT else survey_answers_for(config, session)
        session = advance(session, completion, config, now_ms=2000).session
    with pytest.raises(GateError) as exc:
        advance(session, TaskSubmit(), config, now_ms=3000, pending_popups=2)
    assert exc.value.reason == "pending_trigger"


def test_attention_policy_block_vs_record():
    from studykit.model import AttentionCheck, OpenEndedType, Question, SurveyInstrument

    config = make_default_study()
    checked = SurveyInstrument(
        survey_id="background",
        questions=[
            Question(
                question_id="atn",
                prompt="Type blue",
                answer_type=OpenEndedType(),
                required=True,
                attention_check=AttentionCheck(expected_answer="blue"),
            )
        ],
    )
    surveys = dict(config.surveys)
    surveys["background"] = checked
    config = config.model_copy(update={"surveys": surveys})
    session = advance(fresh_session(config), consent_ok(config), config, now_ms=2000).session

    # record_only: advance succeeds, failure reported in the result
    result = advance(session, SurveyAnswers(answers={"atn": "red"}), config, now_ms=3000)
    assert isinstance(result, AdvanceResult)
    assert len(result.attention_failures) == 1

    blocking = config.model_copy(
        update={"settings": config.settings.model_copy(update={"attention_fail_policy": AttentionFailPolicy.BLOCK_ADVANCE})}
    )
    with pytest.raises(GateError) as exc:
        advance(session, SurveyAnswers(answers={"atn": "red"}), blocking, now_ms=3000)
    assert exc.value.reason == "attention_failed"
    assert exc.value.data["attention_failures"][0]["question_id"] == "atn"
    # the expected answer still passes under the blocking policy
    ok = advance(session, SurveyAnswers(answers={"atn": "blue"}), blocking, now_ms=3000)
    assert ok.session.cursor == session.cursor + 1


def test_typology_items_injected_pre_and_post():
    config = make_default_study()
    session = fresh_session(config)
    pre_step = session.steps[2]
    assert pre_step.kind == StepKind.PRE_TASK
    instrument = effective_instrument(config, pre_step, [])
    intake = [q for q in instrument.questions if q.question_id == "__intentions__"]
    assert len(intake) == 1
    assert set(intake[0].answer_type.options) == {"learn", "decide", "verify"}

    post_step = session.steps[4]
    assert post_step.kind == StepKind.POST_TASK
    followups = effective_instrument(config, post_step, ["learn", "verify"])
    ids = [q.question_id for q in followups.questions]
    assert "__fulfillment__learn" in ids and "__fulfillment__verify" in ids
    assert "__fulfillment__decide" not in ids
    bare = effective_instrument(config, post_step, [])
    assert [q.question_id for q in bare.questions] == [q.question_id for q in config.surveys["post_task"].questions]


def test_full_walk_completes_and_cursor_is_monotone():
    config = make_default_study()
    session = fresh_session(config)
    seen_cursors = [session.cursor]
    now = 2000
    while not session.done:
        step = session.current_step()
        if step.kind == StepKind.CONSENT:
            completion = consent_ok(config)
        elif step.kind == StepKind.MAIN_TASK:
            completion = TaskSubmit()
        else:
            completion = survey_answers_for(config, session)
        session = advance(session, completion, config, now_ms=now).session
        seen_cursors.append(session.cursor)
        now += 1000
    assert seen_cursors == sorted(seen_cursors)
    assert all(b - a == 1 for a, b in zip(seen_cursors, seen_cursors[1:]))  # no skips
    assert seen_cursors[-1] == len(session.steps)
    assert session.completed_at is not None
    assert all(s.status == "completed" for s in session.steps)
    with pytest.raises(WrongStep):
        advance(session, TaskSubmit(), config, now_ms=now)


def test_replay_reproduces_stored_session():
    config = make_default_study()
    completions = []
    session = fresh_session(config)
    now = 2000
    while not session.done:
        step = session.current_step()
        if step.kind == StepKind.CONSENT:
            completion = consent_ok(config)
        elif step.kind == StepKind.MAIN_TASK:
            completion = TaskSubmit()
        else:
            completion = survey_answers_for(config, session)
        completions.append((completion, now))
        session = advance(session, completion, config, now_ms=now).session
        now += 1000

    replayed = init_session(config, "p1", "s1", 1000)
    for completion, at in completions:
        replayed = advance(replayed, completion, config, now_ms=at).session
    assert replayed == session
