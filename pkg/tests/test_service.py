import pytest

from studykit.events import fold_views
from studykit.flow import DuplicateSession, GateError, WrongStep
from studykit.model import AfterNPrompts, BeforeSubmission, Modality, Periodic, TriggerRule
from studykit.seeds import make_default_study, make_popup_survey
from studykit.service import AppCore, NotesDisabled, StudyNotReady
from studykit.storage import FileStorage

from core_driver import chat, drain_popups, finish_flow, register, walk_to_task


def seeded(core, **kwargs):
    config = make_default_study(**kwargs)
    runtime, issues = core.create_study(config)
    assert issues == []
    return runtime


def popup_rules(*conditions):
    rules = []
    for i, condition in enumerate(conditions):
        repeat = "once" if condition.kind == "before_submission" else "every_multiple"
        rules.append(TriggerRule(rule_id=f"r{i}", survey_id="in-situ-pulse", condition=condition, repeat=repeat))
    return rules


def seeded_with_popups(core, *conditions, **kwargs):
    config = make_default_study(trigger_rules=popup_rules(*conditions), **kwargs)
    surveys = dict(config.surveys)
    popup = make_popup_survey()
    surveys[popup.survey_id] = popup
    runtime, issues = core.create_study(config.model_copy(update={"surveys": surveys}))
    assert issues == []
    return runtime


def test_register_and_complete_default_flow(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    step = walk_to_task(core, study_id, session_id)
    assert step["kind"] == "main_task"
    text, final = chat(core, study_id, session_id, "hello")
    assert text == "echo: hello"
    assert final["final"] is True
    core.rate_turn(study_id, session_id, final["turn_id"], 4)
    core.rate_trajectory(study_id, session_id, step["task"]["task_id"], 5)
    finish_flow(core, study_id, session_id)
    state = core.session_state(study_id, session_id)
    assert state["session"]["completed_at"] is not None
    assert state["step"] is None


def test_duplicate_session_for_same_participant(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    with pytest.raises(DuplicateSession):
        core.create_session(runtime.study_id, reg["participant_id"])


def test_registration_blocked_while_config_invalid(core):
    config = make_default_study()
    config = config.model_copy(update={"surveys": {}})  # all survey refs dangle
    runtime, issues = core.create_study(config)
    assert issues
    with pytest.raises(StudyNotReady):
        core.register_participant(runtime.invite_code)


def test_chat_on_wrong_step_rejected(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    with pytest.raises(WrongStep):
        list(core.chat_message(runtime.study_id, reg["session_id"], "hi"))


def test_search_session_logs_serp_and_clicks(core):
    runtime = seeded(core, modality=Modality.SEARCH)
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    page = core.search(study_id, session_id, "solar", 10, 500, 600)
    assert len(page["results"]) == 3
    click = core.report_click(study_id, session_id, page["query_id"], page["results"][0]["url"], 1)
    assert click["accepted"] is True
    bad = core.report_click(study_id, session_id, page["query_id"], page["results"][0]["url"], 3)
    assert bad["accepted"] is False
    views = core.get_runtime(study_id).log.views(session_id)
    record = views.queries[page["query_id"]]
    assert len(record.clicks) == 1
    anomalies = [e for e in core.get_runtime(study_id).log.timeline(session_id) if e.kind == "click_rejected"]
    assert len(anomalies) == 1


def test_search_with_no_matches_logs_empty_page(core):
    runtime = seeded(core, modality=Modality.SEARCH)
    reg = register(core, runtime)
    walk_to_task(core, reg["study_id"], reg["session_id"])
    page = core.search(reg["study_id"], reg["session_id"], "zebra unicorn")
    assert page["results"] == []
    views = core.get_runtime(reg["study_id"]).log.views(reg["session_id"])
    assert views.queries[page["query_id"]].result_count == 0


def test_notes_disabled_rejects_saves(core):
    runtime = seeded(core, notes_enabled=False)
    reg = register(core, runtime)
    walk_to_task(core, reg["study_id"], reg["session_id"])
    with pytest.raises(NotesDisabled):
        core.save_note(reg["study_id"], reg["session_id"], "text")


def test_min_interactions_gate_through_service(core):
    runtime = seeded(core, min_interactions=2)
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    with pytest.raises(GateError) as exc:
        core.submit_task(study_id, session_id)
    assert exc.value.reason == "below_min_interactions"
    chat(core, study_id, session_id, "one")
    chat(core, study_id, session_id, "two")
    reply = core.submit_task(study_id, session_id)
    assert reply["cursor"] == 4


def test_after_n_prompts_popup_fires_and_blocks_submit(core):
    runtime = seeded_with_popups(core, AfterNPrompts(n=2))
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    _, final1 = chat(core, study_id, session_id, "first")
    assert final1["popups"] == []
    _, final2 = chat(core, study_id, session_id, "second")
    assert len(final2["popups"]) == 1
    assert final2["popup"]["instance_id"] == final2["popups"][0]["instance_id"]
    assert final2["popup"]["survey"]["survey_id"] == "in-situ-pulse"
    with pytest.raises(GateError) as exc:
        core.submit_task(study_id, session_id)
    assert exc.value.reason == "pending_trigger"
    answered = drain_popups(core, study_id, session_id)
    assert len(answered) == 1
    core.submit_task(study_id, session_id)


def test_before_submission_popup_gates_task(core):
    runtime = seeded_with_popups(core, BeforeSubmission())
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    chat(core, study_id, session_id, "hello")
    with pytest.raises(GateError) as exc:
        core.submit_task(study_id, session_id)
    assert exc.value.reason == "pending_trigger"
    assert len(exc.value.data["popups"]) == 1
    # idempotent: retrying does not create more instances
    with pytest.raises(GateError) as exc2:
        core.submit_task(study_id, session_id)
    assert [p["instance_id"] for p in exc2.value.data["popups"]] == [
        p["instance_id"] for p in exc.value.data["popups"]
    ]
    drain_popups(core, study_id, session_id)
    core.submit_task(study_id, session_id)


def test_periodic_popup_with_virtual_clock(core):
    runtime = seeded_with_popups(core, Periodic(interval_s=60))
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    core.advance_clock(59)
    assert core.session_state(study_id, session_id)["pending_popups"] == []
    core.advance_clock(2)
    pending = core.session_state(study_id, session_id)["pending_popups"]
    assert len(pending) == 1
    # boundary at +120s is suppressed while pending; after answering at
    # +130s the next fire is at +180s
    core.advance_clock(69)  # now at +130s
    core.answer_popup(study_id, session_id, pending[0]["instance_id"], {"confidence_now": 4})
    core.advance_clock(45)  # +175s
    assert core.session_state(study_id, session_id)["pending_popups"] == []
    core.advance_clock(6)  # +181s
    assert len(core.session_state(study_id, session_id)["pending_popups"]) == 1


def test_clock_injection_refused_outside_test_mode(tmp_path):
    core = AppCore(FileStorage(tmp_path / "prod"), test_mode=False)
    with pytest.raises(Exception):
        core.advance_clock(10)


def test_mid_stream_failure_preserves_partial_prefix(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    frames = list(core.chat_message(study_id, session_id, "[[fail_after=2]]this is a longer prompt"))
    final = frames[-1]
    assert "error" in final
    chunks = [f["text"] for f in frames if "chunk_index" in f]
    assert len(chunks) == 2
    views = core.get_runtime(study_id).log.views(session_id)
    turn = views.turns[final["turn_id"]]
    assert turn.response_text == "".join(chunks)
    assert turn.ok is False
    # failed turn cannot be rated
    from studykit.events import ResponseNotComplete

    with pytest.raises(ResponseNotComplete):
        core.rate_turn(study_id, session_id, final["turn_id"], 3)


def test_restart_rebuilds_sessions_counts_and_triggers(tmp_path):
    storage = FileStorage(tmp_path / "data")
    core = AppCore(storage, test_mode=True)
    runtime = seeded_with_popups(core, AfterNPrompts(n=2))
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    chat(core, study_id, session_id, "first")
    chat(core, study_id, session_id, "second")

    reopened = AppCore(FileStorage(tmp_path / "data"), test_mode=True)
    rebuilt = reopened.get_runtime(study_id)
    state = rebuilt.trigger_states[session_id]
    original = core.get_runtime(study_id).trigger_states[session_id]
    assert state.instances == original.instances
    assert state.counters == original.counters
    assert state.next_instance_no == original.next_instance_no
    assert rebuilt.sessions[session_id].cursor == core.get_runtime(study_id).sessions[session_id].cursor
    assert reopened.session_state(study_id, session_id)["session"]["counts"]["prompts"] == 2
    # the pending popup survives the restart and still gates submission
    with pytest.raises(GateError):
        reopened.submit_task(study_id, session_id)
    drain_popups(reopened, study_id, session_id)
    reopened.submit_task(study_id, session_id)


def test_session_replay_matches_stored_flow_state(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    study_id, session_id = reg["study_id"], reg["session_id"]
    walk_to_task(core, study_id, session_id)
    chat(core, study_id, session_id, "hello")
    finish_flow(core, study_id, session_id)

    from studykit import flow
    from studykit.flow import ConsentAck, SurveyAnswers, TaskSubmit

    stored = core.get_runtime(study_id).sessions[session_id]
    events = core.get_runtime(study_id).log.timeline(session_id)
    views = fold_views(events)
    replayed = flow.init_session(runtime.config, stored.participant_id, session_id, stored.started_at)
    for event in events:
        if event.kind == "consent_submitted" and event.payload["accepted"]:
            completion = ConsentAck(checked=event.payload["checked"])
        elif event.kind == "survey_submitted" and event.payload["accepted"]:
            completion = SurveyAnswers(answers=event.payload["answers"])
        elif event.kind == "task_submitted" and event.payload["accepted"]:
            completion = TaskSubmit(final_note=event.payload.get("final_note"))
        else:
            continue
        replayed = flow.advance(
            replayed,
            completion,
            runtime.config,
            now_ms=event.server_ts,
            counts=views.counts,
            pending_popups=0,
            intentions_selected=[],
        ).session
    assert replayed.cursor == stored.cursor
    assert replayed.completed_at == stored.completed_at
    assert [s.status for s in replayed.steps] == [s.status for s in stored.steps]
    assert [s.completed_ms for s in replayed.steps] == [s.completed_ms for s in stored.steps]


def test_trajectory_rating_requires_known_task(core):
    runtime = seeded(core)
    reg = register(core, runtime)
    from studykit.events import UnknownTask

    with pytest.raises(UnknownTask):
        core.rate_trajectory(reg["study_id"], reg["session_id"], "ghost", 5)
