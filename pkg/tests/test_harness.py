import json

import httpx
import pytest
from click.testing import CliRunner

from studykit.cli import main as cli_main
from studykit.harness import (
    ScriptTypeError,
    ServiceError,
    auto_answers,
    compare_export,
    parse_script,
    run_script,
)
from studykit.model import AfterNPrompts, TriggerRule
from studykit.seeds import make_default_study, make_popup_survey


def seed_over_http(base_url, config):
    client = httpx.Client(base_url=base_url, timeout=30.0)
    token = client.post("/api/setup", json={"username": "admin", "password": "pw-123456"}).json()["token"]
    response = client.post(
        "/api/admin/studies",
        json=config.model_dump(mode="json"),
        headers={"Authorization": f"Bearer {token}"},
    )
    assert response.status_code == 201, response.text
    return response.json(), token


DEFAULT_FLOW_SCRIPT = """
# complete the default seven-step flow with five prompts
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "chat", "prompt": "what is solar power?", "typing_ms": 1500}
{"action": "chat", "prompt": "how do panels work?", "typing_ms": 1200}
{"action": "chat", "prompt": "what about wind?", "typing_ms": 900}
{"action": "chat", "prompt": "compare costs", "typing_ms": 1100}
{"action": "chat", "prompt": "summarize for me", "typing_ms": 1000}
{"action": "rate", "target": "turn", "value": 4}
{"action": "rate", "target": "trajectory", "value": 5}
{"action": "note", "text": "seems plausible"}
{"action": "submit_task"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
"""


def test_parse_script_accepts_comments_and_blank_lines():
    actions = parse_script(DEFAULT_FLOW_SCRIPT)
    assert len(actions) == 15
    assert actions[0] == {"action": "advance"}


def test_parse_script_rejects_unknown_actions():
    with pytest.raises(ScriptTypeError):
        parse_script('{"action": "teleport"}')
    with pytest.raises(ScriptTypeError):
        parse_script("not json at all")


def test_auto_answers_fill_required_and_attention():
    instrument = {
        "questions": [
            {"question_id": "q1", "required": True, "answer_type": {"kind": "likert", "points": 7}},
            {"question_id": "q2", "required": True, "answer_type": {"kind": "multiple_choice", "options": ["a", "b"], "allow_multiple": False}},
            {"question_id": "q3", "required": False, "answer_type": {"kind": "open_ended"}},
            {
                "question_id": "q4",
                "required": True,
                "answer_type": {"kind": "open_ended"},
                "attention_check": {"expected_answer": "blue"},
            },
        ]
    }
    answers = auto_answers(instrument)
    assert answers == {"q1": 4, "q2": "a", "q4": "blue"}


def test_empty_script_yields_empty_transcript(live_server):
    body, _ = seed_over_http(live_server.base_url, make_default_study())
    transcript = run_script(live_server.base_url, body["invite_code"], [])
    assert transcript.entries == []
    assert transcript.completed_at is None
    assert transcript.session_id


def test_full_default_flow_script(live_server):
    body, token = seed_over_http(live_server.base_url, make_default_study(min_interactions=5))
    actions = parse_script(DEFAULT_FLOW_SCRIPT)
    transcript = run_script(live_server.base_url, body["invite_code"], actions)
    assert transcript.completed_at is not None
    assert len(transcript.turns) == 5
    report = compare_export(live_server.base_url, token, body["study_id"], transcript)
    assert report["ok"], report


def test_submit_below_threshold_records_gate_error(live_server):
    body, _ = seed_over_http(live_server.base_url, make_default_study(min_interactions=5))
    actions = parse_script(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "chat", "prompt": "one"}
{"action": "chat", "prompt": "two"}
{"action": "chat", "prompt": "three"}
{"action": "chat", "prompt": "four"}
{"action": "submit_task", "expect_error": "below_min_interactions"}
"""
    )
    transcript = run_script(live_server.base_url, body["invite_code"], actions)
    gate = [e for e in transcript.entries if e.action["action"] == "submit_task"]
    assert gate[0].status == 409
    assert gate[0].detail["error"]["reason"] == "below_min_interactions"


def test_unexpected_gate_error_raises(live_server):
    body, _ = seed_over_http(live_server.base_url, make_default_study(min_interactions=5))
    actions = parse_script(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "submit_task"}
"""
    )
    with pytest.raises(ServiceError):
        run_script(live_server.base_url, body["invite_code"], actions)


def test_wait_uses_virtual_clock(live_server):
    config = make_default_study()
    popup = make_popup_survey()
    surveys = dict(config.surveys)
    surveys[popup.survey_id] = popup
    from studykit.model import Periodic

    rule = TriggerRule(rule_id="p1", survey_id=popup.survey_id, condition=Periodic(interval_s=60), repeat="once")
    config = config.model_copy(update={"surveys": surveys, "trigger_rules": [rule]})
    body, _ = seed_over_http(live_server.base_url, config)
    before = live_server.core.clock.now_ms()
    actions = parse_script(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "wait", "seconds": 61}
{"action": "answer_popup", "auto": true}
{"action": "submit_task"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
"""
    )
    transcript = run_script(live_server.base_url, body["invite_code"], actions)
    assert live_server.core.clock.now_ms() >= before + 61_000
    assert len(transcript.popups_answered) == 1
    assert transcript.completed_at is not None


def test_popup_after_second_prompt_script(live_server):
    config = make_default_study()
    popup = make_popup_survey()
    surveys = dict(config.surveys)
    surveys[popup.survey_id] = popup
    rule = TriggerRule(rule_id="n2", survey_id=popup.survey_id, condition=AfterNPrompts(n=2))
    config = config.model_copy(update={"surveys": surveys, "trigger_rules": [rule]})
    body, token = seed_over_http(live_server.base_url, config)
    actions = parse_script(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "chat", "prompt": "first"}
{"action": "chat", "prompt": "second"}
{"action": "answer_popup", "auto": true}
{"action": "submit_task"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
"""
    )
    transcript = run_script(live_server.base_url, body["invite_code"], actions)
    assert len(transcript.popups_seen) == 1
    assert len(transcript.popups_answered) == 1
    report = compare_export(live_server.base_url, token, body["study_id"], transcript)
    assert report["ok"], report


def test_many_scripted_participants_run_concurrently(live_server):
    import threading

    body, token = seed_over_http(live_server.base_url, make_default_study(min_interactions=1))
    actions = parse_script(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "chat", "prompt": "ping"}
{"action": "chat", "prompt": "pong"}
{"action": "submit_task"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
"""
    )
    transcripts, errors = [], []

    def worker(i):
        try:
            transcripts.append(run_script(live_server.base_url, body["invite_code"], actions, f"worker-{i}"))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert all(t.completed_at is not None for t in transcripts)
    for transcript in transcripts:
        report = compare_export(live_server.base_url, token, body["study_id"], transcript)
        assert report["ok"], report
    client = httpx.Client(base_url=live_server.base_url, timeout=30.0)
    registration = client.get(
        f"/api/admin/studies/{body['study_id']}/export/registration.csv",
        headers={"Authorization": f"Bearer {token}"},
    ).text
    assert len(registration.strip().splitlines()) == 1 + 5


def test_cli_seed_run_and_compare(live_server, tmp_path):
    runner = CliRunner()
    seeded = runner.invoke(
        cli_main,
        ["seed-study", "--url", live_server.base_url, "--min-interactions", "2", "--study-id", "study-cli"],
    )
    assert seeded.exit_code == 0, seeded.output
    info = json.loads(seeded.output)

    script_path = tmp_path / "script.ndjson"
    script_path.write_text(
        """
{"action": "advance"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "chat", "prompt": "alpha"}
{"action": "chat", "prompt": "beta"}
{"action": "submit_task"}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
{"action": "answer_survey", "auto": true}
""",
        encoding="utf-8",
    )
    transcript_path = tmp_path / "transcript.json"
    ran = runner.invoke(
        cli_main,
        [
            "run-script",
            "--url", live_server.base_url,
            "--invite", info["invite_code"],
            "--script", str(script_path),
            "--out", str(transcript_path),
        ],
    )
    assert ran.exit_code == 0, ran.output
    transcript = json.loads(transcript_path.read_text())
    assert transcript["completed_at"] is not None

    compared = runner.invoke(
        cli_main,
        [
            "compare-export",
            "--url", live_server.base_url,
            "--study", info["study_id"],
            "--transcript", str(transcript_path),
        ],
    )
    assert compared.exit_code == 0, compared.output
    assert json.loads(compared.output)["ok"] is True
