"""Scripted participant driver.

Replays a behavior script against a live service over HTTP, recording
every response into a transcript. Used to pilot study designs headlessly
and by the acceptance suite. Scripts are line-delimited JSON actions:

    {"action": "advance"}
    {"action": "answer_survey", "auto": true}
    {"action": "chat", "prompt": "hello", "typing_ms": 1200}
    {"action": "search", "query": "solar", "typing_ms": 800}
    {"action": "click", "rank": 1}
    {"action": "rate", "target": "turn", "value": 4}
    {"action": "note", "text": "promising"}
    {"action": "wait", "seconds": 65}
    {"action": "submit_task", "expect_error": "below_min_interactions"}
    {"action": "answer_popup", "auto": true}

``advance`` completes a consent step (all boxes checked). ``wait`` uses
the service's virtual clock when it runs in test mode, otherwise sleeps.
``auto`` answers fill required questions with type-appropriate defaults
and satisfy embedded attention checks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import httpx

from .model import StudyKitError

KNOWN_ACTIONS = {
    "advance",
    "answer_survey",
    "chat",
    "search",
    "click",
    "rate",
    "note",
    "wait",
    "submit_task",
    "answer_popup",
}


class ScriptTypeError(StudyKitError):
    pass


class ServiceError(StudyKitError):
    pass


@dataclass
class TranscriptEntry:
    action: dict
    ok: bool
    status: int
    detail: dict = field(default_factory=dict)


@dataclass
class SessionTranscript:
    study_id: str = ""
    participant_id: str = ""
    session_id: str = ""
    entries: list[TranscriptEntry] = field(default_factory=list)
    turns: list[str] = field(default_factory=list)
    queries: dict[str, int] = field(default_factory=dict)  # query_id -> click count
    popups_seen: list[str] = field(default_factory=list)
    popups_answered: list[str] = field(default_factory=list)
    completed_at: Optional[int] = None

    @property
    def click_count(self) -> int:
        return sum(self.queries.values())

    def expected_search_rows(self) -> int:
        return sum(clicks if clicks else 1 for clicks in self.queries.values())

    def to_dict(self) -> dict:
        return {
            "study_id": self.study_id,
            "participant_id": self.participant_id,
            "session_id": self.session_id,
            "completed_at": self.completed_at,
            "turns": self.turns,
            "queries": self.queries,
            "popups_seen": self.popups_seen,
            "popups_answered": self.popups_answered,
            "entries": [
                {"action": e.action, "ok": e.ok, "status": e.status, "detail": e.detail} for e in self.entries
            ],
        }


def parse_script(text: str) -> list[dict]:
    actions = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            action = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScriptTypeError(f"line {line_no}: not valid JSON: {exc}") from exc
        if not isinstance(action, dict) or action.get("action") not in KNOWN_ACTIONS:
            raise ScriptTypeError(f"line {line_no}: unknown action {action!r}")
        actions.append(action)
    return actions


def auto_answers(instrument: dict, values: Optional[dict] = None) -> dict:
    """Fill required questions with defaults; attention checks answered
    with their expected value so auto-driven sessions stay clean."""
    answers = dict(values or {})
    for question in instrument.get("questions", []):
        qid = question["question_id"]
        if qid in answers:
            continue
        if not question.get("required"):
            continue
        check = question.get("attention_check")
        if check is not None:
            answers[qid] = check["expected_answer"]
            continue
        at = question["answer_type"]
        kind = at["kind"]
        if kind == "likert":
            answers[qid] = (at["points"] + 1) // 2
        elif kind == "multiple_choice":
            answers[qid] = [at["options"][0]] if at.get("allow_multiple") else at["options"][0]
        else:
            answers[qid] = "scripted response"
    return answers


class ScriptRunner:
    def __init__(self, base_url: str, client: Optional[httpx.Client] = None) -> None:
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(base_url=self.base_url, timeout=30.0)
        self.token: Optional[str] = None
        self.transcript = SessionTranscript()
        self.last_serp: list[dict] = []
        self.last_query_id: Optional[str] = None
        self.test_mode = False

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.token}"} if self.token else {}

    def _now_ms(self) -> int:
        return int(time.time() * 1000)

    def register(self, invite_code: str, external_label: str = "") -> None:
        health = self.client.get("/api/health")
        health.raise_for_status()
        self.test_mode = bool(health.json().get("test_mode"))
        response = self.client.post(
            "/api/participant/register",
            json={"invite_code": invite_code, "external_label": external_label},
        )
        if response.status_code != 201:
            raise ServiceError(f"registration failed: {response.status_code} {response.text}")
        body = response.json()
        self.token = body["token"]
        self.transcript.study_id = body["study_id"]
        self.transcript.participant_id = body["participant_id"]
        self.transcript.session_id = body["session_id"]

    def state(self) -> dict:
        response = self.client.get("/api/participant/state", headers=self._headers())
        response.raise_for_status()
        return response.json()

    def _record(self, action: dict, response: httpx.Response, ok: Optional[bool] = None) -> TranscriptEntry:
        try:
            detail = response.json()
        except json.JSONDecodeError:
            detail = {"raw": response.text[:500]}
        entry = TranscriptEntry(
            action=action,
            ok=response.is_success if ok is None else ok,
            status=response.status_code,
            detail=detail,
        )
        self.transcript.entries.append(entry)
        return entry

    def _note_popups(self, popups: list[dict]) -> None:
        for popup in popups or []:
            if popup["instance_id"] not in self.transcript.popups_seen:
                self.transcript.popups_seen.append(popup["instance_id"])

    def run(self, actions: list[dict]) -> SessionTranscript:
        for action in actions:
            self._step(action)
        state = self.state()
        self.transcript.completed_at = state["session"]["completed_at"]
        return self.transcript

    def _step(self, action: dict) -> None:
        name = action["action"]
        handler = getattr(self, f"_do_{name}")
        handler(action)

    # -- individual actions -------------------------------------------------

    def _do_advance(self, action: dict) -> None:
        state = self.state()
        step = state.get("step")
        if step is None:
            raise ServiceError("advance on a completed session")
        if step["kind"] != "consent":
            raise ScriptTypeError(f"advance only completes consent steps, current step is {step['kind']}")
        checked = [True] * len(step.get("consent_checkboxes", []))
        response = self.client.post(
            "/api/participant/consent", json={"checked": checked}, headers=self._headers()
        )
        self._record(action, response)
        self._fail_unless_expected(action, response)

    def _do_answer_survey(self, action: dict) -> None:
        state = self.state()
        step = state.get("step") or {}
        instrument = step.get("survey")
        if instrument is None:
            raise ScriptTypeError(f"answer_survey on non-survey step {step.get('kind')}")
        values = action.get("values") or {}
        if action.get("auto", not values):
            values = auto_answers(instrument, values)
        response = self.client.post(
            "/api/participant/survey", json={"answers": values}, headers=self._headers()
        )
        self._record(action, response)
        self._fail_unless_expected(action, response)

    def _do_chat(self, action: dict) -> None:
        typing_ms = int(action.get("typing_ms", 1000))
        now = self._now_ms()
        payload = {
            "prompt": action["prompt"],
            "typing_start_ms": now - typing_ms,
            "typing_end_ms": now,
            "client_ts": now,
        }
        chunks: list[str] = []
        final: dict = {}
        with self.client.stream(
            "POST", "/api/participant/chat", json=payload, headers=self._headers()
        ) as response:
            if response.status_code != 200:
                response.read()
                entry_response = response
                self._record(action, entry_response)
                self._fail_unless_expected(action, entry_response)
                return
            for line in response.iter_lines():
                if not line.startswith("data:"):
                    continue
                frame = json.loads(line[len("data:"):].strip())
                if frame.get("final"):
                    final = frame
                else:
                    chunks.append(frame["text"])
        self._note_popups(final.get("popups", []))
        if "error" not in final:
            self.transcript.turns.append(final.get("turn_id", ""))
        self.transcript.entries.append(
            TranscriptEntry(
                action=action,
                ok="error" not in final,
                status=200,
                detail={"turn_id": final.get("turn_id"), "text": "".join(chunks), "error": final.get("error")},
            )
        )
        if "error" in final and action.get("expect_error") != "provider":
            raise ServiceError(f"chat stream failed: {final['error']}")

    def _do_search(self, action: dict) -> None:
        typing_ms = int(action.get("typing_ms", 800))
        now = self._now_ms()
        payload = {
            "query": action["query"],
            "typing_start_ms": now - typing_ms,
            "typing_end_ms": now,
            "client_ts": now,
        }
        response = self.client.post("/api/participant/search", json=payload, headers=self._headers())
        entry = self._record(action, response)
        self._fail_unless_expected(action, response)
        if response.is_success:
            body = entry.detail
            self.last_serp = body.get("results", [])
            self.last_query_id = body.get("query_id")
            self.transcript.queries[self.last_query_id] = 0
            self._note_popups(body.get("popups", []))

    def _do_click(self, action: dict) -> None:
        if self.last_query_id is None:
            raise ScriptTypeError("click before any search")
        rank = int(action["rank"])
        item = next((r for r in self.last_serp if r["rank"] == rank), None)
        if item is None:
            raise ScriptTypeError(f"rank {rank} not present in the last SERP")
        response = self.client.post(
            "/api/participant/click",
            json={"query_id": self.last_query_id, "url": item["url"], "rank": rank, "client_ts": self._now_ms()},
            headers=self._headers(),
        )
        entry = self._record(action, response)
        self._fail_unless_expected(action, response)
        if response.is_success and entry.detail.get("accepted"):
            self.transcript.queries[self.last_query_id] += 1

    def _do_rate(self, action: dict) -> None:
        target = action.get("target", "turn")
        if target == "turn":
            if not self.transcript.turns:
                raise ScriptTypeError("rate turn before any completed turn")
            turn_id = action.get("turn_id") or self.transcript.turns[-1]
            response = self.client.post(
                "/api/participant/rate-turn",
                json={"turn_id": turn_id, "rating": int(action["value"])},
                headers=self._headers(),
            )
        elif target == "trajectory":
            response = self.client.post(
                "/api/participant/rate-trajectory",
                json={"rating": int(action["value"])},
                headers=self._headers(),
            )
        else:
            raise ScriptTypeError(f"unknown rate target {target!r}")
        self._record(action, response)
        self._fail_unless_expected(action, response)

    def _do_note(self, action: dict) -> None:
        response = self.client.post(
            "/api/participant/note",
            json={"text": action["text"], "client_ts": self._now_ms()},
            headers=self._headers(),
        )
        self._record(action, response)
        self._fail_unless_expected(action, response)

    def _do_wait(self, action: dict) -> None:
        seconds = float(action["seconds"])
        if self.test_mode:
            response = self.client.post("/api/test/clock", json={"advance_s": seconds})
            self._record(action, response)
            if not response.is_success:
                raise ServiceError(f"clock advance failed: {response.status_code}")
        else:
            time.sleep(seconds)
            self.transcript.entries.append(TranscriptEntry(action=action, ok=True, status=0))

    def _do_submit_task(self, action: dict) -> None:
        payload: dict = {}
        if action.get("final_note") is not None:
            payload["final_note"] = action["final_note"]
        response = self.client.post("/api/participant/submit-task", json=payload, headers=self._headers())
        self._record(action, response)
        if response.status_code == 409:
            reason = response.json().get("error", {}).get("reason")
            if reason != action.get("expect_error"):
                raise ServiceError(f"unexpected gate error on submit: {reason}")
            return
        self._fail_unless_expected(action, response)

    def _do_answer_popup(self, action: dict) -> None:
        state = self.state()
        pending = state.get("pending_popups", [])
        if not pending:
            if action.get("expect_none"):
                self.transcript.entries.append(TranscriptEntry(action=action, ok=True, status=0))
                return
            raise ScriptTypeError("answer_popup with no pending popup")
        popup = pending[0]
        self._note_popups(pending)
        values = action.get("values") or {}
        if action.get("auto", not values):
            values = auto_answers(popup.get("survey") or {"questions": []}, values)
        response = self.client.post(
            "/api/participant/popup",
            json={"instance_id": popup["instance_id"], "answers": values},
            headers=self._headers(),
        )
        self._record(action, response)
        self._fail_unless_expected(action, response)
        if response.is_success:
            self.transcript.popups_answered.append(popup["instance_id"])

    def _fail_unless_expected(self, action: dict, response: httpx.Response) -> None:
        expected = action.get("expect_error")
        if response.is_success:
            if expected:
                raise ServiceError(f"{action['action']} succeeded but expected error {expected!r}")
            return
        if expected:
            body = response.json()
            reason = body.get("error", {}).get("reason") or body.get("error", {}).get("kind")
            if reason == expected:
                return
        raise ServiceError(f"{action['action']} failed: {response.status_code} {response.text[:300]}")


def run_script(base_url: str, invite_code: str, actions: list[dict], external_label: str = "scripted") -> SessionTranscript:
    runner = ScriptRunner(base_url)
    runner.register(invite_code, external_label)
    return runner.run(actions)


def _csv_rows(data: bytes) -> list[dict]:
    import csv
    import io

    reader = csv.DictReader(io.StringIO(data.decode("utf-8")))
    return list(reader)


def compare_export(base_url: str, admin_token: str, study_id: str, transcript: SessionTranscript) -> dict:
    """Check that transcript counts match the exported CSV row counts for
    this transcript's session. Returns {ok, mismatches, counts}."""
    client = httpx.Client(base_url=base_url.rstrip("/"), timeout=30.0)
    headers = {"Authorization": f"Bearer {admin_token}"}
    files: dict[str, list[dict]] = {}
    for name in ("chat_history.csv", "search_log.csv", "in_situ.csv", "registration.csv"):
        response = client.get(f"/api/admin/studies/{study_id}/export/{name}", headers=headers)
        response.raise_for_status()
        files[name] = [row for row in _csv_rows(response.content) if row["session_id"] == transcript.session_id]

    counts = {
        "turns": (len(transcript.turns), len(files["chat_history.csv"])),
        "search_rows": (transcript.expected_search_rows(), len(files["search_log.csv"])),
        "clicks": (
            transcript.click_count,
            sum(1 for row in files["search_log.csv"] if row["clicked_url"]),
        ),
        "popups_answered": (
            len(set(transcript.popups_answered)),
            len({row["instance_id"] for row in files["in_situ.csv"]}),
        ),
        "registrations": (1, len(files["registration.csv"])),
    }
    mismatches = {name: pair for name, pair in counts.items() if pair[0] != pair[1]}
    return {"ok": not mismatches, "mismatches": mismatches, "counts": counts}
