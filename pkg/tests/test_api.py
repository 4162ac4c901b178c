import json

import pytest
from fastapi.testclient import TestClient

from studykit.api import create_app
from studykit.model import Modality
from studykit.seeds import make_default_study, make_popup_survey
from studykit.service import AppCore
from studykit.storage import FileStorage


@pytest.fixture
def client(core):
    return TestClient(create_app(core), raise_server_exceptions=False)


def setup_admin(client, username="admin", password="pw-123456"):
    response = client.post("/api/setup", json={"username": username, "password": password})
    assert response.status_code == 201
    return response.json()["token"]


def auth(token):
    return {"Authorization": f"Bearer {token}"}


def create_study(client, admin_token, config=None):
    config = config or make_default_study()
    response = client.post("/api/admin/studies", json=config.model_dump(mode="json"), headers=auth(admin_token))
    assert response.status_code == 201, response.text
    body = response.json()
    assert body["issues"] == []
    return body


def register(client, invite_code, label="p"):
    response = client.post("/api/participant/register", json={"invite_code": invite_code, "external_label": label})
    assert response.status_code == 201, response.text
    return response.json()


def sse_frames(response):
    frames = []
    for line in response.iter_lines():
        if line.startswith("data:"):
            frames.append(json.loads(line[len("data:"):].strip()))
    return frames


# -- setup & auth ---------------------------------------------------------------


def test_health_reports_setup_required(client):
    body = client.get("/api/health").json()
    assert body["status"] == "ready"
    assert body["admin_setup_required"] is True


def test_setup_allowed_once(client):
    setup_admin(client)
    again = client.post("/api/setup", json={"username": "other", "password": "x-123456"})
    assert again.status_code == 409
    assert client.get("/api/health").json()["admin_setup_required"] is False


def test_admin_login_good_and_bad(client):
    setup_admin(client, "root", "hunter2-long")
    ok = client.post("/api/admin/login", json={"username": "root", "password": "hunter2-long"})
    assert ok.status_code == 200 and ok.json()["token"]
    bad = client.post("/api/admin/login", json={"username": "root", "password": "wrong"})
    assert bad.status_code == 401


def test_every_endpoint_rejects_wrong_principal(client):
    """Fuzz pass over (endpoint x wrong principal): every authenticated
    route must reject missing, garbage, and wrong-kind tokens with 401."""
    admin_token = setup_admin(client)
    study = create_study(client, admin_token)
    participant = register(client, study["invite_code"])

    open_paths = {
        "/api/health",
        "/api/setup",
        "/api/admin/login",
        "/api/participant/register",
        "/api/participant/login",
        "/api/test/clock",
    }
    fills = {
        "study_id": study["study_id"],
        "key": "background",
        "ref": "default",
        "session_id": participant["session_id"],
        "name": "chat_history.csv",
    }
    checked = 0
    for route in client.app.routes:
        path_template = getattr(route, "path", "")
        methods = getattr(route, "methods", None)
        if not path_template.startswith("/api") or path_template in open_paths or not methods:
            continue
        path = path_template
        for field, value in fills.items():
            path = path.replace("{" + field + "}", value)
        wrong_kind = participant["token"] if "/admin/" in path_template or path_template == "/api/setup" else admin_token
        for method in methods - {"HEAD", "OPTIONS"}:
            for headers in ({}, auth("garbage"), auth(wrong_kind)):
                response = client.request(method, path, headers=headers, json={})
                assert response.status_code == 401, (method, path, headers, response.status_code)
                checked += 1
    assert checked >= 80  # every protected endpoint, three wrong principals each


# -- admin workflows ---------------------------------------------------------------


def test_study_crud_and_flow_reorder(client):
    token = setup_admin(client)
    study = create_study(client, token)
    sid = study["study_id"]

    fetched = client.get(f"/api/admin/studies/{sid}", headers=auth(token)).json()
    assert fetched["config"]["study_id"] == sid
    assert fetched["issues"] == []

    flow_steps = fetched["config"]["flow"]
    by_kind = {s["kind"]: s for s in flow_steps}
    by_kind["experience_survey"]["order"], by_kind["end_survey"]["order"] = (
        by_kind["end_survey"]["order"],
        by_kind["experience_survey"]["order"],
    )
    response = client.put(f"/api/admin/studies/{sid}/flow", json={"flow": flow_steps}, headers=auth(token))
    assert response.status_code == 200 and response.json()["issues"] == []
    updated = client.get(f"/api/admin/studies/{sid}", headers=auth(token)).json()
    orders = {s["kind"]: s["order"] for s in updated["config"]["flow"]}
    assert orders["end_survey"] < orders["experience_survey"]

    assert client.delete(f"/api/admin/studies/{sid}", headers=auth(token)).json()["deleted"] is True
    assert client.get(f"/api/admin/studies/{sid}", headers=auth(token)).status_code == 404


def test_survey_import_export_endpoints(client):
    token = setup_admin(client)
    study = create_study(client, token)
    sid = study["study_id"]

    exported = client.get(f"/api/admin/studies/{sid}/surveys/background/export", headers=auth(token))
    assert exported.status_code == 200
    document = json.loads(exported.content)
    assert document["survey_id"] == "background"

    document["questions"][0]["prompt"] = "Edited prompt"
    response = client.post(
        f"/api/admin/studies/{sid}/surveys/background/import",
        content=json.dumps(document).encode(),
        headers=auth(token),
    )
    assert response.status_code == 200, response.text
    assert response.json()["instrument"]["questions"][0]["prompt"] == "Edited prompt"

    bad = client.post(
        f"/api/admin/studies/{sid}/surveys/background/import",
        content=b"{broken",
        headers=auth(token),
    )
    assert bad.status_code == 422


def test_credentials_set_and_verify(client):
    token = setup_admin(client)
    body = {
        "provider_config": {
            "llm": {"provider": "mock-echo", "model": "mock"},
            "search": {"provider": "mock-corpus", "results_per_query": 5},
        },
        "api_keys": {},
    }
    assert client.put("/api/admin/credentials/default", json=body, headers=auth(token)).status_code == 200
    statuses = client.post("/api/admin/credentials/default/verify", headers=auth(token)).json()
    assert statuses == {"llm": "ok", "search": "ok"}


def test_trigger_rules_update_validates_references(client):
    token = setup_admin(client)
    study = create_study(client, token)
    sid = study["study_id"]
    rules = [{"rule_id": "r1", "survey_id": "ghost", "condition": {"kind": "after_n_prompts", "n": 2}}]
    response = client.put(f"/api/admin/studies/{sid}/triggers", json={"trigger_rules": rules}, headers=auth(token))
    assert response.status_code == 200
    assert any("survey" in issue["path"] for issue in response.json()["issues"])


# -- participant workflows -----------------------------------------------------------


def walk_consent_and_surveys(client, token):
    from studykit.harness import auto_answers

    while True:
        state = client.get("/api/participant/state", headers=auth(token)).json()
        step = state["step"]
        if step is None or step["kind"] == "main_task":
            return state
        if step["kind"] == "consent":
            response = client.post(
                "/api/participant/consent",
                json={"checked": [True] * len(step["consent_checkboxes"])},
                headers=auth(token),
            )
        else:
            response = client.post(
                "/api/participant/survey",
                json={"answers": auto_answers(step["survey"])},
                headers=auth(token),
            )
        assert response.status_code == 200, response.text


def test_participant_chat_flow_over_http(client):
    admin_token = setup_admin(client)
    study = create_study(client, admin_token)
    participant = register(client, study["invite_code"])
    token = participant["token"]

    state = client.get("/api/participant/state", headers=auth(token)).json()
    assert state["step"]["kind"] == "consent"
    incomplete = client.post("/api/participant/consent", json={"checked": [True, False]}, headers=auth(token))
    assert incomplete.status_code == 409
    assert incomplete.json()["error"]["reason"] == "consent_incomplete"

    state = walk_consent_and_surveys(client, token)
    assert state["step"]["kind"] == "main_task"
    assert state["step"]["task"]["modality"] == "chat"

    with client.stream(
        "POST",
        "/api/participant/chat",
        json={"prompt": "hello there", "typing_start_ms": 1, "typing_end_ms": 2, "client_ts": 3},
        headers=auth(token),
    ) as response:
        assert response.status_code == 200
        assert response.headers["content-type"].startswith("text/event-stream")
        frames = sse_frames(response)
    assert frames[-1]["final"] is True
    text = "".join(f["text"] for f in frames if "chunk_index" in f)
    assert text == "echo: hello there"

    rate = client.post(
        "/api/participant/rate-turn",
        json={"turn_id": frames[-1]["turn_id"], "rating": 5},
        headers=auth(token),
    )
    assert rate.status_code == 200
    trajectory = client.post("/api/participant/rate-trajectory", json={"rating": 4}, headers=auth(token))
    assert trajectory.status_code == 200

    note = client.post("/api/participant/note", json={"text": "useful"}, headers=auth(token))
    assert note.status_code == 200
    submit = client.post("/api/participant/submit-task", json={}, headers=auth(token))
    assert submit.status_code == 200

    # remaining surveys, then completion
    walk_consent_and_surveys(client, token)
    state = client.get("/api/participant/state", headers=auth(token)).json()
    assert state["session"]["completed_at"] is not None

    # re-login resumes the completed session
    login = client.post(
        "/api/participant/login",
        json={
            "study_id": participant["study_id"],
            "participant_id": participant["participant_id"],
            "invite_code": study["invite_code"],
        },
    )
    assert login.status_code == 200
    assert login.json()["session_id"] == participant["session_id"]


def test_search_flow_with_popup_over_http(client):
    admin_token = setup_admin(client)
    config = make_default_study(modality=Modality.SEARCH)
    popup = make_popup_survey()
    surveys = dict(config.surveys)
    surveys[popup.survey_id] = popup
    from studykit.model import AfterNQueries, TriggerRule

    rule = TriggerRule(rule_id="r1", survey_id=popup.survey_id, condition=AfterNQueries(n=3))
    config = config.model_copy(update={"surveys": surveys, "trigger_rules": [rule]})
    study = create_study(client, admin_token, config)
    participant = register(client, study["invite_code"])
    token = participant["token"]
    walk_consent_and_surveys(client, token)

    wrong = client.post("/api/participant/chat", json={"prompt": "x"}, headers=auth(token))
    assert wrong.status_code == 409

    for i, query in enumerate(["solar", "coffee", "wind energy"]):
        response = client.post("/api/participant/search", json={"query": query}, headers=auth(token))
        assert response.status_code == 200, response.text
        body = response.json()
        if i < 2:
            assert body["popups"] == []
        else:
            assert len(body["popups"]) == 1, "popup descriptor must ride the third response"
    results = body["results"]

    click = client.post(
        "/api/participant/click",
        json={"query_id": body["query_id"], "url": results[0]["url"], "rank": 1},
        headers=auth(token),
    )
    assert click.json()["accepted"] is True
    anomaly = client.post(
        "/api/participant/click",
        json={"query_id": body["query_id"], "url": "https://forged.example", "rank": 1},
        headers=auth(token),
    )
    assert anomaly.json()["accepted"] is False

    pending = client.get("/api/participant/state", headers=auth(token)).json()["pending_popups"]
    answer = client.post(
        "/api/participant/popup",
        json={"instance_id": pending[0]["instance_id"], "answers": {"confidence_now": 6}},
        headers=auth(token),
    )
    assert answer.status_code == 200


def test_clock_endpoint_gated_by_test_mode(client, tmp_path):
    assert client.post("/api/test/clock", json={"advance_s": 5}).status_code == 200
    prod_core = AppCore(FileStorage(tmp_path / "prod"), test_mode=False)
    prod_client = TestClient(create_app(prod_core), raise_server_exceptions=False)
    assert prod_client.post("/api/test/clock", json={"advance_s": 5}).status_code == 404


def test_rate_limiter_caps_per_token_per_minute():
    from studykit.api import _RateLimiter

    limiter = _RateLimiter(per_minute=3)
    assert all(limiter.check("tok") for _ in range(3))
    assert limiter.check("tok") is False
    assert limiter.check("other") is True  # caps are per token


def test_unknown_study_and_bad_invite(client):
    token = setup_admin(client)
    assert client.get("/api/admin/studies/ghost", headers=auth(token)).status_code == 404
    response = client.post("/api/participant/register", json={"invite_code": "nope"})
    assert response.status_code == 404
