"""Command line entry points: serve the service and drive the harness."""

from __future__ import annotations

import json
import sys
import threading
import time
from pathlib import Path

import click
import httpx
import uvicorn

from . import harness, seeds
from .api import create_app
from .model import Modality
from .service import AppCore
from .storage import FileStorage


@click.group()
def main() -> None:
    """Self-hosted chat/search user-study service."""


@main.command()
@click.option("--root", envvar="STUDYKIT_ROOT", default="./studykit-data", show_default=True, help="Storage root directory.")
@click.option("--host", envvar="STUDYKIT_HOST", default="127.0.0.1", show_default=True)
@click.option("--port", envvar="STUDYKIT_PORT", default=8000, show_default=True, type=int)
@click.option("--test-mode", is_flag=True, help="Enable the virtual clock endpoint (never use for real studies).")
@click.option("--ui-dir", envvar="STUDYKIT_UI_DIR", default="./frontend/dist", show_default=True, help="Compiled web UI to serve at /ui (skipped when absent).")
def serve(root: str, host: str, port: int, test_mode: bool, ui_dir: str) -> None:
    """Run the HTTP service."""
    core = AppCore(FileStorage(root), test_mode=test_mode)
    app = create_app(core, ui_dir=Path(ui_dir))
    if not test_mode:
        def ticker() -> None:
            while True:
                time.sleep(1.0)
                try:
                    core.tick()
                except Exception:
                    pass

        threading.Thread(target=ticker, daemon=True, name="periodic-ticker").start()
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _admin_token(client: httpx.Client, username: str, password: str) -> str:
    health = client.get("/api/health")
    health.raise_for_status()
    if health.json()["admin_setup_required"]:
        response = client.post("/api/setup", json={"username": username, "password": password})
    else:
        response = client.post("/api/admin/login", json={"username": username, "password": password})
    response.raise_for_status()
    return response.json()["token"]


@main.command("seed-study")
@click.option("--url", required=True, help="Base URL of a running service.")
@click.option("--admin-user", default="admin", show_default=True)
@click.option("--admin-password", default="admin-password", show_default=True)
@click.option("--study-id", default="study-default", show_default=True)
@click.option("--min-interactions", default=0, show_default=True, type=int)
@click.option("--modality", type=click.Choice(["chat", "search"]), default="chat", show_default=True)
def seed_study(url: str, admin_user: str, admin_password: str, study_id: str, min_interactions: int, modality: str) -> None:
    """Create the default consent-plus-six-step study with mock providers."""
    client = httpx.Client(base_url=url.rstrip("/"), timeout=30.0)
    token = _admin_token(client, admin_user, admin_password)
    config = seeds.make_default_study(
        study_id, min_interactions=min_interactions, modality=Modality(modality)
    )
    response = client.post(
        "/api/admin/studies",
        json=config.model_dump(mode="json"),
        headers={"Authorization": f"Bearer {token}"},
    )
    response.raise_for_status()
    body = response.json()
    click.echo(json.dumps({"study_id": body["study_id"], "invite_code": body["invite_code"], "token": token}))


@main.command("run-script")
@click.option("--url", required=True)
@click.option("--invite", required=True, help="Study invite code.")
@click.option("--script", "script_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--label", default="scripted", show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), help="Write the transcript JSON here.")
def run_script_command(url: str, invite: str, script_path: Path, label: str, out_path: Path | None) -> None:
    """Replay a behavior script; exits nonzero on any unexpected error."""
    actions = harness.parse_script(script_path.read_text(encoding="utf-8"))
    try:
        transcript = harness.run_script(url, invite, actions, external_label=label)
    except (harness.ScriptTypeError, harness.ServiceError) as exc:
        click.echo(f"script failed: {exc}", err=True)
        sys.exit(1)
    except httpx.HTTPError as exc:
        click.echo(f"service unreachable: {exc}", err=True)
        sys.exit(1)
    payload = json.dumps(transcript.to_dict(), indent=2)
    if out_path is not None:
        out_path.write_text(payload, encoding="utf-8")
    click.echo(payload)


@main.command("compare-export")
@click.option("--url", required=True)
@click.option("--study", "study_id", required=True)
@click.option("--transcript", "transcript_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--admin-user", default="admin", show_default=True)
@click.option("--admin-password", default="admin-password", show_default=True)
def compare_export_command(url: str, study_id: str, transcript_path: Path, admin_user: str, admin_password: str) -> None:
    """Check a transcript's counts against export row counts."""
    raw = json.loads(transcript_path.read_text(encoding="utf-8"))
    transcript = harness.SessionTranscript(
        study_id=raw["study_id"],
        participant_id=raw["participant_id"],
        session_id=raw["session_id"],
        turns=raw["turns"],
        queries=raw["queries"],
        popups_answered=raw["popups_answered"],
    )
    client = httpx.Client(base_url=url.rstrip("/"), timeout=30.0)
    token = _admin_token(client, admin_user, admin_password)
    report = harness.compare_export(url, token, study_id, transcript)
    click.echo(json.dumps(report, indent=2))
    if not report["ok"]:
        sys.exit(1)


if __name__ == "__main__":
    main()
