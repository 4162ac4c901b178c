"""Structured CSV export of a study's collected data.

Eight datasets per study: registration, demographics, pre/post-task
questionnaire responses (long format, one row per answered question),
complete chat histories, the search log (one row per click plus one per
click-less query), answered in-situ popups, and notes.

Encoding is RFC 4180: UTF-8, CRLF row terminators, fields quoted when
they contain commas, quotes, or line breaks, quotes doubled. Free text is
exported verbatim. Every timestamp appears twice, as epoch milliseconds
and as ISO-8601 UTC. Row order is (session_id, then event order), so two
exports of an unchanged study are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

from .events import SessionViews
from .flow import ParticipantSession
from .model import StudyConfig, StudyKitError, SurveyInstrument, find_instrument

FILE_NAMES = (
    "registration.csv",
    "demographics.csv",
    "pre_task.csv",
    "post_task.csv",
    "chat_history.csv",
    "search_log.csv",
    "in_situ.csv",
    "notes.csv",
)

# step kind -> questionnaire file
_SURVEY_FILE = {
    "background_survey": "demographics.csv",
    "pre_task": "pre_task.csv",
    "post_task": "post_task.csv",
    "experience_survey": "post_task.csv",
    "end_survey": "post_task.csv",
    "custom_survey": "post_task.csv",
}

HEADERS = {
    "registration.csv": [
        "participant_id", "session_id", "external_label",
        "registered_ms", "registered_iso", "completed_ms", "completed_iso",
    ],
    "demographics.csv": [
        "participant_id", "session_id", "survey_kind", "survey_id",
        "question_id", "answer", "submitted_ms", "submitted_iso",
    ],
    "pre_task.csv": [
        "participant_id", "session_id", "survey_kind", "survey_id",
        "question_id", "answer", "submitted_ms", "submitted_iso",
    ],
    "post_task.csv": [
        "participant_id", "session_id", "survey_kind", "survey_id",
        "question_id", "answer", "submitted_ms", "submitted_iso",
    ],
    "chat_history.csv": [
        "participant_id", "session_id", "task_id", "turn_id", "turn_index",
        "prompt_text", "typing_start_ms", "typing_end_ms", "submitted_ms",
        "response_text", "response_completed_ms", "turn_rating", "trajectory_rating",
        "typing_start_iso", "typing_end_iso", "submitted_iso", "response_completed_iso",
    ],
    "search_log.csv": [
        "participant_id", "session_id", "task_id", "query_id", "query_text",
        "typing_start_ms", "typing_end_ms", "issued_ms", "result_count",
        "clicked_url", "clicked_rank", "clicked_ms",
        "typing_start_iso", "typing_end_iso", "issued_iso", "clicked_iso",
    ],
    "in_situ.csv": [
        "participant_id", "session_id", "task_id", "instance_id", "rule_id", "survey_id",
        "fired_at_ms", "fired_at_iso", "question_id", "answer", "answered_ms", "answered_iso",
    ],
    "notes.csv": [
        "participant_id", "session_id", "task_id", "text", "updated_ms", "updated_iso",
    ],
}


class WidthMismatch(StudyKitError):
    pass


class UnknownStudy(StudyKitError):
    pass


@dataclass
class ExportBundle:
    files: dict[str, bytes] = field(default_factory=dict)


def iso_utc(ms: Optional[int]) -> str:
    if ms is None:
        return ""
    stamp = datetime.fromtimestamp(ms / 1000.0, tz=timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def csv_encode(header: list[str], rows: list[list]) -> bytes:
    """RFC 4180 encoding with a header row; raises WidthMismatch when a
    row's width differs from the header's."""
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise WidthMismatch(f"row {i} has {len(row)} fields, header has {len(header)}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue().encode("utf-8")


def _answer_rows(
    session: ParticipantSession,
    kind: str,
    survey_id: str,
    answers: dict,
    submitted_ms: int,
    instrument: Optional[SurveyInstrument],
) -> list[list]:
    ordered = []
    if instrument is not None:
        for q in instrument.questions:
            if q.question_id in answers:
                ordered.append(q.question_id)
    ordered.extend(sorted(set(answers) - set(ordered)))
    return [
        [
            session.participant_id,
            session.session_id,
            kind,
            survey_id,
            qid,
            answers[qid],
            submitted_ms,
            iso_utc(submitted_ms),
        ]
        for qid in ordered
    ]


def build_bundle(
    config: StudyConfig,
    sessions: list[ParticipantSession],
    views_by_session: dict[str, SessionViews],
) -> ExportBundle:
    """Assemble the eight CSV datasets from sessions and their folded views."""
    rows: dict[str, list[list]] = {name: [] for name in FILE_NAMES}

    for session in sorted(sessions, key=lambda s: s.session_id):
        views = views_by_session.get(session.session_id, SessionViews())
        rows["registration.csv"].append(
            [
                session.participant_id,
                session.session_id,
                session.external_label,
                session.started_at,
                iso_utc(session.started_at),
                session.completed_at,
                iso_utc(session.completed_at),
            ]
        )

        for submission in views.surveys:
            target = _SURVEY_FILE.get(submission.step_kind)
            if target is None:
                continue
            instrument = find_instrument(config, submission.survey_id)
            rows[target].extend(
                _answer_rows(
                    session,
                    submission.step_kind,
                    submission.survey_id,
                    submission.answers,
                    submission.submitted_ms,
                    instrument,
                )
            )

        for turn_id in views.turn_order:
            turn = views.turns[turn_id]
            rows["chat_history.csv"].append(
                [
                    session.participant_id,
                    session.session_id,
                    turn.task_id,
                    turn.turn_id,
                    turn.turn_index,
                    turn.prompt_text,
                    turn.typing_start_ms,
                    turn.typing_end_ms,
                    turn.submitted_ms,
                    turn.response_text,
                    turn.response_completed_ms if turn.ok else None,
                    turn.turn_rating,
                    views.trajectory_ratings.get(turn.task_id),
                    iso_utc(turn.typing_start_ms),
                    iso_utc(turn.typing_end_ms),
                    iso_utc(turn.submitted_ms),
                    iso_utc(turn.response_completed_ms if turn.ok else None),
                ]
            )

        for query_id in views.query_order:
            record = views.queries[query_id]
            base = [
                session.participant_id,
                session.session_id,
                record.task_id,
                record.query_id,
                record.query_text,
                record.typing_start_ms,
                record.typing_end_ms,
                record.issued_ms,
                record.result_count,
            ]
            timing = [
                iso_utc(record.typing_start_ms),
                iso_utc(record.typing_end_ms),
                iso_utc(record.issued_ms),
            ]
            if record.clicks:
                for click in record.clicks:
                    rows["search_log.csv"].append(
                        base + [click.url, click.rank, click.clicked_ms] + timing + [iso_utc(click.clicked_ms)]
                    )
            else:
                rows["search_log.csv"].append(base + [None, None, None] + timing + [""])

        for instance_id in views.popup_order:
            popup = views.popups[instance_id]
            if popup.answers is None:
                continue
            # one row per instrument question (blank when unanswered), so
            # row count is exactly answered instances x questions
            instrument = find_instrument(config, popup.survey_id)
            ordered = [q.question_id for q in instrument.questions] if instrument is not None else []
            ordered.extend(sorted(set(popup.answers) - set(ordered)))
            for qid in ordered:
                rows["in_situ.csv"].append(
                    [
                        session.participant_id,
                        session.session_id,
                        popup.task_id,
                        popup.instance_id,
                        popup.rule_id,
                        popup.survey_id,
                        popup.fired_at_ms,
                        iso_utc(popup.fired_at_ms),
                        qid,
                        popup.answers.get(qid),
                        popup.answered_ms,
                        iso_utc(popup.answered_ms),
                    ]
                )

        for task_id in sorted(views.notes):
            note = views.notes[task_id]
            rows["notes.csv"].append(
                [
                    session.participant_id,
                    session.session_id,
                    note.task_id,
                    note.text,
                    note.updated_ms,
                    iso_utc(note.updated_ms),
                ]
            )

    bundle = ExportBundle()
    for name in FILE_NAMES:
        bundle.files[name] = csv_encode(HEADERS[name], rows[name])
    return bundle


def zip_bundle(bundle: ExportBundle) -> bytes:
    """Deterministic ZIP of the bundle (fixed entry timestamps)."""
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        for name in FILE_NAMES:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            archive.writestr(info, bundle.files[name])
    return buffer.getvalue()
