"""Tokens, password hashing, and at-rest credential encryption.

Bearer tokens are HMAC-signed JSON blobs, so they stay valid across
service restarts without a token table. The signing secret comes from the
environment (``STUDYKIT_SECRET``) or is generated once and kept in the
storage root. Provider API keys are Fernet-encrypted with a key derived
from the same secret, which keeps raw keys out of study config exports.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import secrets
from pathlib import Path
from typing import Optional

from cryptography.fernet import Fernet, InvalidToken

from .model import StudyKitError

TOKEN_TTL_MS = 7 * 24 * 3600 * 1000
PBKDF2_ITERATIONS = 200_000


class AuthFailure(StudyKitError):
    pass


def load_or_create_secret(storage_root: str | Path, env_var: str = "STUDYKIT_SECRET") -> str:
    value = os.environ.get(env_var)
    if value:
        return value
    path = Path(storage_root) / "secret.key"
    if path.exists():
        return path.read_text(encoding="utf-8").strip()
    secret = secrets.token_urlsafe(32)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(secret, encoding="utf-8")
    os.chmod(path, 0o600)
    return secret


def hash_password(password: str, salt: Optional[bytes] = None) -> str:
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS)
    return f"pbkdf2${PBKDF2_ITERATIONS}${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        _, iterations, salt_hex, digest_hex = stored.split("$")
        digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), bytes.fromhex(salt_hex), int(iterations))
        return hmac.compare_digest(digest.hex(), digest_hex)
    except (ValueError, TypeError):
        return False


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii").rstrip("=")


def _unb64(text: str) -> bytes:
    padding = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + padding)


def issue_token(secret: str, kind: str, principal_id: str, now_ms: int, study_id: str = "", ttl_ms: int = TOKEN_TTL_MS) -> str:
    payload = {"kind": kind, "id": principal_id, "study_id": study_id, "exp": now_ms + ttl_ms}
    body = _b64(json.dumps(payload, separators=(",", ":")).encode("utf-8"))
    signature = _b64(hmac.new(secret.encode("utf-8"), body.encode("ascii"), hashlib.sha256).digest())
    return f"{body}.{signature}"


def verify_token(secret: str, token: str, now_ms: int) -> dict:
    """Return the token payload or raise AuthFailure."""
    try:
        body, signature = token.split(".")
        expected = _b64(hmac.new(secret.encode("utf-8"), body.encode("ascii"), hashlib.sha256).digest())
        if not hmac.compare_digest(signature, expected):
            raise AuthFailure("bad token signature")
        payload = json.loads(_unb64(body))
    except (ValueError, json.JSONDecodeError) as exc:
        raise AuthFailure("malformed token") from exc
    if payload.get("exp", 0) < now_ms:
        raise AuthFailure("token expired")
    return payload


def _fernet(secret: str) -> Fernet:
    key = base64.urlsafe_b64encode(hashlib.sha256(secret.encode("utf-8")).digest())
    return Fernet(key)


def encrypt_value(secret: str, value: str) -> str:
    return _fernet(secret).encrypt(value.encode("utf-8")).decode("ascii")


def decrypt_value(secret: str, token: str) -> str:
    try:
        return _fernet(secret).decrypt(token.encode("ascii")).decode("utf-8")
    except InvalidToken as exc:
        raise AuthFailure("credential cannot be decrypted with the current secret") from exc
