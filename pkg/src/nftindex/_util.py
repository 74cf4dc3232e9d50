"""Small I/O and formatting helpers: atomic writes, canonical JSON, timestamps."""

from __future__ import annotations

import json
import os
import tempfile
from datetime import date, datetime, timezone

from .errors import OutputError, ValidationError


def parse_rfc3339(value: str) -> datetime:
    """Parse an RFC-3339 timestamp into an aware UTC datetime."""
    if not isinstance(value, str) or not value:
        raise ValidationError(f"timestamp must be a non-empty string, got {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValidationError(f"unknown timestamp format: {value!r}") from exc
    if ts.tzinfo is None:
        raise ValidationError(f"timestamp lacks a UTC offset: {value!r}")
    return ts.astimezone(timezone.utc)


def parse_iso_date(value: str) -> date:
    try:
        return date.fromisoformat(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad ISO date: {value!r}") from exc


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, stable float repr, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    atomic_write_text(path, canonical_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
