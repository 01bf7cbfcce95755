"""Line-delimited self-describing text records.

Every persistent artifact (object library, device/matrix config, session
manifests, channel logs, trial logs) is a sequence of newline-delimited
records. A record is one JSON object per line whose reserved ``"record"``
key names the record kind; all other keys are typed fields. Floats use
Python's shortest round-trip repr, so write-then-read is value-exact.
"""

from __future__ import annotations

import json
from typing import Any


class RecordError(ValueError):
    """A line could not be parsed as a record."""


def dump_record(kind: str, fields: dict[str, Any]) -> str:
    """Serialize one record as a single line (no trailing newline)."""
    if "record" in fields:
        raise ValueError("'record' is a reserved key")
    payload = {"record": kind}
    payload.update(fields)
    return json.dumps(payload, sort_keys=True, allow_nan=False, separators=(",", ":"))


def parse_record(line: str) -> tuple[str, dict[str, Any]]:
    """Parse one line into (kind, fields)."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise RecordError(f"bad record line: {e}") from e
    if not isinstance(obj, dict) or "record" not in obj:
        raise RecordError("record line must be a JSON object with a 'record' key")
    kind = obj.pop("record")
    if not isinstance(kind, str):
        raise RecordError("'record' kind must be a string")
    return kind, obj


def read_records(path) -> list[tuple[str, dict[str, Any]]]:
    """Read all records from a file; raises RecordError with the line number on failure."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(parse_record(line))
            except RecordError as e:
                raise RecordError(f"{path}:{lineno}: {e}") from e
    return out


def write_records(path, entries: list[tuple[str, dict[str, Any]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for kind, fields in entries:
            f.write(dump_record(kind, fields) + "\n")
