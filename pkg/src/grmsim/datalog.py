"""Durable session recording.

A session is one directory::

    <root>/
      manifest        append-only: session record, channel records, trial index
      trials.log      one trial record per line
      <channel>.log   per-channel (t, payload) records, timestamps non-decreasing

All files use the line-delimited record grammar (see records.py). A trial
record is fsynced, then its manifest index entry is fsynced, before the write
is acknowledged -- a process kill after the ack cannot lose it. Readers
tolerate one truncated trailing line per file (a crash mid-write) by dropping
it and counting the truncation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

from .records import RecordError, dump_record, parse_record
from .types import TrialRecord

MANIFEST = "manifest"
TRIALS_LOG = "trials.log"


class DatalogError(Exception):
    pass


class SessionClosed(DatalogError):
    pass


class TimestampRegression(DatalogError):
    pass


class DuplicateTrialId(DatalogError):
    pass


class CorruptManifest(DatalogError):
    pass


class MissingChannelFile(DatalogError):
    pass


def channel_filename(channel: str) -> str:
    if not channel or "/" in channel or channel.startswith("."):
        raise ValueError(f"bad channel name {channel!r}")
    return channel + ".log"


class SessionWriter:
    """Single-writer session; channels are created on first use."""

    def __init__(self, root, session_id: str):
        self.root = str(root)
        self.session_id = session_id
        os.makedirs(self.root, exist_ok=True)
        self._manifest = open(os.path.join(self.root, MANIFEST), "a", encoding="utf-8")
        self._trials = open(os.path.join(self.root, TRIALS_LOG), "a", encoding="utf-8")
        self._channels: dict[str, Any] = {}
        self._channel_last_t: dict[str, float] = {}
        self._trial_ids: set[int] = set()
        self._closed = False
        self._append(self._manifest, dump_record("session", {"id": session_id}))
        self._sync(self._manifest)

    # low-level append/sync points (overridable for crash-injection tests)
    def _append(self, f, line: str) -> None:
        f.write(line + "\n")
        f.flush()

    def _sync(self, f) -> None:
        os.fsync(f.fileno())

    def _check_open(self) -> None:
        if self._closed:
            raise SessionClosed("session writer is closed")

    def record_channel(self, channel: str, t: float, payload: dict[str, Any]) -> None:
        """Append one timestamped payload; the channel auto-registers on first use."""
        self._check_open()
        f = self._channels.get(channel)
        if f is None:
            fname = channel_filename(channel)
            f = open(os.path.join(self.root, fname), "a", encoding="utf-8")
            self._channels[channel] = f
            self._channel_last_t[channel] = float("-inf")
            self._append(self._manifest, dump_record("channel", {"name": channel, "file": fname}))
            self._sync(self._manifest)
        last = self._channel_last_t[channel]
        if t < last:
            raise TimestampRegression(f"channel {channel!r}: t={t} after t={last}")
        self._channel_last_t[channel] = t
        self._append(f, dump_record("sample", {"t": t, "data": payload}))

    def add_manifest_record(self, kind: str, fields: dict[str, Any]) -> None:
        """Attach run metadata (e.g. the trial matrix) to the session manifest."""
        self._check_open()
        if kind in ("session", "channel", "trial_index"):
            raise ValueError(f"record kind {kind!r} is reserved")
        self._append(self._manifest, dump_record(kind, fields))
        self._sync(self._manifest)

    def write_trial_record(self, record: TrialRecord) -> None:
        """Durably persist one trial; returns only after the record survives a kill."""
        self._check_open()
        tid = record.spec.trial_id
        if tid in self._trial_ids:
            raise DuplicateTrialId(f"trial {tid} already written")
        offset = self._trials.tell()
        self._append(self._trials, dump_record("trial", record.to_fields()))
        self._sync(self._trials)
        self._append(self._manifest, dump_record("trial_index", {"trial_id": tid, "offset": offset}))
        self._sync(self._manifest)
        self._trial_ids.add(tid)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for f in [self._trials, self._manifest, *self._channels.values()]:
            f.flush()
            os.fsync(f.fileno())
            f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_lines_tolerant(path: str) -> tuple[list[str], int]:
    """All complete lines plus a truncation count (0 or 1) for a partial tail."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        return [], 0
    truncated = 0 if raw.endswith(b"\n") else 1
    lines = raw.decode("utf-8", errors="replace").split("\n")
    if truncated:
        lines = lines[:-1]  # drop the partial tail
    return [ln for ln in lines if ln], truncated


@dataclass
class ChannelView:
    name: str
    samples: list[tuple[float, dict]]
    truncated_lines: int

    @property
    def time_range(self) -> Optional[tuple[float, float]]:
        if not self.samples:
            return None
        return self.samples[0][0], self.samples[-1][0]


@dataclass
class SessionReader:
    root: str
    session_id: str
    channels: dict[str, ChannelView]
    trial_records: list[TrialRecord]
    truncations: int
    extras: dict[str, list[dict]] = field(default_factory=dict)

    def iter_trials(self) -> Iterator[TrialRecord]:
        return iter(self.trial_records)


def read_session(root) -> SessionReader:
    """Open a session directory read-only and verify manifest consistency."""
    root = str(root)
    manifest_path = os.path.join(root, MANIFEST)
    if not os.path.exists(manifest_path):
        raise CorruptManifest(f"no manifest in {root}")
    lines, manifest_trunc = _read_lines_tolerant(manifest_path)
    session_id = None
    channel_files: dict[str, str] = {}
    trial_index: dict[int, int] = {}
    extras: dict[str, list[dict]] = {}
    for i, line in enumerate(lines):
        try:
            kind, fields = parse_record(line)
        except RecordError as e:
            if i == len(lines) - 1:
                manifest_trunc += 1  # crash mid-line with a trailing newline already present
                continue
            raise CorruptManifest(f"manifest line {i + 1}: {e}") from e
        if kind == "session":
            session_id = fields["id"]
        elif kind == "channel":
            channel_files[fields["name"]] = fields["file"]
        elif kind == "trial_index":
            tid = int(fields["trial_id"])
            if tid in trial_index:
                raise CorruptManifest(f"duplicate trial index entry for trial {tid}")
            trial_index[tid] = int(fields["offset"])
        else:
            extras.setdefault(kind, []).append(fields)
    if session_id is None:
        raise CorruptManifest("manifest has no session record")

    truncations = manifest_trunc
    trials_path = os.path.join(root, TRIALS_LOG)
    trial_records: list[TrialRecord] = []
    if trial_index:
        if not os.path.exists(trials_path):
            raise CorruptManifest("manifest indexes trials but trials.log is missing")
        with open(trials_path, "rb") as f:
            raw = f.read()
        for tid, offset in sorted(trial_index.items(), key=lambda kv: kv[1]):
            if offset >= len(raw):
                raise CorruptManifest(f"trial {tid} offset {offset} beyond trials.log")
            end = raw.find(b"\n", offset)
            if end == -1:
                raise CorruptManifest(f"indexed trial {tid} is truncated")
            try:
                kind, fields = parse_record(raw[offset:end].decode("utf-8"))
            except RecordError as e:
                raise CorruptManifest(f"trial {tid}: {e}") from e
            if kind != "trial":
                raise CorruptManifest(f"trial {tid}: unexpected record kind {kind!r}")
            rec = TrialRecord.from_fields(fields)
            if rec.spec.trial_id != tid:
                raise CorruptManifest(f"trial id mismatch at offset {offset}")
            trial_records.append(rec)
    elif os.path.exists(trials_path):
        _, t = _read_lines_tolerant(trials_path)
        truncations += t

    channels: dict[str, ChannelView] = {}
    for name, fname in channel_files.items():
        path = os.path.join(root, fname)
        if not os.path.exists(path):
            raise MissingChannelFile(f"channel {name!r}: {fname} listed but absent")
        clines, trunc = _read_lines_tolerant(path)
        samples: list[tuple[float, dict]] = []
        for i, line in enumerate(clines):
            try:
                kind, fields = parse_record(line)
            except RecordError as e:
                if i == len(clines) - 1:
                    trunc += 1
                    continue
                raise CorruptManifest(f"channel {name!r} line {i + 1}: {e}") from e
            if kind != "sample":
                raise CorruptManifest(f"channel {name!r}: unexpected record {kind!r}")
            samples.append((float(fields["t"]), fields["data"]))
        for (t0, _), (t1, _) in zip(samples, samples[1:]):
            if t1 < t0:
                raise CorruptManifest(f"channel {name!r}: timestamps regress")
        channels[name] = ChannelView(name=name, samples=samples, truncated_lines=trunc)
        truncations += trunc

    return SessionReader(
        root=root,
        session_id=session_id,
        channels=channels,
        trial_records=trial_records,
        truncations=truncations,
        extras=extras,
    )
