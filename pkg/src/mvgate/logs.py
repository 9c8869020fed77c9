"""Event ingestion: parsing, sessionization, tokenization, vocabulary."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

log = logging.getLogger(__name__)

DEFAULT_GAP_SECONDS = 4 * 3600

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<cls>", "<unk>")


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    behavior: str
    timestamp: int

    def __post_init__(self):
        if not self.behavior:
            raise ValueError("behavior must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass
class Session:
    user_id: str
    events: list
    label: Optional[int] = None

    def __post_init__(self):
        for prev, nxt in zip(self.events, self.events[1:]):
            if nxt.timestamp < prev.timestamp:
                raise ValueError("session timestamps must be non-decreasing")
        if any(e.user_id != self.user_id for e in self.events):
            raise ValueError("all events in a session must share its user_id")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def start(self) -> int:
        return self.events[0].timestamp


@dataclass
class ParseResult:
    events: list
    errors: list = field(default_factory=list)  # (line_no, message)

    @property
    def malformed(self) -> int:
        return len(self.errors)


def _record_to_event(rec: dict) -> RawEvent:
    missing = [k for k in ("user", "behavior", "ts") if k not in rec]
    if missing:
        raise ParseError(f"missing field(s) {', '.join(missing)}")
    ts = rec["ts"]
    if isinstance(ts, bool):
        raise ParseError(f"ts is not an integer: {ts!r}")
    if isinstance(ts, str):
        try:
            ts = int(ts.strip())
        except ValueError:
            raise ParseError(f"ts is not an integer: {ts!r}") from None
    elif isinstance(ts, float):
        if not ts.is_integer():
            raise ParseError(f"ts is not an integer: {ts!r}")
        ts = int(ts)
    elif not isinstance(ts, int):
        raise ParseError(f"ts is not an integer: {ts!r}")
    user, behavior = rec["user"], rec["behavior"]
    if not isinstance(user, str) or not isinstance(behavior, str):
        raise ParseError("user and behavior must be strings")
    try:
        return RawEvent(user, behavior, ts)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def parse_events(source: TextIO | Iterable[str], fmt: str = "jsonl",
                 max_malformed_fraction: float = 0.5) -> ParseResult:
    """Read events from a line-delimited stream.

    Malformed lines are skipped and reported in ``ParseResult.errors`` with
    their 1-based line number. More than half the records malformed is a
    hard failure. Output is stably sorted by (user, timestamp).
    """
    if fmt not in ("jsonl", "csv"):
        raise ConfigError(f"unknown event format {fmt!r}")
    events, errors = [], []
    total = 0
    if fmt == "jsonl":
        for line_no, line in enumerate(source, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ParseError("record is not an object")
                events.append(_record_to_event(rec))
            except (json.JSONDecodeError, ParseError) as exc:
                errors.append((line_no, str(exc)))
    else:
        text = source.read() if hasattr(source, "read") else "".join(source)
        reader = csv.DictReader(io.StringIO(text))
        header = reader.fieldnames or []
        if not {"user", "behavior", "ts"} <= set(header):
            raise ParseError(f"csv header must contain user,behavior,ts; got {header}")
        for row in reader:
            total += 1
            try:
                events.append(_record_to_event(row))
            except ParseError as exc:
                errors.append((reader.line_num, str(exc)))
    for line_no, msg in errors:
        log.warning("line %d: %s", line_no, msg)
    if total and len(errors) / total > max_malformed_fraction:
        raise ParseError(f"{len(errors)} of {total} lines malformed; refusing to continue")
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return ParseResult(events, errors)


def sessionize(events: list, gap_seconds: int = DEFAULT_GAP_SECONDS) -> list:
    """Split one user's time-ordered events wherever consecutive timestamps
    are more than ``gap_seconds`` apart."""
    if gap_seconds <= 0:
        raise ConfigError(f"gap_seconds must be positive, got {gap_seconds}")
    sessions = []
    current: list = []
    for ev in events:
        if current and ev.timestamp - current[-1].timestamp > gap_seconds:
            sessions.append(Session(current[0].user_id, current))
            current = []
        current.append(ev)
    if current:
        sessions.append(Session(current[0].user_id, current))
    return sessions


def sessionize_all(events: list, gap_seconds: int = DEFAULT_GAP_SECONDS) -> list:
    """Sessionize a multi-user event list sorted by (user, timestamp)."""
    out, start = [], 0
    for i in range(1, len(events) + 1):
        if i == len(events) or events[i].user_id != events[start].user_id:
            out.extend(sessionize(events[start:i], gap_seconds))
            start = i
    return out


@dataclass(frozen=True)
class TimeBucketRule:
    """Hour-of-day bucketing. ``[work_start, work_end)`` is work time."""
    work_start: int = 8
    work_end: int = 18
    utc_offset_hours: float = 0.0
    work_label: str = "work"
    off_label: str = "off"

    def hour(self, ts: int) -> int:
        local = ts + int(round(self.utc_offset_hours * 3600))
        return (local // 3600) % 24

    def bucket(self, ts: int) -> str:
        h = self.hour(ts)
        return self.work_label if self.work_start <= h < self.work_end else self.off_label


def tokenize(event: RawEvent, bucketing: TimeBucketRule = TimeBucketRule()) -> str:
    return f"{event.behavior}:{bucketing.bucket(event.timestamp)}"


def tokenize_session(session: Session, bucketing: TimeBucketRule = TimeBucketRule()) -> list:
    return [tokenize(e, bucketing) for e in session.events]


class TokenVocab:
    """Token string <-> dense integer id. Ids 0, 1, 2 are PAD, CLS, UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            if t in self._stoi:
                raise ValueError(f"duplicate token {t!r}")
            self._stoi[t] = len(self._itos)
            self._itos.append(t)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    @property
    def tokens(self) -> list:
        return self._itos[len(RESERVED):]

    def encode(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def encode_seq(self, tokens: Iterable[str]) -> list:
        return [self._stoi.get(t, UNK) for t in tokens]

    def decode(self, idx: int) -> str:
        return self._itos[idx]

    def to_json(self) -> dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "TokenVocab":
        return cls(obj["tokens"])

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode()).hexdigest()[:16]


def build_vocab(token_sequences: Iterable[list], min_count: int = 1) -> TokenVocab:
    """Vocabulary over training token sequences, ordered by first appearance."""
    counts: Counter = Counter()
    order: dict = {}
    n = 0
    for seq in token_sequences:
        n += 1
        for t in seq:
            counts[t] += 1
            order.setdefault(t, len(order))
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty training set")
    return TokenVocab(t for t in order if counts[t] >= min_count)


def read_sessions_jsonl(fh: TextIO) -> list:
    return [json.loads(line) for line in fh if line.strip()]


def session_record(session: Session, bucketing: TimeBucketRule = TimeBucketRule()) -> dict:
    return {
        "user": session.user_id,
        "label": session.label,
        "tokens": tokenize_session(session, bucketing),
        "ts": [e.timestamp for e in session.events],
    }


def write_sessions_jsonl(sessions: list, fh: TextIO, bucketing: TimeBucketRule = TimeBucketRule()) -> None:
    for s in sessions:
        fh.write(json.dumps(session_record(s, bucketing)) + "\n")


def event_record(ev: RawEvent) -> dict:
    return {"user": ev.user_id, "behavior": ev.behavior, "ts": ev.timestamp}
