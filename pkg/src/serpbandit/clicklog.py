"""Click-log parsing, session assembly, dwell times and relevance labels.

Log grammar (UTF-8, LF line endings, tab-separated, one record per line):

    SessionID <TAB> M <TAB> Day <TAB> UserID
    SessionID <TAB> TimePassed <TAB> Q <TAB> SERPID <TAB> QueryID <TAB> t1,t2,... <TAB> url1,dom1 <TAB> ... <TAB> url10,dom10
    SessionID <TAB> TimePassed <TAB> C <TAB> SERPID <TAB> URLID

All ids are non-negative decimal integers. A query record carries exactly
ten (url, domain) results with distinct urls. Records of one session are
contiguous in the file and start with the metadata line; time_passed never
decreases within a session.

Relevance grades derive from dwell time, the gap between a click and the
next action (click or query) anywhere in the same session:

    grade 0    dwell < 50
    grade 1    50 <= dwell <= 399
    grade 2    dwell >= 400, or the click is the session's last action

The dwell of a session-final click is the ``None`` end-of-session marker,
never a number, so the final-action grade rule stays explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

from serpbandit.errors import SerpBanditError

RESULTS_PER_SERP = 10

# Dwell thresholds (time units) between the three relevance grades.
DWELL_RELEVANT_MIN = 50
DWELL_HIGHLY_RELEVANT_MIN = 400


class MalformedLine(SerpBanditError):
    """A log line does not match the grammar."""

    def __init__(self, reason: str, line_no: int = 0, line: str = ""):
        msg = f"line {line_no}: {reason}" if line_no else reason
        super().__init__(msg)
        self.line_no = line_no
        self.reason = reason
        self.line = line


class OrphanClick(SerpBanditError):
    """A click has no matching SERP (or names a url the SERP never showed)."""


class DanglingSession(SerpBanditError):
    """Session records appeared without a leading metadata line."""


class NegativeDwell(SerpBanditError):
    """Event ordering is violated: an action precedes the click it follows."""


@dataclass(frozen=True)
class SessionMeta:
    session_id: int
    day: int
    user_id: int


@dataclass(frozen=True)
class QueryAction:
    session_id: int
    time_passed: int
    serp_id: int
    query_id: int
    terms: tuple[int, ...]
    results: tuple[tuple[int, int], ...]  # ten (url_id, domain_id) pairs


@dataclass(frozen=True)
class ClickAction:
    session_id: int
    time_passed: int
    serp_id: int
    url_id: int


LogRecord = Union[SessionMeta, QueryAction, ClickAction]


def _uint(text: str, what: str, line_no: int, line: str) -> int:
    # canonical non-negative decimal only; rejects signs, spaces, unicode digits
    if not (text and text.isascii() and text.isdigit()):
        raise MalformedLine(f"{what} is not a non-negative decimal integer: {text!r}", line_no, line)
    return int(text)


def parse_log_line(line: str, line_no: int = 0) -> LogRecord:
    """Parse one tab-separated log line into its typed record."""
    fields = line.split("\t")
    n = len(fields)
    if n == 4 and fields[1] == "M":
        return SessionMeta(
            session_id=_uint(fields[0], "session id", line_no, line),
            day=_uint(fields[2], "day", line_no, line),
            user_id=_uint(fields[3], "user id", line_no, line),
        )
    if n == 5 and fields[2] == "C":
        return ClickAction(
            session_id=_uint(fields[0], "session id", line_no, line),
            time_passed=_uint(fields[1], "time passed", line_no, line),
            serp_id=_uint(fields[3], "serp id", line_no, line),
            url_id=_uint(fields[4], "url id", line_no, line),
        )
    if n == 6 + RESULTS_PER_SERP and fields[2] == "Q":
        terms = tuple(
            _uint(t, "term id", line_no, line) for t in fields[5].split(",")
        )
        results = []
        for pair in fields[6:]:
            parts = pair.split(",")
            if len(parts) != 2:
                raise MalformedLine(f"result must be 'url,domain', got {pair!r}", line_no, line)
            results.append(
                (
                    _uint(parts[0], "url id", line_no, line),
                    _uint(parts[1], "domain id", line_no, line),
                )
            )
        if len({u for u, _ in results}) != RESULTS_PER_SERP:
            raise MalformedLine("duplicate url in result list", line_no, line)
        return QueryAction(
            session_id=_uint(fields[0], "session id", line_no, line),
            time_passed=_uint(fields[1], "time passed", line_no, line),
            serp_id=_uint(fields[3], "serp id", line_no, line),
            query_id=_uint(fields[4], "query id", line_no, line),
            terms=terms,
            results=tuple(results),
        )
    raise MalformedLine(f"unrecognized record shape ({n} fields)", line_no, line)


def serialize_record(record: LogRecord) -> str:
    """Inverse of :func:`parse_log_line`; round-trips bit-exact."""
    if isinstance(record, SessionMeta):
        return f"{record.session_id}\tM\t{record.day}\t{record.user_id}"
    if isinstance(record, ClickAction):
        return (
            f"{record.session_id}\t{record.time_passed}\tC\t"
            f"{record.serp_id}\t{record.url_id}"
        )
    if isinstance(record, QueryAction):
        terms = ",".join(str(t) for t in record.terms)
        results = "\t".join(f"{u},{d}" for u, d in record.results)
        return (
            f"{record.session_id}\t{record.time_passed}\tQ\t{record.serp_id}\t"
            f"{record.query_id}\t{terms}\t{results}"
        )
    raise TypeError(f"not a log record: {record!r}")


@dataclass
class ParseStats:
    lines: int = 0
    records: int = 0
    malformed: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    _MAX_KEPT = 20

    def note_error(self, line_no: int, reason: str) -> None:
        self.malformed += 1
        if len(self.errors) < self._MAX_KEPT:
            self.errors.append((line_no, reason))

    def summary(self) -> str:
        return f"{self.lines} lines, {self.records} records, {self.malformed} malformed"


def parse_records(
    lines: Iterable[str],
    strict: bool = False,
    stats: Optional[ParseStats] = None,
) -> Iterator[LogRecord]:
    """Parse a stream of raw lines.

    Malformed lines are skipped and counted in ``stats`` unless ``strict``,
    in which case the first one raises :class:`MalformedLine`.
    """
    for line_no, raw in enumerate(lines, start=1):
        line = raw[:-1] if raw.endswith("\n") else raw
        if stats is not None:
            stats.lines += 1
        try:
            record = parse_log_line(line, line_no)
        except MalformedLine as exc:
            if strict:
                raise
            if stats is not None:
                stats.note_error(line_no, exc.reason)
            continue
        if stats is not None:
            stats.records += 1
        yield record


def iter_records(
    path: str, strict: bool = False, stats: Optional[ParseStats] = None
) -> Iterator[LogRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        yield from parse_records(fh, strict=strict, stats=stats)


# ---------------------------------------------------------------------------
# Sessions and labeling
# ---------------------------------------------------------------------------

END_OF_SESSION = None  # dwell marker for a session-final click


@dataclass
class Click:
    url_id: int
    time_passed: int
    dwell: Optional[int] = None  # None == end-of-session
    grade: int = 0


@dataclass
class LabeledSerp:
    serp_id: int
    query_id: int
    time_passed: int
    terms: tuple[int, ...]
    results: tuple[tuple[int, int], ...]
    clicks: list[Click] = field(default_factory=list)

    def url_ids(self) -> tuple[int, ...]:
        return tuple(u for u, _ in self.results)

    def clicked_urls(self) -> set[int]:
        return {c.url_id for c in self.clicks}

    def grade_of(self, url_id: int) -> int:
        """Grade of a shown url: max over its click events, 0 if unclicked."""
        grades = [c.grade for c in self.clicks if c.url_id == url_id]
        return max(grades) if grades else 0

    def grades_by_rank(self) -> list[int]:
        by_url: dict[int, int] = {}
        for c in self.clicks:
            by_url[c.url_id] = max(by_url.get(c.url_id, 0), c.grade)
        return [by_url.get(u, 0) for u, _ in self.results]


@dataclass
class Session:
    session_id: int
    day: int
    user_id: int
    serps: list[LabeledSerp] = field(default_factory=list)


def compute_dwell(
    click: ClickAction, next_action: Optional[LogRecord]
) -> Optional[int]:
    """Dwell of a click: time to the session's next click/query, or None at session end."""
    if next_action is None:
        return END_OF_SESSION
    dwell = next_action.time_passed - click.time_passed
    if dwell < 0:
        raise NegativeDwell(
            f"session {click.session_id}: action at t={next_action.time_passed} "
            f"precedes click at t={click.time_passed}"
        )
    return dwell


def grade_for_dwell(dwell: Optional[int]) -> int:
    if dwell is END_OF_SESSION:
        return 2
    if dwell >= DWELL_HIGHLY_RELEVANT_MIN:
        return 2
    if dwell >= DWELL_RELEVANT_MIN:
        return 1
    return 0


def label_relevance(serp: LabeledSerp) -> LabeledSerp:
    """Assign grades to a serp whose clicks already carry dwells."""
    for click in serp.clicks:
        click.grade = grade_for_dwell(click.dwell)
    return serp


def assemble_sessions(records: Iterable[LogRecord]) -> Iterator[Session]:
    """Group a session-contiguous record stream into labeled sessions.

    Clicks attach to the query with the same (session_id, serp_id); dwells
    and grades are computed when a session completes.
    """
    session: Optional[Session] = None
    serp_by_id: dict[int, LabeledSerp] = {}
    # (action record, Click object for click actions) in stream order
    events: list[tuple[LogRecord, Optional[Click]]] = []

    def finalize() -> Session:
        assert session is not None
        for i, (record, click) in enumerate(events):
            if click is None:
                continue
            next_action = events[i + 1][0] if i + 1 < len(events) else None
            assert isinstance(record, ClickAction)
            click.dwell = compute_dwell(record, next_action)
        for serp in session.serps:
            label_relevance(serp)
        return session

    for record in records:
        if isinstance(record, SessionMeta):
            if session is not None:
                yield finalize()
            session = Session(record.session_id, record.day, record.user_id)
            serp_by_id = {}
            events = []
            continue
        if session is None or record.session_id != session.session_id:
            raise DanglingSession(
                f"record for session {record.session_id} has no metadata line"
            )
        if isinstance(record, QueryAction):
            serp = LabeledSerp(
                serp_id=record.serp_id,
                query_id=record.query_id,
                time_passed=record.time_passed,
                terms=record.terms,
                results=record.results,
            )
            session.serps.append(serp)
            serp_by_id[record.serp_id] = serp
            events.append((record, None))
        elif isinstance(record, ClickAction):
            serp = serp_by_id.get(record.serp_id)
            if serp is None:
                raise OrphanClick(
                    f"session {record.session_id}: click on serp {record.serp_id} "
                    "with no matching query"
                )
            if record.url_id not in serp.url_ids():
                raise OrphanClick(
                    f"session {record.session_id}: click on url {record.url_id} "
                    f"never shown on serp {record.serp_id}"
                )
            click = Click(url_id=record.url_id, time_passed=record.time_passed)
            serp.clicks.append(click)
            events.append((record, click))
    if session is not None:
        yield finalize()


def load_sessions(
    path: str, strict: bool = False
) -> tuple[list[Session], ParseStats]:
    stats = ParseStats()
    sessions = list(assemble_sessions(iter_records(path, strict=strict, stats=stats)))
    return sessions, stats
