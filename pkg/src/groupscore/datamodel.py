"""Domain types for account/individual activity logs, their file formats and validation."""

from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

SEQ_LEN = 9
WINDOW_LEN = 4
N_ACTIVITIES = 9

# 1970-01-04 was a Sunday; absolute week numbers are counted from it.
_SUNDAY_ZERO = datetime(1970, 1, 4, tzinfo=timezone.utc)

EVENTS_FILE = "events.csv"
LABELS_FILE = "labels.csv"
INDIVIDUALS_FILE = "individuals.csv"
ACCOUNTS_FILE = "accounts.csv"

EVENT_FIELDS = ("account_id", "individual_id", "timestamp", "activity")
LABEL_FIELDS = ("account_id", "converted", "conversion_time")
INDIVIDUAL_FIELDS = ("individual_id", "source_of_arrival", "opt_out_email", "opt_out_phone")
ACCOUNT_FIELDS = ("account_id", "revenue", "num_employees")


class DataFormatError(ValueError):
    """Raised for malformed input files; carries the file and line number."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class ActivityType(enum.IntEnum):
    open_email = 0
    click_email = 1
    send_email = 2
    unsubscribe_email = 3
    open_sales_email = 4
    click_sales_email = 5
    send_sales_email = 6
    forwarded_email_received = 7
    forwarded_email_sent = 8

    @classmethod
    def parse(cls, name: str) -> "ActivityType":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown activity {name!r}") from None


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def absolute_week(ts: datetime) -> int:
    """Sunday-start calendar week number of a UTC instant."""
    return (ts - _SUNDAY_ZERO).days // 7


def week_start(absolute: int) -> datetime:
    return _SUNDAY_ZERO + timedelta(weeks=absolute)


@dataclass(frozen=True, slots=True)
class ActivityEvent:
    account_id: str
    individual_id: str
    timestamp: datetime
    activity: ActivityType


@dataclass(frozen=True, slots=True)
class IndividualStatic:
    individual_id: str
    source_of_arrival: str
    opt_out_email: bool = False
    opt_out_phone: bool = False


@dataclass(frozen=True, slots=True)
class AccountStatic:
    account_id: str
    revenue: float
    num_employees: int


@dataclass(frozen=True, slots=True)
class ConversionLabel:
    """Account outcome. The file stores the conversion instant; weeks are derived
    against the dataset epoch at ingestion time."""

    account_id: str
    converted: bool
    conversion_time: datetime | None = None

    def __post_init__(self):
        if self.converted != (self.conversion_time is not None):
            raise ValueError(f"account {self.account_id}: conversion_time must be set iff converted")


@dataclass(frozen=True, eq=False)
class WeekSequence:
    """Activities of one individual in one calendar week.

    ``codes``/``deltas`` hold the last ``SEQ_LEN`` activities (padding beyond
    ``valid_len``); ``counts`` is the untruncated per-type frequency vector.
    """

    week_index: int
    codes: np.ndarray
    valid_len: int
    deltas: np.ndarray
    counts: np.ndarray

    @classmethod
    def inactive(cls, week_index: int, seq_len: int = SEQ_LEN) -> "WeekSequence":
        return cls(
            week_index,
            np.zeros(seq_len, dtype=np.int64),
            0,
            np.zeros(seq_len),
            np.zeros(N_ACTIVITIES, dtype=np.int64),
        )

    def __eq__(self, other):
        if not isinstance(other, WeekSequence):
            return NotImplemented
        n = self.valid_len
        return (
            self.week_index == other.week_index
            and n == other.valid_len
            and np.array_equal(self.codes[:n], other.codes[:n])
            and np.array_equal(self.deltas[:n], other.deltas[:n])
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class IndividualWindow:
    individual_id: str
    weeks: tuple[WeekSequence, ...]
    static: IndividualStatic


@dataclass(frozen=True)
class WindowSample:
    account_id: str
    target_week: int
    individuals: tuple[IndividualWindow, ...]
    account_static: AccountStatic
    label: bool


@dataclass(frozen=True)
class ScoreRecord:
    account_id: str
    target_week: int
    account_probability: float
    individual_scores: dict[str, float]


@dataclass
class Dataset:
    events: list[ActivityEvent]
    labels: list[ConversionLabel]
    individuals: list[IndividualStatic]
    accounts: list[AccountStatic]

    def epoch_week(self) -> int:
        """Absolute week containing the earliest event (week index 0)."""
        if not self.events:
            raise ValueError("empty dataset has no epoch")
        return absolute_week(min(e.timestamp for e in self.events))

    def events_by_account(self) -> dict[str, list[ActivityEvent]]:
        out: dict[str, list[ActivityEvent]] = defaultdict(list)
        for e in self.events:
            out[e.account_id].append(e)
        return dict(out)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.events == other.events
            and self.labels == other.labels
            and self.individuals == other.individuals
            and self.accounts == other.accounts
        )


# ---------------------------------------------------------------- file formats


def _bool(text: str) -> bool:
    if text in ("1", "true", "True"):
        return True
    if text in ("0", "false", "False"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read_rows(path: Path, fields: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != fields:
            raise DataFormatError(path, 1, f"expected header {','.join(fields)}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(fields):
                raise DataFormatError(path, line, f"expected {len(fields)} fields, got {len(row)}")
            yield line, row


def _parse_file(path: Path, fields, parse_row):
    out = []
    for line, row in _read_rows(path, fields):
        try:
            out.append(parse_row(row))
        except ValueError as exc:
            raise DataFormatError(path, line, str(exc)) from None
    return out


def read_events(path) -> list[ActivityEvent]:
    return _parse_file(
        Path(path),
        EVENT_FIELDS,
        lambda r: ActivityEvent(r[0], r[1], parse_timestamp(r[2]), ActivityType.parse(r[3])),
    )


def read_labels(path) -> list[ConversionLabel]:
    def parse(r):
        converted = _bool(r[1])
        return ConversionLabel(r[0], converted, parse_timestamp(r[2]) if r[2] else None)

    return _parse_file(Path(path), LABEL_FIELDS, parse)


def read_individuals(path) -> list[IndividualStatic]:
    return _parse_file(
        Path(path),
        INDIVIDUAL_FIELDS,
        lambda r: IndividualStatic(r[0], r[1], _bool(r[2]), _bool(r[3])),
    )


def read_accounts(path) -> list[AccountStatic]:
    def parse(r):
        revenue, employees = float(r[1]), int(r[2])
        if revenue < 0 or employees < 0:
            raise ValueError("revenue and num_employees must be nonnegative")
        return AccountStatic(r[0], revenue, employees)

    return _parse_file(Path(path), ACCOUNT_FIELDS, parse)


def _write(path: Path, fields, rows: Iterable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        writer.writerows(rows)


def write_dataset(ds: Dataset, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": d / EVENTS_FILE,
        "labels": d / LABELS_FILE,
        "individuals": d / INDIVIDUALS_FILE,
        "accounts": d / ACCOUNTS_FILE,
    }
    _write(
        paths["events"],
        EVENT_FIELDS,
        ((e.account_id, e.individual_id, format_timestamp(e.timestamp), e.activity.name) for e in ds.events),
    )
    _write(
        paths["labels"],
        LABEL_FIELDS,
        (
            (lb.account_id, int(lb.converted), format_timestamp(lb.conversion_time) if lb.converted else "")
            for lb in ds.labels
        ),
    )
    _write(
        paths["individuals"],
        INDIVIDUAL_FIELDS,
        ((s.individual_id, s.source_of_arrival, int(s.opt_out_email), int(s.opt_out_phone)) for s in ds.individuals),
    )
    _write(
        paths["accounts"],
        ACCOUNT_FIELDS,
        ((a.account_id, repr(float(a.revenue)), a.num_employees) for a in ds.accounts),
    )
    return paths


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in (EVENTS_FILE, LABELS_FILE, INDIVIDUALS_FILE, ACCOUNTS_FILE):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name}: missing dataset file")
    return Dataset(
        read_events(d / EVENTS_FILE),
        read_labels(d / LABELS_FILE),
        read_individuals(d / INDIVIDUALS_FILE),
        read_accounts(d / ACCOUNTS_FILE),
    )


# ------------------------------------------------------------------ validation


@dataclass
class ValidationIssue:
    kind: str
    subject: str
    detail: str
    fatal: bool


@dataclass
class ValidationReport:
    n_accounts: int = 0
    n_individuals: int = 0
    n_events: int = 0
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def fatal(self) -> bool:
        return any(i.fatal for i in self.issues)

    def of_kind(self, kind: str) -> list[ValidationIssue]:
        return [i for i in self.issues if i.kind == kind]

    def summary(self) -> str:
        lines = [f"{self.n_accounts} accounts, {self.n_individuals} individuals, {self.n_events} events"]
        lines += [f"{'FATAL' if i.fatal else 'warn'} {i.kind} {i.subject}: {i.detail}" for i in self.issues]
        return "\n".join(lines)


def validate_dataset(
    events: list[ActivityEvent],
    labels: list[ConversionLabel],
    individuals: list[IndividualStatic] = (),
    accounts: list[AccountStatic] = (),
    span: tuple[datetime, datetime] | None = None,
) -> ValidationReport:
    """Check a raw dataset for integrity problems.

    Never raises; callers inspect ``report.fatal``. ``span`` bounds the valid
    event/conversion instants and defaults to the span of the events.
    """
    report = ValidationReport(n_events=len(events))
    owner: dict[str, set[str]] = defaultdict(set)
    seen: set[tuple] = set()
    dup_count: dict[str, int] = defaultdict(int)
    for e in events:
        owner[e.individual_id].add(e.account_id)
        key = (e.individual_id, e.timestamp, e.activity)
        if key in seen:
            dup_count[e.individual_id] += 1
        seen.add(key)
    account_ids = {e.account_id for e in events}
    report.n_accounts = len(account_ids)
    report.n_individuals = len(owner)

    for ind, accs in sorted(owner.items()):
        if len(accs) > 1:
            report.issues.append(
                ValidationIssue("multi_account_individual", ind, f"mapped to accounts {sorted(accs)}", True)
            )
    for ind, n in sorted(dup_count.items()):
        report.issues.append(ValidationIssue("duplicate_event", ind, f"{n} duplicate rows", False))

    if span is None and events:
        span = (min(e.timestamp for e in events), max(e.timestamp for e in events))
    if span is not None:
        lo, hi = span
        outside = [e for e in events if not lo <= e.timestamp <= hi]
        for e in outside:
            report.issues.append(
                ValidationIssue("event_outside_span", e.individual_id, format_timestamp(e.timestamp), True)
            )

    label_ids = set()
    for lb in labels:
        if lb.account_id in label_ids:
            report.issues.append(ValidationIssue("duplicate_label", lb.account_id, "", True))
        label_ids.add(lb.account_id)
        if lb.account_id not in account_ids:
            report.issues.append(ValidationIssue("label_without_events", lb.account_id, "", False))
        if lb.converted and span is not None:
            lo, hi = span
            if not absolute_week(lo) <= absolute_week(lb.conversion_time) <= absolute_week(hi) + 1:
                report.issues.append(
                    ValidationIssue(
                        "conversion_outside_span", lb.account_id, format_timestamp(lb.conversion_time), True
                    )
                )

    static_ids = {s.individual_id for s in individuals}
    if individuals:
        for ind in sorted(set(owner) - static_ids):
            report.issues.append(ValidationIssue("missing_individual_static", ind, "", True))
    acc_static_ids = {a.account_id for a in accounts}
    if accounts:
        for acc in sorted(account_ids - acc_static_ids):
            report.issues.append(ValidationIssue("missing_account_static", acc, "", True))
    return report
