"""Raw log parsing, quality control, and user-level filtering.

Input rows are one log of one feature for one user on one date.  The
pipeline here is: parse -> drop unreliable continuous values -> keep users
with enough activity -> cut each user's history after their first positive
pregnancy test.  Every dropped row is accounted for in a QcReport.
"""

from __future__ import annotations

import csv
import dataclasses
import gzip
import io
import json
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Iterator, Sequence

from .codec import CONTINUOUS_FEATURES, POSITIVE_TEST_FEATURE, FeatureSchema, default_schema

MIN_LOGS_PER_USER = 300

# Plausible physical ranges; only the BBT upper bound is externally fixed,
# the rest are configurable defaults.
DEFAULT_QC_BOUNDS: dict[str, tuple[float, float]] = {
    "continuous:bbt": (90.0, 110.0),  # degF
    "continuous:weight": (30.0, 300.0),  # kg
    "continuous:resting_heart_rate": (30.0, 150.0),  # bpm
}

AGE_RANGE = (10.0, 70.0)


class IngestError(ValueError):
    """Malformed input encountered in strict mode."""


@dataclass(frozen=True)
class DailyLog:
    """One (user, date, feature, value) record; value is None for binary logs."""

    user_id: str
    date: date
    feature: str
    value: float | None = None


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    age: float | None = None
    birth_control: str | None = None


@dataclass
class QcReport:
    """Row accounting across the ingest pipeline.

    Invariant: rows_read == rows_retained + sum(dropped.values()).
    """

    rows_read: int = 0
    rows_retained: int = 0
    dropped: dict[str, int] = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def drop(self, rule: str, n: int = 1) -> None:
        self.dropped[rule] = self.dropped.get(rule, 0) + n

    @property
    def rows_dropped(self) -> int:
        return sum(self.dropped.values())

    def conserved(self) -> bool:
        return self.rows_read == self.rows_retained + self.rows_dropped

    def finalize(self, retained: int) -> None:
        self.rows_retained = retained

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _build_log(
    user_id: str, date_s: str, feature: str, value_s: str | None, schema: FeatureSchema
) -> tuple[DailyLog | None, str | None]:
    """Validate one row; returns (log, None) or (None, drop_rule)."""
    if not user_id or not date_s or not feature:
        return None, "malformed_line"
    try:
        d = date.fromisoformat(date_s)
    except ValueError:
        return None, "malformed_line"
    if feature not in schema.known_features:
        return None, "unknown_feature"
    has_value = value_s is not None and value_s != ""
    if feature in CONTINUOUS_FEATURES:
        if not has_value:
            return None, "missing_value"
        try:
            value = float(value_s)  # type: ignore[arg-type]
        except ValueError:
            return None, "malformed_line"
        return DailyLog(user_id, d, feature, value), None
    if has_value:
        return None, "value_on_binary"
    return DailyLog(user_id, d, feature, None), None


def parse_logs(
    lines: Iterable[str],
    schema: FeatureSchema | None = None,
    report: QcReport | None = None,
    strict: bool = False,
    fmt: str = "csv",
) -> Iterator[DailyLog]:
    """Parse CSV or JSONL log lines into DailyLog records, order preserved.

    CSV columns: user_id,date,feature,value (value empty for binary logs);
    a leading header row is skipped.  JSONL uses the same keys.  Bad lines
    are counted in the report and skipped, or raised with their line
    number in strict mode.
    """
    schema = schema or default_schema()
    report = report if report is not None else QcReport()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if fmt == "csv":
            row = next(csv.reader([line]))
            if lineno == 1 and row and row[0] == "user_id":
                continue
            if len(row) not in (3, 4):
                report.rows_read += 1
                if strict:
                    raise IngestError(f"line {lineno}: expected 4 fields, got {len(row)}")
                report.drop("malformed_line")
                continue
            user_id, date_s, feature = row[0], row[1], row[2]
            value_s = row[3] if len(row) == 4 else None
        elif fmt == "jsonl":
            try:
                obj = json.loads(line)
                user_id = str(obj["user_id"])
                date_s = str(obj["date"])
                feature = str(obj["feature"])
                raw = obj.get("value")
                value_s = None if raw is None else str(raw)
            except (json.JSONDecodeError, KeyError, TypeError):
                report.rows_read += 1
                if strict:
                    raise IngestError(f"line {lineno}: malformed JSON record")
                report.drop("malformed_line")
                continue
        else:
            raise ValueError(f"unknown log format: {fmt!r}")
        report.rows_read += 1
        log, rule = _build_log(user_id, date_s, feature, value_s, schema)
        if log is None:
            if strict:
                raise IngestError(f"line {lineno}: {rule}")
            report.drop(rule)  # type: ignore[arg-type]
            continue
        yield log


def open_maybe_gzip(path) -> io.TextIOBase:
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def read_log_file(
    path, schema: FeatureSchema | None = None, report: QcReport | None = None, strict: bool = False
) -> list[DailyLog]:
    """Read a .csv/.jsonl log file (optionally .gz) into memory."""
    fmt = "jsonl" if ".jsonl" in str(path) else "csv"
    with open_maybe_gzip(path) as fh:
        return list(parse_logs(fh, schema, report, strict, fmt=fmt))


def read_profile_file(path) -> dict[str, UserProfile]:
    """Read the user_id,age,birth_control CSV; empty fields mean missing.

    Ages outside the plausible range are treated as missing, not dropped.
    """
    profiles: dict[str, UserProfile] = {}
    with open_maybe_gzip(path) as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "user_id":
                continue
            user_id = row[0]
            age: float | None = None
            if len(row) > 1 and row[1] != "":
                try:
                    age = float(row[1])
                except ValueError:
                    age = None
            if age is not None and not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
                age = None
            bc = row[2] if len(row) > 2 and row[2] != "" else None
            profiles[user_id] = UserProfile(user_id, age, bc)
    return profiles


def write_log_file(path, logs: Iterable[DailyLog]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for log in logs:
            w.writerow(
                [log.user_id, log.date.isoformat(), log.feature,
                 "" if log.value is None else repr(float(log.value))]
            )


def write_profile_file(path, profiles: Iterable[UserProfile]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for p in profiles:
            w.writerow(
                [p.user_id, "" if p.age is None else repr(float(p.age)), p.birth_control or ""]
            )


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def qc_continuous(
    logs: Sequence[DailyLog],
    report: QcReport | None = None,
    bounds: dict[str, tuple[float, float]] | None = None,
) -> list[DailyLog]:
    """Drop continuous values outside physical bounds; binary logs pass through."""
    bounds = bounds if bounds is not None else DEFAULT_QC_BOUNDS
    if report is not None:
        report.thresholds["qc_bounds"] = {k: list(v) for k, v in bounds.items()}
    kept = []
    for log in logs:
        rng = bounds.get(log.feature)
        if rng is not None and log.value is not None and not rng[0] <= log.value <= rng[1]:
            if report is not None:
                report.drop("continuous_out_of_range")
            continue
        kept.append(log)
    return kept


def filter_active_users(
    logs: Sequence[DailyLog],
    report: QcReport | None = None,
    min_logs: int = MIN_LOGS_PER_USER,
) -> list[DailyLog]:
    """Keep only logs of users with at least min_logs retained logs."""
    if report is not None:
        report.thresholds["min_logs_per_user"] = min_logs
    counts: dict[str, int] = {}
    for log in logs:
        counts[log.user_id] = counts.get(log.user_id, 0) + 1
    kept = [log for log in logs if counts[log.user_id] >= min_logs]
    if report is not None and len(kept) != len(logs):
        report.drop("inactive_user", len(logs) - len(kept))
    return kept


def truncate_after_positive(
    logs: Sequence[DailyLog], report: QcReport | None = None
) -> list[DailyLog]:
    """Remove each user's logs strictly after their first positive pregnancy test.

    The test date itself is kept: the cycle containing it still needs to be
    labeled.
    """
    first_positive: dict[str, date] = {}
    for log in logs:
        if log.feature == POSITIVE_TEST_FEATURE:
            cur = first_positive.get(log.user_id)
            if cur is None or log.date < cur:
                first_positive[log.user_id] = log.date
    kept = []
    for log in logs:
        cut = first_positive.get(log.user_id)
        if cut is not None and log.date > cut:
            if report is not None:
                report.drop("after_positive_test")
            continue
        kept.append(log)
    return kept


def run_ingest(
    logs: Sequence[DailyLog],
    report: QcReport | None = None,
    bounds: dict[str, tuple[float, float]] | None = None,
    min_logs: int = MIN_LOGS_PER_USER,
    activity_before_qc: bool = False,
) -> list[DailyLog]:
    """QC, activity filter, positive-test truncation, in that order.

    activity_before_qc counts the per-user activity threshold on raw rather
    than QC'd logs.
    """
    if activity_before_qc:
        logs = filter_active_users(logs, report, min_logs)
        logs = qc_continuous(logs, report, bounds)
    else:
        logs = qc_continuous(logs, report, bounds)
        logs = filter_active_users(logs, report, min_logs)
    logs = truncate_after_positive(logs, report)
    if report is not None:
        report.finalize(len(logs))
    return list(logs)
