"""Cycle segmentation and labeled-example construction.

A cycle starts on a bleeding day preceded by at least 7 bleeding-free days.
The prediction window is the first 24 days of a cycle; the label comes from
pregnancy tests taken after day 24 and no later than day 24 of the next
cycle.  Examples carry 24 per-day feature maps plus a mask for days that
fall beyond the end of a short cycle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

from .codec import (
    BLEEDING_FEATURES,
    NEGATIVE_TEST_FEATURE,
    POSITIVE_TEST_FEATURE,
    PREGNANCY_TEST_FEATURES,
    WINDOW_DAYS,
)
from .ingest import DailyLog

MIN_CLEAN_GAP_DAYS = 7
# Labeling window for a user's final observed cycle, which has no next
# start to bound it: cap at 24 days past the prediction window.
FINAL_CYCLE_WINDOW_DAYS = 2 * WINDOW_DAYS


@dataclass(frozen=True)
class Cycle:
    user_id: str
    start_date: date
    next_start_date: date | None = None

    @property
    def length_days(self) -> int | None:
        if self.next_start_date is None:
            return None
        return (self.next_start_date - self.start_date).days


@dataclass(frozen=True)
class LabeledCycle:
    cycle: Cycle
    label: int  # 1 positive, 0 negative
    test_date: date


@dataclass
class RawExample:
    """One labeled cycle before numeric encoding.

    day_slots[d] maps feature name to value (None for binary logs) for
    cycle day d; day_mask[d] is False for days at or beyond the next cycle
    start.  continuous_means is filled in by centering.
    """

    user_id: str
    start_date: date
    label: int
    day_slots: list[dict[str, float | None]]
    day_mask: list[bool]
    test_date: date
    continuous_means: dict[str, float] = field(default_factory=dict)


def bleeding_dates(user_logs: Iterable[DailyLog]) -> list[date]:
    """Sorted distinct dates with any period-bleeding log."""
    return sorted({log.date for log in user_logs if log.feature in BLEEDING_FEATURES})


def detect_cycle_starts(user_logs: Iterable[DailyLog]) -> list[date]:
    """Bleeding days preceded by >= 7 bleeding-free days, ascending.

    Logs must belong to a single user.
    """
    days = bleeding_dates(user_logs)
    starts = []
    prev: date | None = None
    for d in days:
        if prev is None or (d - prev).days > MIN_CLEAN_GAP_DAYS:
            starts.append(d)
        prev = d
    return starts


def cycles_from_starts(user_id: str, starts: Sequence[date]) -> list[Cycle]:
    return [
        Cycle(user_id, s, starts[i + 1] if i + 1 < len(starts) else None)
        for i, s in enumerate(starts)
    ]


def cycle_day(day: date, cycle: Cycle) -> int:
    """Days elapsed since the cycle start; 0 on the start day itself."""
    delta = (day - cycle.start_date).days
    if delta < 0:
        raise ValueError(f"{day} precedes cycle start {cycle.start_date}")
    return delta


def label_window(cycle: Cycle) -> tuple[date, date]:
    """(exclusive lower, inclusive upper) bounds of the labeling window."""
    lo = cycle.start_date + timedelta(days=WINDOW_DAYS)
    if cycle.next_start_date is not None:
        hi = cycle.next_start_date + timedelta(days=WINDOW_DAYS)
    else:
        hi = cycle.start_date + timedelta(days=FINAL_CYCLE_WINDOW_DAYS)
    return lo, hi


def label_cycles(
    cycles: Sequence[Cycle], test_logs: Iterable[DailyLog]
) -> list[LabeledCycle]:
    """Assign positive/negative labels from pregnancy tests.

    Positive: any positive test in the window; negative: no positive and at
    least one negative test in it.  Cycles without a test in the window are
    skipped, as are cycles with a positive test on or before their day 24
    (the pregnancy predates the window's end, so the example is unusable).
    """
    positives = sorted(t.date for t in test_logs if t.feature == POSITIVE_TEST_FEATURE)
    negatives = sorted(t.date for t in test_logs if t.feature == NEGATIVE_TEST_FEATURE)
    out = []
    for cycle in cycles:
        lo, hi = label_window(cycle)
        cycle_end = cycle.next_start_date  # None for the final cycle
        early_positive = any(
            cycle.start_date <= t <= lo and (cycle_end is None or t < cycle_end)
            for t in positives
        )
        if early_positive:
            continue
        pos_in = [t for t in positives if lo < t <= hi]
        if pos_in:
            out.append(LabeledCycle(cycle, 1, min(pos_in)))
            continue
        neg_in = [t for t in negatives if lo < t <= hi]
        if neg_in:
            out.append(LabeledCycle(cycle, 0, min(neg_in)))
    return out


def build_examples(
    labeled: Sequence[LabeledCycle], user_logs: Iterable[DailyLog]
) -> list[RawExample]:
    """Slice each labeled cycle's first 24 days into per-day feature maps.

    Pregnancy-test logs never enter the slots.  Days at or beyond the next
    cycle start are masked rather than filled from the following cycle.
    """
    by_date: dict[date, list[DailyLog]] = {}
    for log in user_logs:
        if log.feature in PREGNANCY_TEST_FEATURES:
            continue
        by_date.setdefault(log.date, []).append(log)
    out = []
    for lc in labeled:
        cycle = lc.cycle
        length = cycle.length_days
        slots: list[dict[str, float | None]] = []
        mask: list[bool] = []
        for d in range(WINDOW_DAYS):
            if length is not None and d >= length:
                slots.append({})
                mask.append(False)
                continue
            day_logs = by_date.get(cycle.start_date + timedelta(days=d), ())
            slots.append({log.feature: log.value for log in day_logs})
            mask.append(True)
        out.append(
            RawExample(
                user_id=cycle.user_id,
                start_date=cycle.start_date,
                label=lc.label,
                day_slots=slots,
                day_mask=mask,
                test_date=lc.test_date,
            )
        )
    return out


def examples_for_user(user_logs: Sequence[DailyLog]) -> list[RawExample]:
    """detect starts -> cycles -> label -> slice, for one user's logs."""
    if not user_logs:
        return []
    user_id = user_logs[0].user_id
    starts = detect_cycle_starts(user_logs)
    cycles = cycles_from_starts(user_id, starts)
    tests = [log for log in user_logs if log.feature in PREGNANCY_TEST_FEATURES]
    labeled = label_cycles(cycles, tests)
    return build_examples(labeled, user_logs)


def group_by_user(logs: Iterable[DailyLog]) -> dict[str, list[DailyLog]]:
    grouped: dict[str, list[DailyLog]] = {}
    for log in logs:
        grouped.setdefault(log.user_id, []).append(log)
    return grouped


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def example_to_json(example: RawExample) -> str:
    return json.dumps(
        {
            "user_id": example.user_id,
            "start_date": example.start_date.isoformat(),
            "label": example.label,
            "test_date": example.test_date.isoformat(),
            "day_slots": example.day_slots,
            "day_mask": [int(m) for m in example.day_mask],
            "continuous_means": example.continuous_means,
        },
        sort_keys=True,
    )


def example_from_json(line: str) -> RawExample:
    d = json.loads(line)
    return RawExample(
        user_id=d["user_id"],
        start_date=date.fromisoformat(d["start_date"]),
        label=int(d["label"]),
        day_slots=[dict(s) for s in d["day_slots"]],
        day_mask=[bool(m) for m in d["day_mask"]],
        test_date=date.fromisoformat(d["test_date"]),
        continuous_means=d.get("continuous_means", {}),
    )


def write_examples_jsonl(path, examples: Iterable[RawExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


def read_examples_jsonl(path) -> list[RawExample]:
    with open(path, "r", encoding="utf-8") as fh:
        return [example_from_json(line) for line in fh if line.strip()]
