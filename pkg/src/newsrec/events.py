"""Clickstream ingestion: dwell-time sessionization and significant interactions.

Raw user events (clicks, shares, comments) are reduced to per-(user, item)
aggregates. Dwell time is estimated from the gap between subsequent clicks by
the same user: gaps shorter than the session cutoff are attributed to the
first item clicked, so the last click of a session never receives dwell. An
aggregate is "significant" when its dwell exceeds the threshold or it has any
share or comment; that binary signal is the implicit rating fed to the
collaborative model.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, TextIO


class EventKind(str, Enum):
    CLICK = "click"
    SHARE = "share"
    COMMENT = "comment"


class OrderingError(ValueError):
    """Events arrived out of timestamp order where ordering is required."""


@dataclass(frozen=True)
class InteractionEvent:
    """One raw user action."""

    user_id: str
    item_id: str
    kind: EventKind
    timestamp: int

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass
class UserItemAggregate:
    """Collated totals for one (user, item) pair."""

    user_id: str
    item_id: str
    dwell_seconds: float = 0.0
    shares: int = 0
    comments: int = 0

    def __post_init__(self):
        if self.dwell_seconds < 0 or self.dwell_seconds != self.dwell_seconds:
            raise ValueError("dwell_seconds must be finite and non-negative")
        if self.dwell_seconds == float("inf"):
            raise ValueError("dwell_seconds must be finite")
        if self.shares < 0 or self.comments < 0:
            raise ValueError("share/comment counts must be non-negative")


@dataclass(frozen=True)
class SignificanceRule:
    """Thresholds deciding when an aggregate counts as an implicit rating.

    Dwell must be *strictly more* than ``dwell_threshold_seconds``; click gaps
    must be *strictly less* than ``session_gap_seconds`` to count as dwell.
    """

    dwell_threshold_seconds: float = 10.0
    session_gap_seconds: float = 1800.0

    def __post_init__(self):
        if self.dwell_threshold_seconds <= 0:
            raise ValueError("dwell_threshold_seconds must be positive")
        if self.session_gap_seconds <= 0:
            raise ValueError("session_gap_seconds must be positive")


def sessionize(
    events: Iterable[InteractionEvent], rule: SignificanceRule
) -> list[tuple[str, float]]:
    """Estimate dwell times from one user's time-ordered event sequence.

    Emits ``(item_id, dwell_seconds)`` for each pair of subsequent clicks
    closer together than the session gap; the dwell goes to the first item of
    the pair. Non-click events neither receive nor interrupt dwell. The final
    click emits nothing.

    Raises :class:`OrderingError` if timestamps decrease, and ``ValueError``
    if events belong to more than one user.
    """
    out: list[tuple[str, float]] = []
    user = None
    prev_ts = None
    last_click: InteractionEvent | None = None
    for ev in events:
        if user is None:
            user = ev.user_id
        elif ev.user_id != user:
            raise ValueError(f"sessionize expects a single user, got {user!r} and {ev.user_id!r}")
        if prev_ts is not None and ev.timestamp < prev_ts:
            raise OrderingError(
                f"events out of order for user {user!r}: {ev.timestamp} after {prev_ts}"
            )
        prev_ts = ev.timestamp
        if ev.kind is not EventKind.CLICK:
            continue
        if last_click is not None:
            gap = float(ev.timestamp - last_click.timestamp)
            if gap < rule.session_gap_seconds:
                out.append((last_click.item_id, gap))
        last_click = ev
    return out


def aggregate(
    events: Iterable[InteractionEvent], rule: SignificanceRule
) -> dict[tuple[str, str], UserItemAggregate]:
    """Collate events into per-(user, item) aggregates.

    Input order is free; each user's events are stably sorted by timestamp
    before sessionization, so events with equal timestamps keep their input
    order. Dwell sums over all of a user's sessions on the same item.
    """
    by_user: dict[str, list[InteractionEvent]] = defaultdict(list)
    for ev in events:
        by_user[ev.user_id].append(ev)

    out: dict[tuple[str, str], UserItemAggregate] = {}

    def entry(user_id: str, item_id: str) -> UserItemAggregate:
        key = (user_id, item_id)
        if key not in out:
            out[key] = UserItemAggregate(user_id, item_id)
        return out[key]

    for user_id, evs in by_user.items():
        evs.sort(key=lambda e: e.timestamp)
        for ev in evs:
            agg = entry(user_id, ev.item_id)
            if ev.kind is EventKind.SHARE:
                agg.shares += 1
            elif ev.kind is EventKind.COMMENT:
                agg.comments += 1
        for item_id, dwell in sessionize(evs, rule):
            entry(user_id, item_id).dwell_seconds += dwell
    return out


def is_significant(agg: UserItemAggregate, rule: SignificanceRule) -> bool:
    """True iff the aggregate expresses implicit interest (rating 1)."""
    return (
        agg.dwell_seconds > rule.dwell_threshold_seconds
        or agg.shares > 0
        or agg.comments > 0
    )


@dataclass
class SignificanceTracker:
    """Incremental version of :func:`aggregate` for streamed events.

    Feed events in global timestamp order; :meth:`feed` returns the (user,
    item) pairs that *became* significant because of that event, each pair
    emitted exactly once over the tracker's lifetime. Per-user clicks must not
    go back in time.
    """

    rule: SignificanceRule = field(default_factory=SignificanceRule)
    aggregates: dict[tuple[str, str], UserItemAggregate] = field(default_factory=dict)
    _last_click: dict[str, tuple[str, int]] = field(default_factory=dict)
    _significant: set[tuple[str, str]] = field(default_factory=set)

    def _entry(self, user_id: str, item_id: str) -> UserItemAggregate:
        key = (user_id, item_id)
        if key not in self.aggregates:
            self.aggregates[key] = UserItemAggregate(user_id, item_id)
        return self.aggregates[key]

    def _check(self, agg: UserItemAggregate) -> list[tuple[str, str]]:
        key = (agg.user_id, agg.item_id)
        if key not in self._significant and is_significant(agg, self.rule):
            self._significant.add(key)
            return [key]
        return []

    def feed(self, ev: InteractionEvent) -> list[tuple[str, str]]:
        emitted: list[tuple[str, str]] = []
        if ev.kind is EventKind.CLICK:
            prev = self._last_click.get(ev.user_id)
            if prev is not None:
                prev_item, prev_ts = prev
                if ev.timestamp < prev_ts:
                    raise OrderingError(
                        f"click for user {ev.user_id!r} at {ev.timestamp} precedes "
                        f"earlier click at {prev_ts}"
                    )
                gap = float(ev.timestamp - prev_ts)
                if gap < self.rule.session_gap_seconds:
                    agg = self._entry(ev.user_id, prev_item)
                    agg.dwell_seconds += gap
                    emitted += self._check(agg)
            self._last_click[ev.user_id] = (ev.item_id, ev.timestamp)
            self._entry(ev.user_id, ev.item_id)
        elif ev.kind is EventKind.SHARE:
            agg = self._entry(ev.user_id, ev.item_id)
            agg.shares += 1
            emitted += self._check(agg)
        else:
            agg = self._entry(ev.user_id, ev.item_id)
            agg.comments += 1
            emitted += self._check(agg)
        return emitted

    def significant_pairs(self) -> set[tuple[str, str]]:
        return set(self._significant)


# --- event file format: user_id<TAB>item_id<TAB>kind<TAB>timestamp ---

def format_event_line(ev: InteractionEvent) -> str:
    return f"{ev.user_id}\t{ev.item_id}\t{ev.kind.value}\t{ev.timestamp}"


def parse_event_line(line: str) -> InteractionEvent:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise ValueError(f"expected 4 tab-separated fields, got {len(parts)}")
    user_id, item_id, kind_s, ts_s = parts
    try:
        kind = EventKind(kind_s)
    except ValueError:
        raise ValueError(f"unknown event kind {kind_s!r}") from None
    try:
        ts = int(ts_s)
    except ValueError:
        raise ValueError(f"bad timestamp {ts_s!r}") from None
    return InteractionEvent(user_id, item_id, kind, ts)


def read_events(source: str | Path | TextIO) -> list[InteractionEvent]:
    """Read a line-delimited event file (or open text stream)."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_events(fh)
    out = []
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            out.append(parse_event_line(line))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def write_events(events: Iterable[InteractionEvent], dest: str | Path | TextIO) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_events(events, fh)
            return
    for ev in events:
        dest.write(format_event_line(ev) + "\n")


def significant_actions(
    events: Iterable[InteractionEvent], rule: SignificanceRule
) -> Iterator[tuple[str, str]]:
    """Yield (user, item) pairs in the order they first become significant."""
    tracker = SignificanceTracker(rule)
    for ev in events:
        yield from tracker.feed(ev)
