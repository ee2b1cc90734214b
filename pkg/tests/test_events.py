import random

import pytest

from newsrec.events import (
    EventKind,
    InteractionEvent,
    OrderingError,
    SignificanceRule,
    SignificanceTracker,
    aggregate,
    is_significant,
    parse_event_line,
    read_events,
    sessionize,
    significant_actions,
    write_events,
)

RULE = SignificanceRule()


def click(user, item, ts):
    return InteractionEvent(user, item, EventKind.CLICK, ts)


def share(user, item, ts):
    return InteractionEvent(user, item, EventKind.SHARE, ts)


def comment(user, item, ts):
    return InteractionEvent(user, item, EventKind.COMMENT, ts)


class TestSessionize:
    def test_thirty_minute_rule_hand_trace(self):
        # A->B gap 60 counts; B->C gap 4940 >= 1800 drops; C is last
        events = [click("u", "A", 0), click("u", "B", 60), click("u", "C", 5000)]
        assert sessionize(events, RULE) == [("A", 60.0)]

    def test_single_click_emits_nothing(self):
        assert sessionize([click("u", "A", 0)], RULE) == []

    def test_gap_just_under_session_cutoff(self):
        events = [click("u", "A", 0), click("u", "B", 1799)]
        assert sessionize(events, RULE) == [("A", 1799.0)]

    def test_gap_exactly_at_cutoff_is_dropped(self):
        events = [click("u", "A", 0), click("u", "B", 1800)]
        assert sessionize(events, RULE) == []

    def test_non_click_does_not_break_click_pair(self):
        events = [click("u", "A", 0), share("u", "X", 30), click("u", "B", 60)]
        assert sessionize(events, RULE) == [("A", 60.0)]

    def test_non_click_never_receives_dwell(self):
        events = [share("u", "X", 0), click("u", "A", 10), click("u", "B", 20)]
        assert sessionize(events, RULE) == [("A", 10.0)]

    def test_zero_gap_contributes_zero_dwell(self):
        events = [click("u", "A", 5), click("u", "B", 5)]
        assert sessionize(events, RULE) == [("A", 0.0)]

    def test_unsorted_input_raises(self):
        events = [click("u", "A", 100), click("u", "B", 50)]
        with pytest.raises(OrderingError):
            sessionize(events, RULE)

    def test_mixed_users_raise(self):
        with pytest.raises(ValueError):
            sessionize([click("u", "A", 0), click("v", "B", 10)], RULE)

    def test_emits_at_most_clicks_minus_one(self):
        rng = random.Random(4)
        for _ in range(50):
            n = rng.randrange(1, 20)
            ts = 0
            events = []
            for _ in range(n):
                ts += rng.randrange(0, 4000)
                kind = rng.choice(list(EventKind))
                events.append(InteractionEvent("u", rng.choice("ABCDE"), kind, ts))
            clicks = sum(1 for e in events if e.kind is EventKind.CLICK)
            assert len(sessionize(events, RULE)) <= max(clicks - 1, 0)


class TestAggregate:
    def test_empty_input(self):
        assert aggregate([], RULE) == {}

    def test_single_share(self):
        out = aggregate([share("u", "a", 5)], RULE)
        agg = out[("u", "a")]
        assert (agg.shares, agg.comments, agg.dwell_seconds) == (1, 0, 0.0)

    def test_dwell_sums_across_sessions(self):
        # two sessions on item a: 30 s and 40 s of dwell
        events = [
            click("u", "a", 0),
            click("u", "b", 30),
            click("u", "a", 10000),
            click("u", "c", 10040),
        ]
        out = aggregate(events, RULE)
        assert out[("u", "a")].dwell_seconds == 70.0

    def test_share_comment_counts_are_permutation_invariant(self):
        rng = random.Random(11)
        events = []
        for _ in range(200):
            user = rng.choice("uvw")
            item = rng.choice("abc")
            kind = rng.choice([EventKind.SHARE, EventKind.COMMENT])
            events.append(InteractionEvent(user, item, kind, rng.randrange(1000)))
        base = aggregate(events, RULE)
        for _ in range(5):
            rng.shuffle(events)
            other = aggregate(events, RULE)
            for key, agg in base.items():
                assert other[key].shares == agg.shares
                assert other[key].comments == agg.comments

    def test_other_users_events_do_not_interfere(self):
        mine = [click("u", "a", 0), click("u", "b", 25)]
        noise = [click("v", "x", t) for t in range(0, 30, 3)]
        merged = sorted(mine + noise, key=lambda e: e.timestamp)
        out = aggregate(merged, RULE)
        assert out[("u", "a")].dwell_seconds == 25.0


class TestIsSignificant:
    def test_dwell_exactly_ten_is_not_significant(self):
        agg = aggregate([click("u", "a", 0), click("u", "b", 10)], RULE)[("u", "a")]
        assert agg.dwell_seconds == 10.0
        assert not is_significant(agg, RULE)

    def test_any_share_is_significant(self):
        out = aggregate([share("u", "a", 0)], RULE)
        assert is_significant(out[("u", "a")], RULE)

    def test_all_zero_is_not_significant(self):
        from newsrec.events import UserItemAggregate

        assert not is_significant(UserItemAggregate("u", "a"), RULE)

    def test_monotone_in_every_field(self):
        from newsrec.events import UserItemAggregate

        rng = random.Random(7)
        for _ in range(200):
            agg = UserItemAggregate(
                "u",
                "a",
                dwell_seconds=rng.uniform(0, 30),
                shares=rng.randrange(3),
                comments=rng.randrange(3),
            )
            if not is_significant(agg, RULE):
                continue
            for bump in (
                UserItemAggregate("u", "a", agg.dwell_seconds + 5, agg.shares, agg.comments),
                UserItemAggregate("u", "a", agg.dwell_seconds, agg.shares + 1, agg.comments),
                UserItemAggregate("u", "a", agg.dwell_seconds, agg.shares, agg.comments + 1),
            ):
                assert is_significant(bump, RULE)


class TestTracker:
    def test_matches_batch_aggregate_on_random_streams(self):
        rng = random.Random(23)
        for trial in range(20):
            events = []
            ts = 0
            for _ in range(rng.randrange(1, 120)):
                ts += rng.randrange(0, 2500)
                events.append(
                    InteractionEvent(
                        rng.choice("uvwx"),
                        rng.choice("abcdef"),
                        rng.choice(list(EventKind)),
                        ts,
                    )
                )
            tracker = SignificanceTracker(RULE)
            for ev in events:
                tracker.feed(ev)
            batch = aggregate(events, RULE)
            assert set(tracker.aggregates) == set(batch)
            for key, agg in batch.items():
                got = tracker.aggregates[key]
                assert got.dwell_seconds == pytest.approx(agg.dwell_seconds)
                assert (got.shares, got.comments) == (agg.shares, agg.comments)
            expected_sig = {k for k, a in batch.items() if is_significant(a, RULE)}
            assert tracker.significant_pairs() == expected_sig

    def test_each_pair_emitted_once(self):
        events = [
            share("u", "a", 0),
            share("u", "a", 1),
            click("u", "a", 2),
            click("u", "b", 30),
            click("u", "c", 80),
        ]
        emitted = list(significant_actions(events, RULE))
        assert emitted == [("u", "a"), ("u", "b")]

    def test_click_time_regression_raises(self):
        tracker = SignificanceTracker(RULE)
        tracker.feed(click("u", "a", 100))
        with pytest.raises(OrderingError):
            tracker.feed(click("u", "b", 50))


class TestEventIO:
    def test_round_trip(self, tmp_path):
        events = [click("u1", "a1", 5), share("u2", "a2", 6), comment("u1", "a3", 9)]
        path = tmp_path / "events.tsv"
        write_events(events, path)
        assert read_events(path) == events

    def test_tab_format(self):
        ev = parse_event_line("u1\ta9\tclick\t120")
        assert ev == click("u1", "a9", 120)

    def test_bad_kind_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "events.tsv"
        path.write_text("u\ta\tclick\t1\nu\ta\tpurchase\t2\n")
        with pytest.raises(ValueError, match="line 2"):
            read_events(path)

    def test_bad_field_count(self):
        with pytest.raises(ValueError, match="4 tab-separated"):
            parse_event_line("u\ta\tclick")

    def test_event_validation(self):
        with pytest.raises(ValueError):
            InteractionEvent("", "a", EventKind.CLICK, 0)
        with pytest.raises(ValueError):
            InteractionEvent("u", "a", EventKind.CLICK, -5)
