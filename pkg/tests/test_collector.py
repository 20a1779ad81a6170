import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import byte_counts, frames_of
from elogcov.collector import (CollectorStats, SlotState, combine_stats, new_collector,
                               try_merge)
from elogcov.elog import ExecEntry
from elogcov.errors import ClosedCollector, CollectorFailed, InvalidParam, InvalidRange, SinkError
from elogcov.harness import reference_collect
from elogcov.sinks import FailingSink, MemorySink


def run(events, **cfg):
    c = new_collector(**cfg)
    for ev in events:
        c.record_tb_exec(*ev)
    stats = c.flush_on_exit()
    return stats, frames_of(c.sink.getvalue())


class TestMergeRule:
    def test_adjacent_merges(self):
        assert try_merge(ExecEntry(0, 0x1000, 0x1010), 0x1010, 0x1020) == ExecEntry(0, 0x1000, 0x1020)

    def test_gap_does_not_merge(self):
        assert try_merge(ExecEntry(0, 0x1000, 0x1010), 0x1014, 0x1020) is None

    def test_overlap_does_not_merge(self):
        assert try_merge(ExecEntry(0, 0x1000, 0x1010), 0x1008, 0x1020) is None

    def test_durations_add_and_saturate(self):
        assert try_merge(ExecEntry(5, 0, 4), 4, 8, 7).duration_ns == 12
        assert try_merge(ExecEntry(0xFFFF_FFF0, 0, 4), 4, 8, 0x100).duration_ns == 0xFFFF_FFFF

    def test_merged_stream_in_one_entry(self):
        stats, frames = run([(0x1000, 0x1010), (0x1010, 0x1020), (0x1020, 0x1030)], capacity=8)
        assert [f.entries for f in frames] == [(ExecEntry(0, 0x1000, 0x1030),)]
        assert stats.entries_merged == 2

    def test_merge_disabled(self):
        stats, frames = run([(0x1000, 0x1010), (0x1010, 0x1020)], capacity=8, merge_enabled=False)
        assert len(frames[0].entries) == 2
        assert stats.entries_merged == 0

    def test_repeated_tb_does_not_merge(self):
        stats, frames = run([(0x1000, 0x1010)] * 3, capacity=8)
        assert len(frames[0].entries) == 3

    def test_no_merge_across_buffers(self):
        # Capacity 2: third event starts where the second ends, but the buffer
        # was already handed over.
        stats, frames = run([(0, 4), (8, 12), (12, 16)], capacity=2)
        assert [[(e.start, e.end) for e in f.entries] for f in frames] == [[(0, 4), (8, 12)], [(12, 16)]]
        assert stats.entries_merged == 0


class TestBuffering:
    def test_capacity_two_example(self):
        events = [(0, 4), (8, 12), (16, 20), (24, 28), (32, 36)]
        stats, frames = run(events, n_buffers=2, capacity=2)
        assert [len(f.entries) for f in frames] == [2, 2, 1]
        assert stats.frames_written == 3
        assert stats.full_transitions == 3
        assert stats.bytes_written == 3 * 16 + 5 * 20

    def test_no_events_no_frames(self):
        stats, frames = run([])
        assert frames == []
        assert stats == CollectorStats()

    def test_unit_id_and_start_time(self):
        stats, frames = run([(0, 4), (8, 12), (16, 20)], capacity=1, unit_id=7)
        assert {f.unit_id for f in frames} == {7}
        times = [f.start_time_ns for f in frames]
        assert times == sorted(times)

    def test_transitions_follow_state_machine(self):
        log = []
        lock = threading.Lock()

        def trace(idx, old, new):
            with lock:
                log.append((idx, old, new))

        c = new_collector(n_buffers=3, capacity=2)
        c._trace = trace
        for i in range(20):
            c.record_tb_exec(16 * i, 16 * i + 4)
        c.flush_on_exit()
        allowed = {(SlotState.EMPTY, SlotState.FILLING), (SlotState.FILLING, SlotState.FULL),
                   (SlotState.FULL, SlotState.FLUSHING), (SlotState.FLUSHING, SlotState.EMPTY)}
        assert {(o, n) for _, o, n in log} <= allowed
        assert sum(1 for _, o, n in log if n is SlotState.FULL) == 10
        per_slot = {}
        for idx, old, new in log:
            assert per_slot.get(idx, SlotState.EMPTY) is old
            per_slot[idx] = new
        assert set(per_slot.values()) == {SlotState.EMPTY}
        assert c.slot_states() == [SlotState.EMPTY] * 3

    def test_file_sink_by_path(self, tmp_path):
        path = tmp_path / "out.elog"
        c = new_collector(sink=str(path), capacity=4)
        for i in range(10):
            c.record_tb_exec(16 * i, 16 * i + 4)
        c.flush_on_exit()
        assert path.stat().st_size == 124 + 2 * (16 + 80) + (16 + 40)


class TestCongestion:
    def test_single_buffer_waits_on_every_full(self):
        stats, _ = run([(16 * i, 16 * i + 4) for i in range(5120)], n_buffers=1, capacity=512)
        assert stats.full_transitions == 10
        assert stats.congestion_waits == 10

    @pytest.mark.parametrize("n", [2, 4, 16])
    def test_multi_buffer_no_wait_without_latency(self, n):
        stats, _ = run([(16 * i, 16 * i + 4) for i in range(5120)], n_buffers=n, capacity=512)
        assert stats.congestion_waits == 0


class TestTiming:
    def test_duration_zero_when_disabled(self):
        _, frames = run([(0, 4, 100)], capacity=4)
        assert frames[0].entries[0].duration_ns == 0

    def test_duration_kept_when_enabled(self):
        _, frames = run([(0, 4, 100), (4, 8, 23)], capacity=4, timing_enabled=True)
        assert frames[0].entries == (ExecEntry(123, 0, 8),)

    def test_huge_duration_saturates(self):
        _, frames = run([(0, 4, 2**40)], capacity=4, timing_enabled=True)
        assert frames[0].entries[0].duration_ns == 0xFFFF_FFFF


class TestErrors:
    @pytest.mark.parametrize("field", ["n_buffers", "capacity"])
    def test_zero_is_invalid(self, field):
        with pytest.raises(InvalidParam):
            new_collector(**{field: 0})

    def test_unit_id_range(self):
        with pytest.raises(InvalidParam):
            new_collector(unit_id=0x10000)

    @pytest.mark.parametrize("rng", [(8, 8), (8, 4)])
    def test_bad_range(self, rng):
        c = new_collector()
        with pytest.raises(InvalidRange):
            c.record_tb_exec(*rng)
        assert c.flush_on_exit().events_recorded == 0

    def test_record_after_flush(self):
        c = new_collector()
        c.flush_on_exit()
        with pytest.raises(ClosedCollector):
            c.record_tb_exec(0, 4)

    def test_flush_idempotent(self):
        c = new_collector(capacity=2)
        for i in range(3):
            c.record_tb_exec(8 * i, 8 * i + 4)
        first = c.flush_on_exit()
        assert c.flush_on_exit() == first
        assert c.closed

    def test_context_manager(self):
        with new_collector(capacity=2) as c:
            c.record_tb_exec(0, 4)
        assert c.closed and c.stats().frames_written == 1

    def test_sink_failure_reported(self):
        sink = FailingSink(MemorySink(), fail_after=2)
        c = new_collector(sink=sink, n_buffers=2, capacity=1)
        recorded = 0
        with pytest.raises(CollectorFailed):
            for i in range(1000):
                c.record_tb_exec(8 * i, 8 * i + 4)
                recorded += 1
        assert c.failed
        with pytest.raises(SinkError) as ei:
            c.flush_on_exit()
        assert isinstance(ei.value, OSError)
        assert ei.value.stats.frames_written == 2
        assert ei.value.stats.events_recorded == recorded
        # Re-raised on every call.
        with pytest.raises(SinkError):
            c.flush_on_exit()

    def test_failure_on_final_flush(self):
        sink = FailingSink(MemorySink(), fail_after=0)
        c = new_collector(sink=sink)
        c.record_tb_exec(0, 4)
        with pytest.raises(SinkError):
            c.flush_on_exit()


def test_combine_stats():
    a = CollectorStats(1, 2, 3, 4, 5, 6, 7)
    assert combine_stats(a, a) == CollectorStats(2, 4, 6, 8, 10, 12, 14)
    assert combine_stats() == CollectorStats()


# -- properties ---------------------------------------------------------------

starts = st.integers(0, 64).map(lambda k: 0x1000 + 4 * k)
events_st = st.lists(st.tuples(starts, st.integers(1, 8), st.integers(0, 1000)), max_size=120).map(
    lambda xs: [(s, s + 4 * w, d) for s, w, d in xs])


@settings(max_examples=150, deadline=None)
@given(events_st, st.integers(1, 5), st.integers(1, 9), st.booleans())
def test_matches_reference_and_conserves(events, n_buffers, capacity, merge):
    stats, frames = run(events, n_buffers=n_buffers, capacity=capacity, merge_enabled=merge, timing_enabled=True)
    ref = reference_collect([(0, s, e, d) for s, e, d in events], capacity, merge)
    assert [list(f.entries) for f in frames] == ref["frames"].get(0, [])
    written = [e for f in frames for e in f.entries]
    # Lossless: joining [a,b) and [b,c) keeps every byte's count.
    assert byte_counts((e.start, e.end) for e in written) == byte_counts((s, e) for s, e, _ in events)
    if merge:
        # Each entry must be an in-order run of consecutive events.
        expanded = []
        it = iter(events)
        for entry in written:
            covered = []
            while not covered or covered[-1][1] != entry.end:
                s, e, _ = next(it)
                covered.append((s, e))
            assert covered[0][0] == entry.start
            expanded.extend(covered)
        assert next(it, None) is None
        assert expanded == [(s, e) for s, e, _ in events]
    else:
        assert [(e.start, e.end) for e in written] == [(s, e) for s, e, _ in events]
    assert stats.entries_written + stats.entries_merged == len(events)
    assert sum(e.duration_ns for e in written) == sum(d for *_, d in events)
    assert all(0 < len(f.entries) <= capacity for f in frames)
    assert stats.full_transitions == stats.frames_written
    if n_buffers == 1:
        assert stats.congestion_waits == ref["full_transitions"]


def test_random_large_stream_order_preserved():
    rng = random.Random(7)
    events = []
    pc = 0x4000_0000
    for _ in range(20_000):
        if rng.random() < 0.3:
            pc = 0x4000_0000 + 4 * rng.randrange(1 << 20)
        size = 4 * rng.randint(1, 16)
        events.append((pc, pc + size))
        pc += size
    stats, frames = run(events, n_buffers=3, capacity=97, merge_enabled=False)
    assert [(e.start, e.end) for f in frames for e in f.entries] == events
