"""Multi-buffer trace collector with an asynchronous writer thread.

The collector owns a ring of fixed-capacity buffers. The producer (the
thread reporting TB executions) fills one buffer at a time; when it is full
it is handed to the writer thread, which encodes it as one exec frame and
passes it to the sink. Each buffer moves through

    EMPTY -> FILLING -> FULL -> FLUSHING -> EMPTY

where the first two transitions belong to the producer and the last two to
the writer. The producer blocks only when the next buffer in the ring is not
EMPTY yet; every such block is counted as a congestion wait.

Consecutive executions are merged into one entry when the new range starts
exactly where the last entry in the current buffer ends. Merging never
crosses a buffer boundary.
"""

from __future__ import annotations

import enum
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .elog import ExecEntry, encode_frame_flat
from .errors import ClosedCollector, CollectorFailed, InvalidParam, InvalidRange, SinkError
from .sinks import FileSink, MemorySink

U32_MAX = 0xFFFFFFFF

DEFAULT_BUFFERS = 4
DEFAULT_CAPACITY = 8192


class SlotState(enum.Enum):
    EMPTY = "empty"
    FILLING = "filling"
    FULL = "full"
    FLUSHING = "flushing"


EMPTY, FILLING, FULL, FLUSHING = SlotState.EMPTY, SlotState.FILLING, SlotState.FULL, SlotState.FLUSHING


class BufferSlot:
    """One ring buffer. Entries are kept flat as ``[dur, start, end, ...]``."""

    __slots__ = ("state", "flat", "start_time_ns")

    def __init__(self):
        self.state = EMPTY
        self.flat: list[int] = []
        self.start_time_ns = 0

    def __len__(self):
        return len(self.flat) // 3

    def entries(self) -> list[ExecEntry]:
        it = iter(self.flat)
        return [ExecEntry(*e) for e in zip(it, it, it)]


@dataclass
class CollectorConfig:
    n_buffers: int = DEFAULT_BUFFERS
    capacity: int = DEFAULT_CAPACITY
    merge_enabled: bool = True
    timing_enabled: bool = False
    unit_id: int = 0
    # Object with write(bytes)/close(), or a path to create a FileSink at.
    # None captures into a MemorySink.
    sink: Any = None
    # Whether flush_on_exit closes the sink; off when the sink is shared.
    close_sink: bool = True

    def validate(self):
        if self.n_buffers < 1:
            raise InvalidParam(f"n_buffers must be >= 1, got {self.n_buffers}")
        if self.capacity < 1:
            raise InvalidParam(f"capacity must be >= 1, got {self.capacity}")
        if not 0 <= self.unit_id <= 0xFFFF:
            raise InvalidParam(f"unit_id must fit in 16 bits, got {self.unit_id}")


@dataclass(frozen=True)
class CollectorStats:
    events_recorded: int = 0
    entries_merged: int = 0
    frames_written: int = 0
    entries_written: int = 0
    congestion_waits: int = 0
    full_transitions: int = 0
    bytes_written: int = 0


def combine_stats(*stats: CollectorStats) -> CollectorStats:
    """Field-wise sum, e.g. over the per-vCPU collectors of one run."""
    fields = [vars(s).values() for s in stats]
    return CollectorStats(*map(sum, zip(*fields))) if stats else CollectorStats()


def try_merge(last: ExecEntry, start: int, end: int, duration_ns: int = 0) -> Optional[ExecEntry]:
    """Extend ``last`` by the execution ``[start, end)`` if it begins where ``last`` ends."""
    if last.end != start:
        return None
    return ExecEntry(min(last.duration_ns + duration_ns, U32_MAX), last.start, end)


class Collector:
    def __init__(self, cfg: CollectorConfig, trace: Callable[[int, SlotState, SlotState], None] | None = None):
        cfg.validate()
        self.cfg = cfg
        if cfg.sink is None:
            self.sink = MemorySink()
        elif isinstance(cfg.sink, (str, os.PathLike)):
            self.sink = FileSink(cfg.sink)
        else:
            self.sink = cfg.sink
        self._trace = trace
        self._n = cfg.n_buffers
        self._cap3 = 3 * cfg.capacity
        self._merge = cfg.merge_enabled
        self._timing = cfg.timing_enabled
        self._slots = [BufferSlot() for _ in range(self._n)]
        self._cv = threading.Condition()
        self._fill = 0
        self._flush = 0
        self._writer_idle = False
        self._eos = False
        self._closed = False
        self._error: BaseException | None = None
        self._final: CollectorStats | None = None

        self._events = 0
        self._merged = 0
        self._congestion = 0
        self._full = 0
        self._frames = 0
        self._entries = 0
        self._bytes = 0

        self._t0 = time.monotonic_ns()
        self._writer = threading.Thread(target=self._writer_loop, name=f"elog-writer-{cfg.unit_id}", daemon=True)
        self._writer.start()

    # -- producer side ----------------------------------------------------

    def record_tb_exec(self, start: int, end: int, duration_ns: int = 0):
        if self._closed:
            raise ClosedCollector("collector already flushed")
        if self._error is not None:
            raise CollectorFailed(f"writer failed: {self._error}")
        if start >= end:
            raise InvalidRange(f"empty or inverted range [{start:#x}, {end:#x})")
        if not self._timing:
            duration_ns = 0
        elif duration_ns > U32_MAX:
            duration_ns = U32_MAX
        slot = self._slots[self._fill]
        flat = slot.flat
        if flat:
            if self._merge and flat[-1] == start:
                flat[-1] = end
                if duration_ns:
                    flat[-3] = min(flat[-3] + duration_ns, U32_MAX)
                self._merged += 1
                self._events += 1
                return
        else:
            slot.start_time_ns = time.monotonic_ns() - self._t0
            with self._cv:
                self._set_state(self._fill, slot, FILLING)
        flat += (duration_ns, start, end)
        self._events += 1
        if len(flat) >= self._cap3:
            self._rotate()

    def _set_state(self, idx: int, slot: BufferSlot, new: SlotState):
        if self._trace is not None:
            self._trace(idx, slot.state, new)
        slot.state = new

    def _rotate(self):
        with self._cv:
            handed = self._fill
            self._set_state(handed, self._slots[handed], FULL)
            self._full += 1
            self._cv.notify_all()
            self._fill = (handed + 1) % self._n
            nxt = self._slots[self._fill]
            if nxt.state is not EMPTY:
                # All buffers occupied: wait for the writer.
                self._congestion += 1
                while nxt.state is not EMPTY and self._error is None:
                    self._cv.wait()
            elif self._writer_idle:
                # Not congestion. The writer is parked on exactly this buffer;
                # give it the GIL until it has taken it, otherwise it may not
                # run again until the interpreter's switch interval expires.
                while self._slots[handed].state is FULL and self._error is None:
                    self._cv.wait()

    # -- writer side ------------------------------------------------------

    def _writer_loop(self):
        cv = self._cv
        slots = self._slots
        while True:
            with cv:
                idx = self._flush
                slot = slots[idx]
                while slot.state is not FULL:
                    if self._eos or self._error is not None:
                        self._writer_idle = False
                        return
                    self._writer_idle = True
                    cv.wait()
                self._writer_idle = False
                self._set_state(idx, slot, FLUSHING)
                cv.notify_all()
            n_entries = len(slot.flat) // 3
            try:
                data = encode_frame_flat(self.cfg.unit_id, slot.start_time_ns, slot.flat)
                self.sink.write(data)
            except Exception as exc:
                with cv:
                    self._error = exc
                    cv.notify_all()
                return
            slot.flat = []
            with cv:
                self._frames += 1
                self._entries += n_entries
                self._bytes += len(data)
                self._set_state(idx, slot, EMPTY)
                self._flush = (idx + 1) % self._n
                cv.notify_all()

    # -- lifecycle --------------------------------------------------------

    def stats(self) -> CollectorStats:
        with self._cv:
            if self._final is not None:
                return self._final
            return self._snapshot()

    def _snapshot(self) -> CollectorStats:
        return CollectorStats(
            events_recorded=self._events,
            entries_merged=self._merged,
            frames_written=self._frames,
            entries_written=self._entries,
            congestion_waits=self._congestion,
            full_transitions=self._full,
            bytes_written=self._bytes,
        )

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def failed(self) -> bool:
        return self._error is not None

    def slot_states(self) -> list[SlotState]:
        with self._cv:
            return [s.state for s in self._slots]

    def flush_on_exit(self) -> CollectorStats:
        """Hand over the partial buffer, drain the writer, close the sink.

        Safe to call more than once; later calls return the same stats (or
        re-raise the same SinkError).
        """
        with self._cv:
            if self._final is None and not self._closed:
                self._closed = True
                slot = self._slots[self._fill]
                if slot.flat and self._error is None:
                    self._set_state(self._fill, slot, FULL)
                    self._full += 1
                self._eos = True
                self._cv.notify_all()
        self._writer.join()
        with self._cv:
            if self._final is None:
                if self.cfg.close_sink:
                    try:
                        self.sink.close()
                    except OSError as exc:
                        if self._error is None:
                            self._error = exc
                self._final = self._snapshot()
            stats, error = self._final, self._error
        if error is not None:
            raise SinkError(f"elog sink failed: {error}", stats) from error
        return stats

    close = flush_on_exit

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.flush_on_exit()


def new_collector(cfg: CollectorConfig | None = None, **kwargs) -> Collector:
    """Create a collector; keyword arguments override CollectorConfig fields."""
    if cfg is None:
        cfg = CollectorConfig(**kwargs)
    elif kwargs:
        cfg = CollectorConfig(**{**cfg.__dict__, **kwargs})
    return Collector(cfg)
