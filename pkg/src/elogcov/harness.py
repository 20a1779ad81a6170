"""Experiment driver: synthetic TB streams, replays, sweeps and a mock QEMU host."""

from __future__ import annotations

import csv
import itertools
import os
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import plugin
from .collector import Collector, CollectorConfig, CollectorStats, combine_stats
from .elog import ExecEntry, read_elog
from .errors import InvalidParam, ScriptError
from .report import entry_ranges, range_profile
from .sinks import FileSink, LatencySink

CSV_COLUMNS = ["n_buffers", "capacity", "merge", "latency_ns", "events", "merged", "frames",
               "congestion_waits", "file_bytes", "wall_ns"]


@dataclass(frozen=True)
class StreamSpec:
    n_events: int
    contiguity_prob: float = 0.0
    tb_size_range: tuple[int, int] = (4, 64)
    # Fresh (non-contiguous) starts are drawn from here; contiguous runs may
    # run past the upper bound.
    address_space: tuple[int, int] = (0x4000_0000, 0x8000_0000)
    seed: int = 0
    n_units: int = 1
    duration_range: tuple[int, int] = (1, 1000)

    def validate(self):
        lo, hi = self.address_space
        smin, smax = self.tb_size_range
        dmin, dmax = self.duration_range
        if self.n_events < 0:
            raise InvalidParam("n_events must be >= 0")
        if not 0.0 <= self.contiguity_prob <= 1.0:
            raise InvalidParam(f"contiguity_prob must be in [0, 1], got {self.contiguity_prob}")
        if not 1 <= smin <= smax:
            raise InvalidParam(f"bad tb_size_range {self.tb_size_range}")
        if not 0 <= lo < hi or hi - lo < 8 + smax:
            raise InvalidParam(f"bad address_space {self.address_space}")
        if not 0 <= dmin <= dmax <= 0xFFFFFFFF:
            raise InvalidParam(f"bad duration_range {self.duration_range}")
        if not 1 <= self.n_units <= 0xFFFF:
            raise InvalidParam(f"n_units must be in [1, 65535], got {self.n_units}")


@dataclass
class EventStream:
    """TB executions as parallel arrays; iterates as ``(unit, start, end, duration)``."""

    units: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    durations: np.ndarray

    def __len__(self):
        return len(self.starts)

    def __iter__(self):
        return zip(self.units.tolist(), self.starts.tolist(), self.ends.tolist(), self.durations.tolist())

    @classmethod
    def from_events(cls, events: Iterable[Sequence[int]]) -> "EventStream":
        rows = [tuple(e) for e in events]
        cols = list(zip(*rows)) if rows else [(), (), (), ()]
        return cls(*(np.asarray(c, dtype=np.int64) for c in cols))

    def for_unit(self, unit: int) -> "EventStream":
        m = self.units == unit
        return EventStream(self.units[m], self.starts[m], self.ends[m], self.durations[m])

    def contiguous_fraction(self) -> float:
        """Share of events that start where their unit's previous event ended."""
        n = len(self)
        if n < 2:
            return 0.0
        hits = 0
        for u in np.unique(self.units):
            s = self.for_unit(u)
            hits += int(np.count_nonzero(s.starts[1:] == s.ends[:-1]))
        return hits / n


def _unit_stream(rng, n, spec: StreamSpec):
    lo, hi = spec.address_space
    smin, smax = spec.tb_size_range
    sizes = rng.integers(smin, smax + 1, n, dtype=np.int64)
    contig = rng.random(n) < spec.contiguity_prob
    slots = (hi - lo - smax) // 4
    fresh = lo + 4 * rng.integers(0, slots, n, dtype=np.int64)
    if n:
        contig[0] = False
    head = ~contig
    run = np.cumsum(head) - 1
    offs = np.cumsum(sizes) - sizes
    while True:
        starts = fresh[head][run] + offs - offs[head][run]
        ends = starts + sizes
        # A fresh start may land on the previous end by chance; nudge it.
        bad = np.flatnonzero(head[1:] & (starts[1:] == ends[:-1])) + 1
        if bad.size == 0:
            return starts, ends
        fresh[bad] = np.where(fresh[bad] + 4 < hi - smax, fresh[bad] + 4, lo)


def gen_stream(spec: StreamSpec) -> EventStream:
    """Deterministic synthetic stream: each event continues its unit's previous
    range with probability ``contiguity_prob``, otherwise starts somewhere fresh."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_events
    units = rng.integers(0, spec.n_units, n, dtype=np.int64) if spec.n_units > 1 else np.zeros(n, np.int64)
    dmin, dmax = spec.duration_range
    durations = rng.integers(dmin, dmax + 1, n, dtype=np.int64)
    starts = np.empty(n, np.int64)
    ends = np.empty(n, np.int64)
    for u in range(spec.n_units):
        idx = np.flatnonzero(units == u)
        starts[idx], ends[idx] = _unit_stream(rng, len(idx), spec)
    return EventStream(units, starts, ends, durations)


@dataclass
class ExperimentResult:
    config: CollectorConfig
    stats: CollectorStats
    file_bytes: int
    wall_time_ns: int
    latency_ns: int = 0
    per_unit: dict[int, CollectorStats] = field(default_factory=dict)
    path: str | None = None
    # Only set by mock_host_run.
    dropped: int = 0
    coverage_ok: bool | None = None

    def csv_row(self) -> dict:
        return {
            "n_buffers": self.config.n_buffers,
            "capacity": self.config.capacity,
            "merge": "on" if self.config.merge_enabled else "off",
            "latency_ns": self.latency_ns,
            "events": self.stats.events_recorded,
            "merged": self.stats.entries_merged,
            "frames": self.stats.frames_written,
            "congestion_waits": self.stats.congestion_waits,
            "file_bytes": self.file_bytes,
            "wall_ns": self.wall_time_ns,
        }


def replay(events, cfg: CollectorConfig, writer_latency_ns: int = 0, out=None) -> ExperimentResult:
    """Drive real collectors (one per unit, sharing one file) with ``events``.

    ``events`` is an EventStream or an iterable of ``(unit, start, end,
    duration)``. The elog goes to ``out``, or to a temporary file that is
    removed afterwards. Wall time covers producing, draining and joining.
    """
    if not isinstance(events, EventStream):
        events = EventStream.from_events(events)
    cfg = replace(cfg, sink=None, close_sink=False)
    cfg.validate()
    tmpdir = None
    if out is None:
        tmpdir = tempfile.TemporaryDirectory(prefix="elogcov-")
        path = os.path.join(tmpdir.name, "replay.elog")
    else:
        path = os.fspath(out)
    try:
        file_sink = FileSink(path)
        sink = LatencySink(file_sink, writer_latency_ns) if writer_latency_ns > 0 else file_sink
        units = sorted(set(events.units.tolist())) or [cfg.unit_id]
        collectors = {u: Collector(replace(cfg, unit_id=u, sink=sink)) for u in units}
        t0 = time.perf_counter_ns()
        try:
            if len(units) == 1:
                rec = collectors[units[0]].record_tb_exec
                for s, e, d in zip(events.starts.tolist(), events.ends.tolist(), events.durations.tolist()):
                    rec(s, e, d)
            else:
                recs = {u: c.record_tb_exec for u, c in collectors.items()}
                for u, s, e, d in events:
                    recs[u](s, e, d)
        finally:
            per_unit = {u: c.flush_on_exit() for u, c in collectors.items()}
        wall = time.perf_counter_ns() - t0
        file_sink.close()
        file_bytes = os.path.getsize(path)
    finally:
        if tmpdir is not None:
            tmpdir.cleanup()
    return ExperimentResult(
        config=replace(cfg, unit_id=units[0] if len(units) == 1 else cfg.unit_id),
        stats=combine_stats(*per_unit.values()),
        file_bytes=file_bytes,
        wall_time_ns=wall,
        latency_ns=writer_latency_ns,
        per_unit=per_unit,
        path=None if tmpdir is not None else path,
    )


def sweep(grid: dict, spec: StreamSpec | EventStream, base: CollectorConfig | None = None) -> list[dict]:
    """Replay one stream for every cell of ``grid`` and return CSV rows.

    ``grid`` maps any of ``n_buffers``, ``capacity``, ``merge``, ``latency_ns``
    to a list of values; missing keys fall back to ``base``.
    """
    base = base or CollectorConfig()
    events = spec if isinstance(spec, EventStream) else gen_stream(spec)
    axes = {
        "n_buffers": list(grid.get("n_buffers", [base.n_buffers])),
        "capacity": list(grid.get("capacity", [base.capacity])),
        "merge": list(grid.get("merge", [base.merge_enabled])),
        "latency_ns": list(grid.get("latency_ns", [0])),
    }
    unknown = set(grid) - set(axes)
    if unknown:
        raise InvalidParam(f"unknown grid axes: {sorted(unknown)}")
    rows = []
    for nb, cap, merge, lat in itertools.product(*axes.values()):
        cfg = replace(base, n_buffers=nb, capacity=cap, merge_enabled=merge)
        rows.append(replay(events, cfg, lat).csv_row())
    return rows


def write_csv(rows: Iterable[dict], f):
    w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)


def read_csv(f) -> list[dict]:
    rows = []
    for row in csv.DictReader(f):
        rows.append({k: (v if k == "merge" else int(v)) for k, v in row.items()})
    return rows


def reference_collect(events, capacity: int, merge: bool) -> dict:
    """Single-threaded model of the collector's buffering and merging.

    Returns the frames each unit would write (as entry lists), the merge
    count and the number of full-buffer hand-overs. With one buffer every
    hand-over makes the producer wait, so the last number is also the
    expected single-buffer congestion count.
    """
    frames: dict[int, list[list[ExecEntry]]] = {}
    current: dict[int, list[ExecEntry]] = {}
    merged = 0
    fulls = Counter()
    for u, s, e, d in events:
        buf = current.setdefault(u, [])
        if merge and buf and buf[-1].end == s:
            last = buf[-1]
            buf[-1] = ExecEntry(last.duration_ns + d, last.start, e)
            merged += 1
            continue
        buf.append(ExecEntry(d, s, e))
        if len(buf) == capacity:
            frames.setdefault(u, []).append(buf)
            current[u] = []
            fulls[u] += 1
    for u, buf in current.items():
        if buf:
            frames.setdefault(u, []).append(buf)
    return {"frames": frames, "merged": merged, "full_transitions": sum(fulls.values())}


# -- mock host ---------------------------------------------------------------


class MockInsn:
    __slots__ = ("vaddr", "size")

    def __init__(self, vaddr, size):
        self.vaddr = vaddr
        self.size = size


class MockTb:
    __slots__ = ("vaddr", "insns", "exec_cbs")

    def __init__(self, insns):
        self.insns = [MockInsn(a, s) for a, s in insns]
        self.vaddr = self.insns[0].vaddr
        self.exec_cbs = []


class MockHost:
    """Plays QEMU's role: provides the plugin API and dispatches callbacks."""

    def __init__(self, plugin_id: int = 1, target_name: str = "aarch64"):
        self.plugin_id = plugin_id
        self.info = {"target_name": target_name, "system_emulation": True}
        self.tb_trans_cbs = []
        self.atexit_cbs = []
        self.tbs: dict[object, MockTb] = {}

    # plugin API surface
    def register_vcpu_tb_trans_cb(self, plugin_id, cb):
        self.tb_trans_cbs.append(cb)

    def register_atexit_cb(self, plugin_id, cb, userdata):
        self.atexit_cbs.append((cb, userdata))

    def register_vcpu_tb_exec_cb(self, tb, cb, flags, userdata):
        tb.exec_cbs.append((cb, userdata))

    def tb_vaddr(self, tb):
        return tb.vaddr

    def tb_n_insns(self, tb):
        return len(tb.insns)

    def tb_get_insn(self, tb, idx):
        return tb.insns[idx]

    def insn_vaddr(self, insn):
        return insn.vaddr

    def insn_size(self, insn):
        return insn.size

    # driving
    def load(self, argv) -> int:
        return plugin.qemu_plugin_install(self.plugin_id, self.info, argv, self)

    @property
    def plugin(self) -> plugin.CoveragePlugin:
        return plugin.installed[self.plugin_id]

    def translate(self, key, insns):
        tb = MockTb(insns)
        self.tbs[key] = tb
        for cb in self.tb_trans_cbs:
            cb(self.plugin_id, tb)
        return tb

    def execute(self, vcpu, key, count=1):
        tb = self.tbs[key]
        for _ in range(count):
            for cb, udata in tb.exec_cbs:
                cb(vcpu, udata)

    def exit(self):
        for cb, udata in self.atexit_cbs:
            cb(self.plugin_id, udata)


def validate_script(script: Sequence[dict]):
    """Check a mock-host script before anything runs.

    Steps are dicts: ``{"op": "translate", "tb": key, "insns": [[addr, size], ...]}``,
    ``{"op": "exec", "tb": key, "vcpu": 0, "count": 1}`` or ``{"op": "exit"}``.
    """
    translated = set()
    exits = 0
    for i, step in enumerate(script):
        op = step.get("op")
        if op == "translate":
            insns = step.get("insns") or []
            if not insns:
                raise ScriptError(f"step {i}: translate without instructions")
            for a, s in insns:
                if s < 1 or a < 0:
                    raise ScriptError(f"step {i}: bad instruction ({a}, {s})")
            translated.add(step["tb"])
        elif op == "exec":
            if step.get("tb") not in translated:
                raise ScriptError(f"step {i}: exec of untranslated TB {step.get('tb')!r}")
            if step.get("count", 1) < 0 or step.get("vcpu", 0) < 0:
                raise ScriptError(f"step {i}: negative count or vcpu")
        elif op == "exit":
            exits += 1
            if exits > 1:
                raise ScriptError(f"step {i}: second exit")
        else:
            raise ScriptError(f"step {i}: unknown op {op!r}")


def script_oracle(script: Sequence[dict]) -> Counter:
    """Executed ``(start, end)`` ranges the script should produce, before exit."""
    tbs = {}
    ranges = Counter()
    for step in script:
        if step["op"] == "translate":
            insns = step["insns"]
            tbs[step["tb"]] = (insns[0][0], insns[0][0] + sum(s for _, s in insns))
        elif step["op"] == "exec":
            ranges[tbs[step["tb"]]] += step.get("count", 1)
        else:
            break
    return ranges


def mock_host_run(script: Sequence[dict], args: str | Sequence[str], plugin_id: int = 1,
                  writer_latency_ns: int = 0) -> ExperimentResult:
    """Run ``script`` against the plugin through the mock host.

    The script ends with an implicit exit if it has none. The written elog is
    checked against the coverage the script implies (``coverage_ok``).
    ``writer_latency_ns`` delays every frame write, as in :func:`replay`.
    """
    validate_script(script)
    host = MockHost(plugin_id)
    status = host.load(args)
    if status != 0:
        raise InvalidParam(f"plugin refused to load with {args!r} (status {status})")
    p = host.plugin
    if writer_latency_ns > 0:
        # Collectors are created on first exec, so they all pick this up.
        p.sink = LatencySink(p.sink, writer_latency_ns)
    t0 = time.perf_counter_ns()
    exited = False
    for step in script:
        op = step["op"]
        if op == "translate":
            host.translate(step["tb"], [tuple(x) for x in step["insns"]])
        elif op == "exec":
            host.execute(step.get("vcpu", 0), step["tb"], step.get("count", 1))
        else:
            host.exit()
            exited = True
    if not exited:
        host.exit()
    wall = time.perf_counter_ns() - t0
    plugin.installed.pop(plugin_id, None)

    blocks = read_elog(p.args.out)
    ok = range_profile(entry_ranges(blocks)) == range_profile(script_oracle(script))
    per_unit = dict(p.final_stats)
    cfg = CollectorConfig(n_buffers=p.args.buffers, capacity=p.args.capacity, merge_enabled=p.args.merge,
                          timing_enabled=p.args.timing)
    return ExperimentResult(
        config=cfg,
        stats=combine_stats(*per_unit.values()),
        file_bytes=os.path.getsize(p.args.out),
        wall_time_ns=wall,
        latency_ns=writer_latency_ns,
        per_unit=per_unit,
        path=p.args.out,
        dropped=p.dropped,
        coverage_ok=ok,
    )

