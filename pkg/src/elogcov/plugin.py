"""TCG-plugin front end: turns translate/execute/exit callbacks into elog frames.

This mirrors the C plugin entry points of the QEMU TCG plugin API. The host
object passed to :func:`qemu_plugin_install` must provide the subset of the
``qemu_plugin_*`` API used here, with the ``qemu_plugin_`` prefix dropped::

    register_vcpu_tb_trans_cb(plugin_id, cb)          cb(plugin_id, tb)
    register_vcpu_tb_exec_cb(tb, cb, flags, userdata) cb(vcpu_index, userdata)
    register_atexit_cb(plugin_id, cb, userdata)       cb(plugin_id, userdata)
    tb_vaddr(tb), tb_n_insns(tb), tb_get_insn(tb, i)
    insn_vaddr(insn), insn_size(insn)

One collector is created per vCPU on first use; all of them share one file
sink, which serialises writes frame by frame.

Usage with QEMU::

    qemu-system-aarch64 ... -plugin <libpath>,out=run.elog,buffers=4,capacity=8192,merge=on
"""

from __future__ import annotations

import logging
import sys
import threading
import time
from dataclasses import dataclass
from typing import Sequence

from .collector import (DEFAULT_BUFFERS, DEFAULT_CAPACITY, Collector, CollectorConfig, CollectorStats,
                        combine_stats)
from .elog import ArchBlock, ConfigPreamble, InfoBlock
from .errors import ElogError, InvalidParam, SinkError
from .sinks import FileSink

log = logging.getLogger(__name__)

# Plugin API generation of QEMU 8.1.
QEMU_PLUGIN_VERSION = 1
qemu_plugin_version = QEMU_PLUGIN_VERSION

QEMU_PLUGIN_CB_NO_REGS = 0

DEFAULT_OUT = "nqc2.elog"

_ARCH_IDS = {"aarch64": 183, "arm": 40, "riscv64": 243, "riscv32": 243, "x86_64": 62, "i386": 3}
_WORD_BITS_32 = {"arm", "riscv32", "i386"}


def _arch_block(target):
    if not target:
        return ArchBlock()
    return ArchBlock(_ARCH_IDS.get(target, 0), 32 if target in _WORD_BITS_32 else 64, target)


@dataclass(frozen=True)
class PluginArgs:
    out: str = DEFAULT_OUT
    buffers: int = DEFAULT_BUFFERS
    capacity: int = DEFAULT_CAPACITY
    merge: bool = True
    timing: bool = False


@dataclass(frozen=True)
class TbDescriptor:
    start: int
    end: int


def _parse_bool(key, value):
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise InvalidParam(f"{key}: expected on|off, got {value!r}")


def _parse_count(key, value):
    try:
        n = int(value, 0)
    except ValueError:
        raise InvalidParam(f"{key}: not an integer: {value!r}") from None
    if n < 1:
        raise InvalidParam(f"{key} must be >= 1, got {n}")
    return n


def parse_plugin_args(argv: Sequence[str] | str) -> PluginArgs:
    """Parse ``key=value`` plugin options (a list, or one comma-separated string)."""
    if isinstance(argv, str):
        argv = [a for a in argv.split(",") if a]
    opts = {}
    for arg in argv:
        key, sep, value = arg.partition("=")
        key = key.strip()
        if not sep:
            raise InvalidParam(f"expected key=value, got {arg!r}")
        if key == "out":
            if not value:
                raise InvalidParam("out: empty path")
            opts["out"] = value
        elif key in ("buffers", "capacity"):
            opts[key] = _parse_count(key, value)
        elif key in ("merge", "timing"):
            opts[key] = _parse_bool(key, value)
        else:
            raise InvalidParam(f"unknown plugin option {key!r}")
    return PluginArgs(**opts)


class _Vcpu:
    __slots__ = ("collector", "lock", "pending", "t_last", "dropped")

    def __init__(self, collector):
        self.collector = collector
        self.lock = threading.Lock()
        self.pending = None
        self.t_last = 0
        self.dropped = 0


class CoveragePlugin:
    def __init__(self, host, plugin_id, args: PluginArgs, info=None):
        self.host = host
        self.plugin_id = plugin_id
        self.args = args
        target = info.get("target_name") if isinstance(info, dict) else getattr(info, "target_name", None)
        self.sink = FileSink(args.out, ConfigPreamble(InfoBlock(), _arch_block(target)))
        self._lock = threading.Lock()
        self._vcpus: dict[int, _Vcpu] = {}
        self._exiting = False
        self._late_drops = 0
        self.descriptors = 0
        self.translate_errors = 0
        self.final_stats: dict[int, CollectorStats] = {}

    def install(self):
        self.host.register_vcpu_tb_trans_cb(self.plugin_id, self.vcpu_tb_trans)
        self.host.register_atexit_cb(self.plugin_id, self.at_exit, None)

    def _vcpu(self, index) -> _Vcpu | None:
        with self._lock:
            v = self._vcpus.get(index)
            if v is None and not self._exiting:
                cfg = CollectorConfig(
                    n_buffers=self.args.buffers,
                    capacity=self.args.capacity,
                    merge_enabled=self.args.merge,
                    timing_enabled=self.args.timing,
                    unit_id=index,
                    sink=self.sink,
                    close_sink=False,
                )
                v = self._vcpus[index] = _Vcpu(Collector(cfg))
            return v

    def vcpu_tb_trans(self, plugin_id, tb):
        try:
            host = self.host
            start = host.tb_vaddr(tb)
            size = 0
            for i in range(host.tb_n_insns(tb)):
                size += host.insn_size(host.tb_get_insn(tb, i))
            if size <= 0:
                raise InvalidParam(f"TB at {start:#x} has no instruction bytes")
            desc = TbDescriptor(start, start + size)
            host.register_vcpu_tb_exec_cb(tb, self.vcpu_tb_exec, QEMU_PLUGIN_CB_NO_REGS, desc)
            self.descriptors += 1
        except Exception:
            self.translate_errors += 1
            log.exception("TB translation callback failed")

    def vcpu_tb_exec(self, vcpu_index, desc: TbDescriptor):
        v = self._vcpus.get(vcpu_index) or self._vcpu(vcpu_index)
        if v is None:
            self._late_drops += 1
            return
        with v.lock:
            try:
                if self.args.timing:
                    # A TB's time is only known when the next one starts.
                    now = time.perf_counter_ns()
                    prev = v.pending
                    if prev is not None:
                        v.collector.record_tb_exec(prev.start, prev.end, now - v.t_last)
                    v.pending = desc
                    v.t_last = now
                else:
                    v.collector.record_tb_exec(desc.start, desc.end)
            except Exception:
                v.dropped += 1

    def at_exit(self, plugin_id=None, userdata=None):
        with self._lock:
            if self._exiting:
                return
            self._exiting = True
            vcpus = sorted(self._vcpus.items())
        for index, v in vcpus:
            with v.lock:
                if v.pending is not None and not v.collector.closed:
                    try:
                        v.collector.record_tb_exec(v.pending.start, v.pending.end, time.perf_counter_ns() - v.t_last)
                    except Exception:
                        v.dropped += 1
                    v.pending = None
                try:
                    self.final_stats[index] = v.collector.flush_on_exit()
                except SinkError as exc:
                    self.final_stats[index] = exc.stats
                    log.error("vCPU %d: %s", index, exc)
        try:
            self.sink.close()
        except OSError as exc:
            log.error("closing %s: %s", self.args.out, exc)
        self._report()

    @property
    def dropped(self) -> int:
        with self._lock:
            vcpus = list(self._vcpus.values())
        return self._late_drops + sum(v.dropped for v in vcpus)

    def _report(self):
        total = CollectorStats()
        for index, s in sorted(self.final_stats.items()):
            print(f"elogcov: vcpu {index}: events={s.events_recorded} merged={s.entries_merged} "
                  f"frames={s.frames_written} congestion_waits={s.congestion_waits}", file=sys.stderr)
            total = combine_stats(total, s)
        print(f"elogcov: {self.args.out}: {self.sink.bytes_written} bytes, events={total.events_recorded} "
              f"merged={total.entries_merged} frames={total.frames_written} dropped={self.dropped}",
              file=sys.stderr)


installed: dict[int, CoveragePlugin] = {}


def qemu_plugin_install(plugin_id, info, argv, host) -> int:
    """Plugin entry point. Returns 0 on success, nonzero to abort loading."""
    try:
        args = parse_plugin_args(argv)
        plugin = CoveragePlugin(host, plugin_id, args, info)
    except (ElogError, OSError) as exc:
        print(f"elogcov: {exc}", file=sys.stderr)
        return -1
    plugin.install()
    installed[plugin_id] = plugin
    return 0
