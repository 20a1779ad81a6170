"""elog -> lcov conversion.

Executed address ranges are mapped onto source lines through a line map: a
sorted table of ``(addr, size, file, line)`` instruction records. The text
form has one record per line::

    # comment
    0x40000000 4 src/main.c 12

A record is executed once for every exec entry ``[start, end)`` containing
its address. A source line's count is the count of its first (lowest
address) instruction. Executed bytes covered by no record are kept as
residual ranges rather than dropped.
"""

from __future__ import annotations

import io
import os
import shlex
import subprocess
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

from .elog import ExecFrame
from .errors import MalformedLineMap, SymbolizerError
from .fsutil import atomic_open


class LineRecord(NamedTuple):
    addr: int
    size: int
    file: str
    line: int


class LineMap:
    def __init__(self, records: Iterable[LineRecord] = (), skipped: int = 0):
        self.records = [LineRecord(*r) for r in records]
        # Addresses the symbolizer could not resolve.
        self.skipped = skipped
        prev_end = None
        for i, r in enumerate(self.records):
            if r.size < 1:
                raise MalformedLineMap(f"record {i}: size must be >= 1")
            if r.line < 1:
                raise MalformedLineMap(f"record {i}: line numbers are 1-based")
            if prev_end is not None and r.addr < prev_end:
                raise MalformedLineMap(f"record {i} at {r.addr:#x} overlaps or is out of order")
            prev_end = r.addr + r.size
        self.addrs = [r.addr for r in self.records]

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[LineRecord]:
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, LineMap) and self.records == other.records

    def lookup(self, addr: int) -> LineRecord | None:
        i = bisect_right(self.addrs, addr) - 1
        if i >= 0:
            r = self.records[i]
            if addr < r.addr + r.size:
                return r
        return None

    def dumps(self) -> str:
        return "".join(f"{r.addr:#x} {r.size} {r.file} {r.line}\n" for r in self.records)

    def dump(self, path):
        with atomic_open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dumps())


def parse_line_map(lines: Iterable[str]) -> LineMap:
    records = []
    prev_end = None
    for lineno, text in enumerate(lines, 1):
        text = text.strip()
        if not text or text.startswith("#"):
            continue
        try:
            head, line = text.rsplit(None, 1)
            addr, size, path = head.split(None, 2)
            rec = LineRecord(int(addr, 16), int(size, 0), path, int(line))
        except ValueError:
            raise MalformedLineMap(f"expected '0x<addr> <size> <path> <line>', got {text!r}", lineno) from None
        if rec.size < 1 or rec.line < 1:
            raise MalformedLineMap("size and line must be >= 1", lineno)
        if prev_end is not None and rec.addr < prev_end:
            raise MalformedLineMap(f"record at {rec.addr:#x} overlaps or precedes the previous one", lineno)
        prev_end = rec.addr + rec.size
        records.append(rec)
    return LineMap(records)


def load_line_map(path) -> LineMap:
    with open(path, encoding="utf-8") as f:
        return parse_line_map(f)


@dataclass
class CoverageCounts:
    lines: dict[tuple[str, int], int] = field(default_factory=dict)
    # Execution count of every line-map record, by address.
    instructions: dict[int, int] = field(default_factory=dict)
    # Executed bytes not covered by the line map: (start, end, count), sorted.
    residual: list[tuple[int, int, int]] = field(default_factory=list)

    def files(self) -> dict[str, list[tuple[int, int]]]:
        per_file = defaultdict(list)
        for (path, line), count in self.lines.items():
            per_file[path].append((line, count))
        return {p: sorted(v) for p, v in sorted(per_file.items())}


def entry_ranges(blocks) -> Counter:
    """Multiplicity of every executed ``(start, end)`` range in the exec frames."""
    ranges = Counter()
    for b in blocks:
        if isinstance(b, ExecFrame):
            ranges.update((e.start, e.end) for e in b.entries)
    return ranges


def _sweep(deltas: dict[int, int]) -> list[tuple[int, int, int]]:
    out = []
    level = 0
    prev = None
    for pos in sorted(deltas):
        if prev is not None and level and pos > prev:
            if out and out[-1][1] == prev and out[-1][2] == level:
                out[-1] = (out[-1][0], pos, level)
            else:
                out.append((prev, pos, level))
        level += deltas[pos]
        prev = pos
    return out


def range_profile(ranges) -> list[tuple[int, int, int]]:
    """Per-address execution counts of weighted ranges, as maximal constant runs.

    ``ranges`` maps ``(start, end)`` to a multiplicity (or is an iterable of
    ``(start, end)``). Two traces cover every address equally often iff their
    profiles are equal.
    """
    if not isinstance(ranges, dict):
        ranges = Counter(ranges)
    deltas = defaultdict(int)
    for (s, e), m in ranges.items():
        deltas[s] += m
        deltas[e] -= m
    return _sweep(deltas)


def accumulate(blocks, lmap: LineMap) -> CoverageCounts:
    ranges = entry_ranges(blocks)
    addrs = lmap.addrs
    recs = lmap.records
    diff = [0] * (len(addrs) + 1)
    gaps = defaultdict(int)
    for (s, e), m in ranges.items():
        lo = bisect_left(addrs, s)
        hi = bisect_left(addrs, e)
        diff[lo] += m
        diff[hi] -= m
        # Walk the records touching [s, e) to find bytes no record covers.
        cur = s
        j = lo - 1 if lo > 0 and recs[lo - 1].addr + recs[lo - 1].size > s else lo
        for r in recs[j:hi]:
            if r.addr > cur:
                gaps[cur] += m
                gaps[r.addr] -= m
            cur = max(cur, min(r.addr + r.size, e))
        if cur < e:
            gaps[cur] += m
            gaps[e] -= m

    counts = CoverageCounts()
    level = 0
    for i, r in enumerate(recs):
        level += diff[i]
        counts.instructions[r.addr] = level
        key = (r.file, r.line)
        if key not in counts.lines:
            counts.lines[key] = level
    counts.residual = _sweep(gaps)
    return counts


def format_lcov(counts: CoverageCounts) -> str:
    out = io.StringIO()
    for path, lines in counts.files().items():
        out.write(f"SF:{path}\n")
        for line, count in lines:
            out.write(f"DA:{line},{count}\n")
        out.write(f"LF:{len(lines)}\n")
        out.write(f"LH:{sum(1 for _, c in lines if c > 0)}\n")
        out.write("end_of_record\n")
    return out.getvalue()


def emit_lcov(counts: CoverageCounts, out) -> int:
    """Write the lcov tracefile to a path (atomically) or a text stream."""
    text = format_lcov(counts)
    if isinstance(out, (str, os.PathLike)):
        with atomic_open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        out.write(text)
    return len(text.encode("utf-8"))


def _percent(hit: int, total: int) -> str:
    if total == 0:
        return "100.0%"
    # Round half up to one decimal, in exact integer arithmetic.
    tenths = (2000 * hit + total) // (2 * total)
    return f"{tenths // 10}.{tenths % 10}%"


def summarize(counts: CoverageCounts, max_residual: int | None = 20) -> str:
    rows = []
    total_hit = total_lines = 0
    for path, lines in counts.files().items():
        hit = sum(1 for _, c in lines if c > 0)
        rows.append((path, f"{hit}/{len(lines)}", _percent(hit, len(lines))))
        total_hit += hit
        total_lines += len(lines)
    rows.append(("TOTAL", f"{total_hit}/{total_lines}", _percent(total_hit, total_lines)))
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    text = [f"{p:<{w0}}  {f:>{w1}}  {pct:>6}" for p, f, pct in rows]
    if counts.residual:
        nbytes = sum(e - s for s, e, _ in counts.residual)
        text.append(f"unmapped: {len(counts.residual)} ranges, {nbytes} bytes")
        shown = counts.residual if max_residual is None else counts.residual[:max_residual]
        for s, e, c in shown:
            text.append(f"  {s:#x}-{e:#x} x{c}")
        if len(shown) < len(counts.residual):
            text.append(f"  ... {len(counts.residual) - len(shown)} more")
    return "\n".join(text) + "\n"


DEFAULT_SYMBOLIZER = "addr2line -e {elf}"


def _parse_location(text: str):
    path, _, line = text.strip().rpartition(":")
    line = line.split()[0] if line.split() else ""
    if not path or path.startswith("??") or not line.isdigit() or int(line) < 1:
        return None
    return path, int(line)


def gen_line_map_via_symbolizer(elf, symbolizer: str | Sequence[str] = DEFAULT_SYMBOLIZER,
                                ranges: Iterable[tuple[int, int]] = (), insn_size: int = 4,
                                timeout: float | None = 300) -> LineMap:
    """Build a line map by asking an addr2line-compatible tool about ``ranges``.

    Every ``insn_size``-th address in each range is sent to the symbolizer
    (hex, one per line, on stdin); it must answer one ``file:line`` per
    address. Unresolved addresses (``??``) are left out and counted in
    ``LineMap.skipped``.
    """
    addrs = sorted({a for s, e in ranges for a in range(s, e, insn_size)})
    cmd = shlex.split(symbolizer) if isinstance(symbolizer, str) else list(symbolizer)
    cmd = [part.replace("{elf}", os.fspath(elf)) for part in cmd]
    if not addrs:
        return LineMap()
    try:
        proc = subprocess.run(cmd, input="".join(f"{a:#x}\n" for a in addrs), capture_output=True,
                              text=True, timeout=timeout)
    except (OSError, subprocess.SubprocessError) as exc:
        raise SymbolizerError(f"cannot run symbolizer {cmd[0]!r}: {exc}") from None
    if proc.returncode != 0:
        raise SymbolizerError(f"symbolizer exited with status {proc.returncode}", proc.stderr)
    answers = proc.stdout.splitlines()
    if len(answers) != len(addrs):
        raise SymbolizerError(f"symbolizer returned {len(answers)} lines for {len(addrs)} addresses", proc.stderr)
    records = []
    skipped = 0
    for i, (addr, answer) in enumerate(zip(addrs, answers)):
        loc = _parse_location(answer)
        if loc is None:
            skipped += 1
            continue
        size = insn_size if i + 1 == len(addrs) else min(insn_size, addrs[i + 1] - addr)
        records.append(LineRecord(addr, size, loc[0], loc[1]))
    return LineMap(records, skipped=skipped)
