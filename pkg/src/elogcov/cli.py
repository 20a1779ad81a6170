"""Command-line front end.

Exit status: 0 on success, 1 for usage errors, 2 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import elog, harness, report
from .collector import DEFAULT_BUFFERS, DEFAULT_CAPACITY, CollectorConfig
from .errors import BlockError, ElogError, InvalidParam
from .fsutil import atomic_open, atomic_path

DEFAULT_SEED = 1
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _count(text: str) -> int:
    """Non-negative integer; also accepts ``10^6``, ``1e6`` and ``1_000``."""
    t = text.strip().replace("_", "")
    try:
        if "^" in t:
            base, exp = t.split("^")
            value = int(base) ** int(exp)
        elif "e" in t.lower() and not t.lower().startswith("0x"):
            f = float(t)
            if f != int(f):
                raise ValueError
            value = int(f)
        else:
            value = int(t, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {text!r}")
    return value


def _positive(text: str) -> int:
    value = _count(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return value


def _prob(text: str) -> float:
    try:
        p = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1]: {text!r}")
    return p


def _onoff(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off: {text!r}")


def _size_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(",")
    a = _positive(lo)
    b = _positive(hi) if sep else a
    if a > b:
        raise argparse.ArgumentTypeError(f"min > max: {text!r}")
    return a, b


def _int_list(text: str, item=_positive) -> list[int]:
    """Comma list; ``a,b,...,z`` expands geometrically (or arithmetically if b/a isn't whole)."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if "..." not in parts:
        return [item(p) for p in parts]
    i = parts.index("...")
    if i < 2 or i != len(parts) - 2:
        raise argparse.ArgumentTypeError(f"use 'a,b,...,z': {text!r}")
    head = [item(p) for p in parts[:i]]
    last = item(parts[-1])
    a, b = head[-2], head[-1]
    out = list(head)
    if a > 0 and b % a == 0 and b // a > 1:
        r = b // a
        while out[-1] * r <= last:
            out.append(out[-1] * r)
    elif b > a:
        while out[-1] + (b - a) <= last:
            out.append(out[-1] + (b - a))
    else:
        raise argparse.ArgumentTypeError(f"sequence does not increase: {text!r}")
    if out[-1] != last:
        raise argparse.ArgumentTypeError(f"sequence does not reach {last}: {text!r}")
    return out


def _onoff_list(text: str) -> list[bool]:
    return [_onoff(p) for p in text.split(",") if p.strip()]


# -- inspect -----------------------------------------------------------------


def _block_info(offset, block) -> dict:
    info = {"offset": offset, "unit": block.unit_id, "len": elog.block_size(block) - elog.HEADER_SIZE}
    if isinstance(block, elog.ExecFrame):
        dur = sum(e.duration_ns for e in block.entries)
        info.update(type="exec", type_code=elog.TYPE_EXEC, entries=len(block.entries),
                    start_time_ns=block.start_time_ns, end_time_ns=block.start_time_ns + dur,
                    first=block.entries[0].start, last=block.entries[-1].end)
    elif isinstance(block, elog.InfoBlock):
        info.update(type="info", type_code=elog.TYPE_INFO, tool=block.tool_name,
                    version=f"{block.version_major}.{block.version_minor}", flags=block.flags)
    elif isinstance(block, elog.ArchBlock):
        info.update(type="arch", type_code=elog.TYPE_ARCH, arch=block.arch_name, arch_id=block.arch_id,
                    word_bits=block.guest_word_bits)
    else:
        info.update(type="unknown", type_code=block.block_type)
    return info


def _block_line(info: dict) -> str:
    head = f"{info['offset']:>10}  {info['type']:<7} type={info['type_code']} unit={info['unit']} len={info['len']}"
    if info["type"] == "exec":
        return (f"{head} entries={info['entries']} time={info['start_time_ns']}..{info['end_time_ns']}ns "
                f"addr={info['first']:#x}..{info['last']:#x}")
    if info["type"] == "info":
        return f"{head} tool={info['tool']} version={info['version']} flags={info['flags']:#x}"
    if info["type"] == "arch":
        return f"{head} arch={info['arch']} id={info['arch_id']} bits={info['word_bits']}"
    return head


def cmd_inspect(args) -> int:
    listing = []
    status = 0
    with open(args.elog, "rb") as f:
        try:
            for offset, block in elog.scan_blocks(f):
                info = _block_info(offset, block)
                listing.append(info)
                if not args.json:
                    print(_block_line(info))
        except BlockError as exc:
            print(f"error: {exc}", file=sys.stderr)
            status = EXIT_RUNTIME
    if args.json:
        json.dump(listing, sys.stdout, indent=1)
        sys.stdout.write("\n")
    return status


# -- convert -----------------------------------------------------------------


def cmd_convert(args) -> int:
    lmap = report.load_line_map(args.linemap)
    with open(args.elog, "rb") as f:
        counts = report.accumulate(elog.iterate_blocks(f), lmap)
    report.emit_lcov(counts, args.output)
    if args.summary:
        sys.stdout.write(report.summarize(counts))
    return 0


# -- simulate / sweep --------------------------------------------------------


def _seed(args) -> int:
    if args.seed is None:
        print(f"seed: {DEFAULT_SEED}", file=sys.stderr)
        return DEFAULT_SEED
    return args.seed


def _stream_spec(args, seed) -> harness.StreamSpec:
    return harness.StreamSpec(n_events=args.events, contiguity_prob=args.contig, tb_size_range=args.tb_size,
                              seed=seed, n_units=args.units)


def cmd_simulate(args) -> int:
    seed = _seed(args)
    events = harness.gen_stream(_stream_spec(args, seed))
    cfg = CollectorConfig(n_buffers=args.buffers, capacity=args.capacity, merge_enabled=args.merge,
                          timing_enabled=args.timing)
    if args.out:
        with atomic_path(args.out) as tmp:
            res = harness.replay(events, cfg, args.latency_ns, out=tmp)
    else:
        res = harness.replay(events, cfg, args.latency_ns)
    row = res.csv_row()
    if args.stats:
        with atomic_open(args.stats, "w", newline="") as f:
            harness.write_csv([row], f)
    s = res.stats
    print(f"events={s.events_recorded} merged={s.entries_merged} entries={s.entries_written} "
          f"frames={s.frames_written} congestion_waits={s.congestion_waits} file_bytes={res.file_bytes} "
          f"wall_ms={res.wall_time_ns / 1e6:.1f}")
    return 0


def cmd_sweep(args) -> int:
    seed = _seed(args)
    spec = _stream_spec(args, seed)
    grid = {"n_buffers": args.buffers, "capacity": args.capacities, "merge": args.merge,
            "latency_ns": args.latencies}
    rows = harness.sweep(grid, spec, CollectorConfig(timing_enabled=args.timing))
    if args.output and args.output != "-":
        with atomic_open(args.output, "w", newline="") as f:
            harness.write_csv(rows, f)
    else:
        harness.write_csv(rows, sys.stdout)
    if args.figures:
        from .plots import render_figures

        for path in render_figures(rows, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0


# -- predict -----------------------------------------------------------------


def cmd_predict(args) -> int:
    size = elog.predict_file_size(args.tb, args.capacity)
    unbuffered = elog.predict_file_size(args.tb, 1)
    model = elog.size_ratio(args.capacity)
    print(f"predicted_bytes: {size}")
    print(f"unbuffered_bytes: {unbuffered}")
    print(f"ratio_vs_capacity_1: {size / unbuffered:.4f} ({(1 - size / unbuffered) * 100:.1f}% smaller)")
    print(f"model_ratio: {model:.4f} ({(1 - model) * 100:.1f}% smaller)")
    return 0


# -- gen-linemap -------------------------------------------------------------


def _read_ranges(path) -> list[tuple[int, int]]:
    ranges = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                a, b = line.split()
                ranges.append((int(a, 16), int(b, 16)))
            except ValueError:
                raise InvalidParam(f"{path}:{lineno}: expected '<start> <end>' in hex") from None
    return ranges


def cmd_gen_linemap(args) -> int:
    if args.elog:
        ranges = list(report.entry_ranges(elog.read_elog(args.elog)))
    else:
        ranges = _read_ranges(args.ranges)
    lmap = report.gen_line_map_via_symbolizer(args.elf, args.symbolizer, ranges, args.insn_size)
    lmap.dump(args.output)
    print(f"{len(lmap)} records, {lmap.skipped} addresses unresolved", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elogcov", description="Tools for elog execution traces.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("inspect", help="list the blocks of an elog file")
    s.add_argument("--elog", required=True)
    s.add_argument("--json", action="store_true", help="emit a JSON array")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("convert", help="convert an elog to an lcov tracefile")
    s.add_argument("--elog", required=True)
    s.add_argument("--linemap", required=True, help="line map: '0x<addr> <size> <path> <line>' per line")
    s.add_argument("-o", "--output", required=True, help="lcov .info file to write")
    s.add_argument("--summary", action="store_true", help="print per-file line coverage")
    s.set_defaults(func=cmd_convert)

    def stream_flags(s):
        s.add_argument("--events", type=_count, default=100_000)
        s.add_argument("--contig", type=_prob, default=0.0, help="probability an event continues the last one")
        s.add_argument("--tb-size", type=_size_range, default=(4, 64), metavar="MIN,MAX")
        s.add_argument("--units", type=_positive, default=1, help="number of vCPUs")
        s.add_argument("--seed", type=_count, default=None)
        s.add_argument("--timing", type=_onoff, default=False, metavar="on|off")

    s = sub.add_parser("simulate", help="replay a synthetic stream through the collector")
    stream_flags(s)
    s.add_argument("--buffers", type=_positive, default=DEFAULT_BUFFERS)
    s.add_argument("--capacity", type=_positive, default=DEFAULT_CAPACITY)
    s.add_argument("--merge", type=_onoff, default=True, metavar="on|off")
    s.add_argument("--latency-ns", type=_count, default=0, help="delay added to every frame write")
    s.add_argument("--out", help="elog file to keep")
    s.add_argument("--stats", help="CSV file for the result row")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="replay one stream over a grid of collector settings")
    stream_flags(s)
    s.add_argument("--buffers", type=_int_list, default=[DEFAULT_BUFFERS])
    s.add_argument("--capacities", type=_int_list, default=[DEFAULT_CAPACITY])
    s.add_argument("--merge", type=_onoff_list, default=[True], metavar="on,off")
    s.add_argument("--latencies", type=lambda t: _int_list(t, _count), default=[0], metavar="NS,...")
    s.add_argument("-o", "--output", help="CSV file (default stdout)")
    s.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("predict", help="predicted elog size for a TB count and buffer capacity")
    s.add_argument("--tb", type=_count, required=True)
    s.add_argument("--capacity", type=_positive, required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gen-linemap", help="build a line map with an addr2line-style symbolizer")
    s.add_argument("--elf", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--elog", help="take the address ranges from this elog")
    src.add_argument("--ranges", help="file of '<start> <end>' hex ranges")
    s.add_argument("--symbolizer", default=report.DEFAULT_SYMBOLIZER, help="command; {elf} is substituted")
    s.add_argument("--insn-size", type=_positive, default=4)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen_linemap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ElogError, OSError) as exc:
        print(f"elogcov: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
