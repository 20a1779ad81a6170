"""Reader/writer for elog execution-trace files.

An elog file is a plain concatenation of blocks. Every block is an 8-byte
header (type, unit id, payload length) followed by ``payload_len`` bytes.
All integers are little-endian, with no padding inside or between blocks.

Exec frames (type 1) carry a 64-bit start timestamp and a run of 20-byte
entries ``(duration_ns: u32, start: u64, end: u64)``, where ``end`` is
exclusive. Info (type 0) and arch (type 5) blocks form the 124-byte
configuration preamble written at the top of every file.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, NamedTuple, Sequence, Union

from .errors import EmptyFrame, InvalidParam, MalformedExecFrame, TruncatedBlock

TYPE_INFO = 0
TYPE_EXEC = 1
TYPE_ARCH = 5

HEADER = struct.Struct("<HHI")
EXEC_START = struct.Struct("<Q")
ENTRY = struct.Struct("<IQQ")
INFO_PAYLOAD = struct.Struct("<HHI48s")
ARCH_PAYLOAD = struct.Struct("<II44s")

HEADER_SIZE = HEADER.size  # 8
EXEC_SIZE = EXEC_START.size  # 8
ENTRY_SIZE = ENTRY.size  # 20
FRAME_OVERHEAD = HEADER_SIZE + EXEC_SIZE  # 16
PREAMBLE_SIZE = 2 * HEADER_SIZE + INFO_PAYLOAD.size + ARCH_PAYLOAD.size  # 124

FORMAT_VERSION = (1, 0)
ARCH_AARCH64 = 183  # ELF e_machine value


@dataclass(frozen=True)
class BlockHeader:
    block_type: int
    unit_id: int
    payload_len: int


class ExecEntry(NamedTuple):
    duration_ns: int
    start: int
    end: int


@dataclass(frozen=True)
class ExecFrame:
    unit_id: int
    start_time_ns: int
    entries: tuple[ExecEntry, ...]

    def __post_init__(self):
        if not isinstance(self.entries, tuple):
            object.__setattr__(self, "entries", tuple(ExecEntry(*e) for e in self.entries))


@dataclass(frozen=True)
class InfoBlock:
    version_major: int = FORMAT_VERSION[0]
    version_minor: int = FORMAT_VERSION[1]
    flags: int = 0
    tool_name: str = "elogcov"
    unit_id: int = 0


@dataclass(frozen=True)
class ArchBlock:
    arch_id: int = ARCH_AARCH64
    guest_word_bits: int = 64
    arch_name: str = "aarch64"
    unit_id: int = 0


@dataclass(frozen=True)
class UnknownBlock:
    block_type: int
    unit_id: int
    payload: bytes


@dataclass(frozen=True)
class ConfigPreamble:
    info: InfoBlock = field(default_factory=InfoBlock)
    arch: ArchBlock = field(default_factory=ArchBlock)


Block = Union[ExecFrame, InfoBlock, ArchBlock, UnknownBlock]


def _pack(st: struct.Struct, *values) -> bytes:
    try:
        return st.pack(*values)
    except struct.error as exc:
        raise InvalidParam(f"field out of range: {exc}") from None


def _fixed_text(text: str, width: int) -> bytes:
    # Truncate at the byte level; decoding uses surrogateescape so a split
    # multi-byte sequence still roundtrips.
    return text.encode("utf-8", "surrogateescape")[:width]


def _unfixed_text(raw: bytes) -> str:
    return raw.rstrip(b"\0").decode("utf-8", "surrogateescape")


def encode_header(h: BlockHeader) -> bytes:
    return _pack(HEADER, h.block_type, h.unit_id, h.payload_len)


def decode_header(data: bytes) -> BlockHeader:
    if len(data) < HEADER_SIZE:
        raise TruncatedBlock(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    return BlockHeader(*HEADER.unpack_from(data))


@functools.lru_cache(maxsize=64)
def _frame_struct(n: int) -> struct.Struct:
    return struct.Struct("<HHIQ" + "IQQ" * n)


def encode_frame_flat(unit_id: int, start_time_ns: int, flat: Sequence[int]) -> bytes:
    """Encode an exec frame from a flat ``[dur, start, end, dur, start, end, ...]`` list.

    This is the collector's hot path; it avoids building ExecEntry objects.
    """
    n = len(flat) // 3
    if n == 0:
        raise EmptyFrame("exec frame needs at least one entry")
    try:
        return _frame_struct(n).pack(TYPE_EXEC, unit_id, EXEC_SIZE + n * ENTRY_SIZE, start_time_ns, *flat)
    except struct.error as exc:
        raise InvalidParam(f"field out of range: {exc}") from None


def encode_exec_frame(f: ExecFrame) -> bytes:
    flat = [v for e in f.entries for v in e]
    return encode_frame_flat(f.unit_id, f.start_time_ns, flat)


def encode_block(block: Block) -> bytes:
    if isinstance(block, ExecFrame):
        return encode_exec_frame(block)
    if isinstance(block, InfoBlock):
        payload = _pack(INFO_PAYLOAD, block.version_major, block.version_minor, block.flags,
                        _fixed_text(block.tool_name, 48))
        return encode_header(BlockHeader(TYPE_INFO, block.unit_id, len(payload))) + payload
    if isinstance(block, ArchBlock):
        payload = _pack(ARCH_PAYLOAD, block.arch_id, block.guest_word_bits, _fixed_text(block.arch_name, 44))
        return encode_header(BlockHeader(TYPE_ARCH, block.unit_id, len(payload))) + payload
    if isinstance(block, UnknownBlock):
        payload = bytes(block.payload)
        return encode_header(BlockHeader(block.block_type, block.unit_id, len(payload))) + payload
    raise TypeError(f"not an elog block: {block!r}")


def encode_preamble(p: ConfigPreamble) -> bytes:
    return encode_block(p.info) + encode_block(p.arch)


def write_config_preamble(sink: BinaryIO, p: ConfigPreamble | None = None) -> int:
    data = encode_preamble(p or ConfigPreamble())
    sink.write(data)
    return len(data)


def decode_payload(h: BlockHeader, payload: bytes) -> Block:
    if h.block_type == TYPE_EXEC:
        body = h.payload_len - EXEC_SIZE
        if body <= 0 or body % ENTRY_SIZE:
            raise MalformedExecFrame(f"exec frame payload length {h.payload_len} is not 8 + 20*k, k >= 1")
        (start_time,) = EXEC_START.unpack_from(payload)
        entries = tuple(map(ExecEntry._make, ENTRY.iter_unpack(payload[EXEC_SIZE:])))
        return ExecFrame(h.unit_id, start_time, entries)
    if h.block_type == TYPE_INFO and h.payload_len == INFO_PAYLOAD.size:
        major, minor, flags, name = INFO_PAYLOAD.unpack(payload)
        return InfoBlock(major, minor, flags, _unfixed_text(name), h.unit_id)
    if h.block_type == TYPE_ARCH and h.payload_len == ARCH_PAYLOAD.size:
        arch_id, bits, name = ARCH_PAYLOAD.unpack(payload)
        return ArchBlock(arch_id, bits, _unfixed_text(name), h.unit_id)
    # Unrecognised (or unrecognised-length) blocks are carried verbatim.
    return UnknownBlock(h.block_type, h.unit_id, bytes(payload))


def decode_block(reader: BinaryIO) -> Block | None:
    """Read one block from ``reader``. Returns None at a clean end of file."""
    raw = reader.read(HEADER_SIZE)
    if not raw:
        return None
    h = decode_header(raw)
    if h.block_type == TYPE_EXEC:
        body = h.payload_len - EXEC_SIZE
        if body <= 0 or body % ENTRY_SIZE:
            raise MalformedExecFrame(f"exec frame payload length {h.payload_len} is not 8 + 20*k, k >= 1")
    payload = reader.read(h.payload_len)
    if len(payload) < h.payload_len:
        raise TruncatedBlock(f"payload truncated: expected {h.payload_len} bytes, got {len(payload)}")
    return decode_payload(h, payload)


def block_size(block: Block) -> int:
    if isinstance(block, ExecFrame):
        return FRAME_OVERHEAD + ENTRY_SIZE * len(block.entries)
    if isinstance(block, UnknownBlock):
        return HEADER_SIZE + len(block.payload)
    if isinstance(block, InfoBlock):
        return HEADER_SIZE + INFO_PAYLOAD.size
    return HEADER_SIZE + ARCH_PAYLOAD.size


def scan_blocks(reader: BinaryIO) -> Iterator[tuple[int, Block]]:
    """Yield ``(offset, block)`` pairs in file order.

    Decode errors are re-raised with ``offset`` set to the start of the bad block.
    """
    offset = 0
    while True:
        try:
            block = decode_block(reader)
        except (TruncatedBlock, MalformedExecFrame) as exc:
            exc.offset = offset
            raise
        if block is None:
            return
        yield offset, block
        offset += block_size(block)


def iterate_blocks(reader: BinaryIO) -> Iterator[Block]:
    for _, block in scan_blocks(reader):
        yield block


def read_elog(path) -> list[Block]:
    with open(path, "rb") as f:
        return list(iterate_blocks(f))


def predict_file_size(n_tb: int, e_buf: int) -> int:
    """Bytes of an elog holding ``n_tb`` entries bundled ``e_buf`` per frame.

    A remainder of ``n_tb % e_buf`` entries is written as one shorter frame.
    """
    if e_buf < 1:
        raise InvalidParam(f"entries per buffer must be >= 1, got {e_buf}")
    if n_tb < 0:
        raise InvalidParam(f"entry count must be >= 0, got {n_tb}")
    full, rest = divmod(n_tb, e_buf)
    size = PREAMBLE_SIZE + full * (FRAME_OVERHEAD + e_buf * ENTRY_SIZE)
    if rest:
        size += FRAME_OVERHEAD + rest * ENTRY_SIZE
    return size


def size_ratio(e_buf: float) -> float:
    """Workload size with ``e_buf`` entries per frame relative to one entry per frame."""
    if e_buf < 1:
        raise InvalidParam(f"entries per buffer must be >= 1, got {e_buf}")
    return (4 / 9) / e_buf + 5 / 9
