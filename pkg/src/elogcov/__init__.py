"""Execution-trace (elog) collection and coverage reporting for DBT simulators."""

from .collector import Collector, CollectorConfig, CollectorStats, new_collector, try_merge
from .elog import (ArchBlock, BlockHeader, ConfigPreamble, ExecEntry, ExecFrame, InfoBlock, UnknownBlock,
                   decode_block, decode_header, encode_block, encode_exec_frame, encode_header, iterate_blocks,
                   predict_file_size, read_elog, size_ratio, write_config_preamble)
from .errors import *  # noqa: F401,F403
from .report import CoverageCounts, LineMap, accumulate, emit_lcov, load_line_map, summarize

__version__ = "0.1.0"
