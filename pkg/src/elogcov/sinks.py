"""Frame consumers for the collector.

A sink receives fully encoded blocks through ``write(data)``; each call is
one whole frame and is written atomically with respect to other callers, so
several collectors (one per vCPU) can share a sink.
"""

from __future__ import annotations

import io
import os
import threading
import time

from .elog import ConfigPreamble, encode_preamble, iterate_blocks

# Large buffer keeps raw writes (which drop the GIL mid-flush) rare.
FILE_BUFFER_BYTES = 1 << 20


class FileSink:
    """Writes an elog file; the configuration preamble goes out on open."""

    def __init__(self, path, preamble: ConfigPreamble | None = None, buffering: int = FILE_BUFFER_BYTES):
        self.path = os.fspath(path)
        self._lock = threading.Lock()
        self._f = open(self.path, "wb", buffering=buffering)
        self.bytes_written = 0
        try:
            self.write(encode_preamble(preamble or ConfigPreamble()))
        except BaseException:
            self._f.close()
            raise

    def write(self, data: bytes) -> int:
        with self._lock:
            self._f.write(data)
            self.bytes_written += len(data)
        return len(data)

    @property
    def closed(self) -> bool:
        return self._f.closed

    def close(self):
        with self._lock:
            if not self._f.closed:
                self._f.close()


class MemorySink:
    """Keeps every write in memory; handy for tests."""

    def __init__(self, preamble: ConfigPreamble | None = None, write_preamble: bool = True):
        self._lock = threading.Lock()
        self.chunks: list[bytes] = []
        self.closed = False
        if write_preamble:
            self.write(encode_preamble(preamble or ConfigPreamble()))

    def write(self, data: bytes) -> int:
        with self._lock:
            if self.closed:
                raise ValueError("write to closed sink")
            self.chunks.append(bytes(data))
        return len(data)

    def getvalue(self) -> bytes:
        with self._lock:
            return b"".join(self.chunks)

    @property
    def bytes_written(self) -> int:
        with self._lock:
            return sum(map(len, self.chunks))

    def blocks(self):
        return list(iterate_blocks(io.BytesIO(self.getvalue())))

    def close(self):
        self.closed = True


class LatencySink:
    """Delays every write by a fixed amount before passing it on.

    Used to emulate a slow disk in congestion experiments. The delay sleeps,
    so the producer keeps running while a frame is "in flight".
    """

    def __init__(self, inner, latency_ns: int):
        self.inner = inner
        self.latency_ns = int(latency_ns)

    def write(self, data: bytes) -> int:
        if self.latency_ns > 0:
            time.sleep(self.latency_ns / 1e9)
        return self.inner.write(data)

    @property
    def bytes_written(self) -> int:
        return self.inner.bytes_written

    def close(self):
        self.inner.close()


class FailingSink:
    """Delegates to ``inner`` until ``fail_after`` writes, then raises OSError."""

    def __init__(self, inner, fail_after: int):
        self.inner = inner
        self.remaining = fail_after

    def write(self, data: bytes) -> int:
        if self.remaining <= 0:
            raise OSError(28, os.strerror(28))
        self.remaining -= 1
        return self.inner.write(data)

    @property
    def bytes_written(self) -> int:
        return self.inner.bytes_written

    def close(self):
        self.inner.close()
