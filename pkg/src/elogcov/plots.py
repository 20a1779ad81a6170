"""Figures for sweep results.

Uses ``matplotlib.figure.Figure`` directly so no GUI backend or global
pyplot state is involved.
"""

from __future__ import annotations

import os
from collections import defaultdict

from matplotlib.figure import Figure

from .elog import FRAME_OVERHEAD, ENTRY_SIZE, PREAMBLE_SIZE, size_ratio

WIDTH = 6.0
GOLDEN = (5 ** 0.5 - 1) / 2


def _new_figure(width=WIDTH):
    fig = Figure(figsize=(width, width * GOLDEN))
    ax = fig.add_subplot(1, 1, 1)
    ax.grid(True, which="major", alpha=0.3)
    return fig, ax


def _legend(ax, fontsize):
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=fontsize)


def _groups(rows, *keys):
    out = defaultdict(list)
    for r in rows:
        out[tuple(r[k] for k in keys)].append(r)
    return {k: sorted(v, key=lambda r: r["capacity"]) for k, v in sorted(out.items())}


def plot_size_ratio(rows, ax):
    """Measured file size (preamble excluded) relative to one entry per frame."""
    caps = sorted({r["capacity"] for r in rows})
    for (nb, lat), group in _groups([r for r in rows if r["merge"] == "off"], "n_buffers", "latency_ns").items():
        group = [r for r in group if r["events"]]
        # Denominator: unbundled size of the same stream, i.e. what capacity 1 writes.
        y = [(r["file_bytes"] - PREAMBLE_SIZE) / ((FRAME_OVERHEAD + ENTRY_SIZE) * r["events"]) for r in group]
        ax.plot([r["capacity"] for r in group], y, "o", ms=4, label=f"measured, {nb} buf")
    if caps:
        fine = [2 ** (i / 8) for i in range(0, 8 * max(1, caps[-1].bit_length()))]
        fine = [c for c in fine if c <= caps[-1]] or [1]
        ax.plot(fine, [size_ratio(c) for c in fine], "-", lw=1, color="k", label="4/(9E) + 5/9")
        ax.axhline(5 / 9, ls=":", color="gray", lw=1)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("entries per buffer")
    ax.set_ylabel("size relative to unbuffered")
    _legend(ax, 8)


def plot_congestion(rows, ax):
    for (nb, merge, lat), group in _groups(rows, "n_buffers", "merge", "latency_ns").items():
        ax.plot([r["capacity"] for r in group], [r["congestion_waits"] for r in group], "o-", ms=3,
                label=f"{nb} buf, merge {merge}, {lat / 1e6:g} ms")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("entries per buffer")
    ax.set_ylabel("congestion waits")
    _legend(ax, 7)


def plot_wall_time(rows, ax):
    for (nb, merge, lat), group in _groups(rows, "n_buffers", "merge", "latency_ns").items():
        ax.plot([r["capacity"] for r in group], [r["wall_ns"] / 1e6 for r in group], "o-", ms=3,
                label=f"{nb} buf, merge {merge}, {lat / 1e6:g} ms")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("entries per buffer")
    ax.set_ylabel("wall time [ms]")
    _legend(ax, 7)


FIGURES = {
    "size_ratio": plot_size_ratio,
    "congestion": plot_congestion,
    "wall_time": plot_wall_time,
}


def render_figures(rows, outdir, fmt="png", dpi=150) -> list[str]:
    """Render every figure in FIGURES for ``rows`` into ``outdir``; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for name, draw in FIGURES.items():
        fig, ax = _new_figure()
        draw(rows, ax)
        fig.tight_layout()
        path = os.path.join(outdir, f"{name}.{fmt}")
        fig.savefig(path, dpi=dpi)
        paths.append(path)
    return paths
