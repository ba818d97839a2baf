"""Figures for sweep CSVs: bias deviation and perplexity against the knob."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402

_STABLE_METADATA = {"png": {"Software": None}, "svg": {"Date": None}, "pdf": {"CreationDate": None}}
KNOB_LABELS = {"pcgu": "k (fraction of partitions)", "tv": "lambda"}


def plot_sweeps(tables: Sequence[tuple[str, list[dict]]], out_path) -> Path:
    """Two panels, one line per CSV. ``tables`` holds ``(label, rows)`` pairs."""
    if not tables or not any(rows for _, rows in tables):
        raise DataError("nothing to plot")
    methods = {r["method"] for _, rows in tables for r in rows}
    xlabel = KNOB_LABELS.get(next(iter(methods)), "knob") if len(methods) == 1 else "knob"

    fig, (ax_d, ax_p) = plt.subplots(1, 2, figsize=(9, 3.6))
    for label, rows in tables:
        xs = [r["knob"] for r in rows]
        ax_d.plot(xs, [r["delta"] for r in rows], marker="o", label=label)
        ax_p.plot(xs, [r["perplexity"] for r in rows], marker="o", label=label)
    ax_d.axhline(0.0, color="grey", lw=0.8, ls=":")
    ax_d.set_ylabel("bias score deviation |s - 0.5|")
    ax_p.set_ylabel("perplexity")
    for ax in (ax_d, ax_p):
        ax.set_xlabel(xlabel)
        ax.grid(alpha=0.3)
    if len(tables) > 1:
        ax_d.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_path)
    # no timestamp or version in the metadata: same CSV, same bytes
    metadata = _STABLE_METADATA.get(out.suffix.lower().lstrip("."), {})
    with matplotlib.rc_context({"svg.hashsalt": "unlearnkit"}):
        fig.savefig(out, dpi=120, metadata=metadata)
    plt.close(fig)
    return out
