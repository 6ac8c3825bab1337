"""SVG figures rendered from the CSV artifacts (the CSV is the record; plots are derived)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from kgrl.harness.record import read_csv  # noqa: E402

FIGSIZE = (6.0, 3.6)
# svg.hashsalt keeps element ids stable so identical CSVs give identical files
RC = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False, "svg.hashsalt": "kgrl"}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_curves(csv_path: Path, svg_path: Path, title: str = "") -> Path:
    """Training (rolling) and greedy-eval mean return against env steps."""
    rows = read_csv(csv_path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for source, style in (("train", "-"), ("eval", "o-")):
            pts = [(int(r["step"]), float(r["mean_return"])) for r in rows if r["source"] == source and r["mean_return"]]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, style, ms=3, lw=1.2, label=source)
        ax.set_xlabel("env steps")
        ax.set_ylabel("mean return")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, svg_path)


def render_trace(csv_path: Path, svg_path: Path, title: str = "") -> Path:
    """One line per component: normalized attention weight at each step, events marked."""
    rows = read_csv(csv_path)
    comps = [c[2:] for c in rows[0] if c.startswith("w_")] if rows else []
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        steps = [int(r["step"]) for r in rows]
        for c in comps:
            ax.plot(steps, [float(r[f"w_{c}"]) for r in rows], lw=1.4, label=c)
        for r in rows:
            if r["events"]:
                ax.axvline(int(r["step"]), color="0.6", lw=0.8, ls=":")
                ax.text(int(r["step"]), 1.02, r["events"], fontsize=7, rotation=90, va="bottom", ha="center")
        ax.set_ylim(-0.02, 1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("weight")
        ax.set_title(title, pad=28)
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, svg_path)


def render_sweep(csv_path: Path, svg_path: Path, title: str = "") -> Path:
    rows = read_csv(csv_path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot([float(r["scale"]) for r in rows], [float(r["success_rate"]) for r in rows], "o-", lw=1.2)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("goal range scale")
        ax.set_ylabel("success rate")
        ax.set_title(title)
        return _save(fig, svg_path)
