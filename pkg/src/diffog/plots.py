"""SVG line plots built only from table rows, so they can be regenerated offline."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "diffog"


def plot_lines(rows, x: str, ys, path, title=""):
    """One line per column in ``ys`` against column ``x``; rows lacking a value are skipped."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for y in ys:
        pts = [(r[x], r[y]) for r in rows if r.get(y) not in (None, "")]
        if pts:
            xs, vs = zip(*pts)
            ax.plot(xs, vs, marker="o", label=y)
    ax.set_xlabel(x)
    ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
