"""Static figures rendered from experiment CSV rows."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_csv(path) -> list:
    """Rows as dicts, skipping the schema comment line."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plot_maxpush(rows, path) -> None:
    """Grouped bars of max impulse per push phase, one panel per variant."""
    variants = list(dict.fromkeys(r[0] for r in rows))
    fig, axes = plt.subplots(1, len(variants), figsize=(4 * len(variants), 3.2), sharey=True, squeeze=False)
    for ax, v in zip(axes[0], variants):
        phases = sorted({r[1] for r in rows if r[0] == v})
        x = np.arange(len(phases))
        for off, hands, color in ((-0.2, "off", "tab:gray"), (0.2, "on", "tab:blue")):
            vals = [next(float(r[3]) for r in rows if r[0] == v and r[1] == p and r[2] == hands) for p in phases]
            ax.bar(x + off, vals, 0.4, label=f"hands {hands}", color=color)
        ax.set_xticks(x, [str(p) for p in phases])
        ax.set_xlabel("push phase")
        ax.set_title(f"{v}-step wall")
    axes[0][0].set_ylabel("max impulse [N s]")
    axes[0][-1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trace(trace, path) -> None:
    """CoM, ZMP and hand force against time for one walk."""
    t = trace.column("t")
    fig, (a, b) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    a.plot(t, trace.column("cx"), label="CoM x")
    a.plot(t, trace.column("zmp_x"), label="ZMP x (pendulum)")
    a.plot(t, trace.column("zmp_hand_x"), label="ZMP x (with hand)")
    a.set_ylabel("x [m]")
    a.legend(fontsize=8)
    for name in ("fcmd_x", "freal_x", "fcmd_z"):
        b.plot(t, trace.column(name), label=name)
    b.set_ylabel("hand force [N]")
    b.set_xlabel("time [s]")
    b.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
