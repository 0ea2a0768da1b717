"""Static figures written next to the trace CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dynamics import SimTrace  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_trace(trace: SimTrace, out_dir, title: str = "") -> list:
    """Write output, module and circulating-current figures; return paths."""
    out = Path(out_dir)
    t = trace.t
    paths = []

    fig, ax = plt.subplots(3, 1, sharex=True, figsize=(8, 7))
    ax[0].plot(t, trace.v_out, lw=0.6, label="v_out")
    ax[0].plot(t, trace.v_ref, lw=0.6, ls="--", label="v_ref")
    ax[0].set_ylabel("V")
    ax[0].legend(loc="upper right")
    ax[1].plot(t, trace.i_out, lw=0.6)
    ax[1].set_ylabel("i_out [A]")
    ax[2].plot(t, trace.p_out, lw=0.6)
    ax[2].set_ylabel("p_out [W]")
    ax[2].set_xlabel("t [s]")
    ax[0].set_title(f"{title} output".strip())
    paths.append(_save(fig, out / "output.png"))

    fig, ax = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
    # Period-scale averages read better than the raw switched samples.
    k = max(1, int(round(len(t) / max(t[-1] - t[0], 1e-9) * 0.02))) if len(t) > 1 else 1
    kernel = np.ones(k) / k
    for m in range(trace.n_modules):
        ax[0].plot(t, np.convolve(trace.modules[:, m, 2], kernel, mode="same"), lw=0.8, label=f"module {m + 1}")
        ax[1].plot(t, np.convolve(trace.modules[:, m, 0], kernel, mode="same"), lw=0.8)
    ax[0].set_ylabel("p_b [W] (20 ms mean)")
    ax[1].set_ylabel("i_b [A] (20 ms mean)")
    ax[1].set_xlabel("t [s]")
    ax[0].legend(loc="upper right", fontsize=7)
    ax[0].set_title(f"{title} modules".strip())
    paths.append(_save(fig, out / "modules.png"))

    fig, ax = plt.subplots(figsize=(8, 4))
    for g in range(1, trace.n_modules):
        ax.plot(t, trace.groups[:, g, 0], lw=0.6, label=f"group {g}")
    ax.set_ylabel("i_circ [A]")
    ax.set_xlabel("t [s]")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_title(f"{title} circulating currents".strip())
    paths.append(_save(fig, out / "circulating.png"))
    return paths


def render_compare(table, out_dir) -> Path:
    """Loss and core-ratio curves from a comparison table (header row first)."""
    rows = np.array(table[1:], dtype=float)
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].plot(rows[:, 0], rows[:, 1], label="proposed")
    ax[0].plot(rows[:, 0], rows[:, 2], label="benchmark")
    ax[0].set_xlabel("i_circ / i_out")
    ax[0].set_ylabel("conduction + switching loss [W]")
    ax[0].legend()
    ax[1].plot(rows[:, 0], rows[:, 3])
    ax[1].set_xlabel("i_circ / i_out")
    ax[1].set_ylabel("core area ratio")
    return _save(fig, Path(out_dir) / "compare.png")
