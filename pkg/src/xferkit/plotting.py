"""Figure rendering for benchmark reports.

Writes PNG files next to the CSV/report output; callers that only want
the delimited data can pass figures=False to fit_and_report.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_sweep(rows, sweep, path: str | Path) -> None:
    """Scatter of measured runs plus the fitted line, one figure per sweep."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r.grid_value for r in rows]
    if sweep.plan_kind == "concurrency":
        ys = [r.throughput_Bps / 1e6 for r in rows]
        ax.set_xlabel("concurrency (files in flight)")
        ax.set_ylabel("throughput (MB/s)")
        means = {gv: thr / 1e6 for gv, _, thr in sweep.grid_stats}
        ax.plot(sorted(means), [means[g] for g in sorted(means)],
                "-", color="tab:orange", label="mean")
    elif sweep.plan_kind == "integrity":
        ys = [r.throughput_Bps / 1e6 for r in rows]
        ax.set_xlabel("integrity (0 = off, 1 = strong)")
        ax.set_ylabel("throughput (MB/s)")
        ax.set_xticks([0, 1])
    else:
        ys = [r.T_seconds for r in rows]
        ax.set_ylabel("transfer time (s)")
        ax.set_xlabel("file count" if sweep.plan_kind == "filecount"
                      else "dataset size (bytes)")
        lo, hi = min(xs), max(xs)
        if sweep.fitted_t0 is not None:
            ax.plot([lo, hi],
                    [sweep.fitted_alpha + sweep.fitted_t0 * lo,
                     sweep.fitted_alpha + sweep.fitted_t0 * hi],
                    "-", color="tab:orange",
                    label=f"fit: t0={sweep.fitted_t0 * 1000:.1f} ms")
        elif sweep.fitted_s0 is not None:
            ax.plot([lo, hi],
                    [sweep.fitted_s0 + sweep.fitted_t_u * lo / 1e9,
                     sweep.fitted_s0 + sweep.fitted_t_u * hi / 1e9],
                    "-", color="tab:orange",
                    label=f"fit: S0={sweep.fitted_s0:.2f} s")
    ax.scatter(xs, ys, s=18, alpha=0.7, color="tab:blue", label="runs")
    title = f"{sweep.plan_kind} / {sweep.topology}"
    if sweep.pearson_rho is not None:
        title += f"  (rho={sweep.pearson_rho:.3f})"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
